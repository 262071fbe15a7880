"""
Parameterized building blocks over the autodiff engine.
"""

import logging
from collections import OrderedDict
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .tensor import Tensor, AutodiffError

logger = logging.getLogger(__name__)


class Module:
    """
    Container of named parameters and child modules.

    Parameter order follows attribute assignment order, which makes
    ``state_dict`` keys and checkpoint layouts stable.
    """

    def named_parameters(self, prefix: str = '') -> List[Tuple[str, Tensor]]:
        found = []
        for name, value in vars(self).items():
            path = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                found.append((path, value))
            elif isinstance(value, Module):
                found.extend(value.named_parameters(f"{path}."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        found.extend(item.named_parameters(f"{path}.{i}."))
        return found

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> 'OrderedDict[str, np.ndarray]':
        return OrderedDict((name, p.data.copy()) for name, p in self.named_parameters())

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = sorted(set(params) - set(state))
        unexpected = sorted(set(state) - set(params))
        if missing or unexpected:
            raise AutodiffError(f"State mismatch: missing={missing} unexpected={unexpected}")
        for name, param in params.items():
            value = np.asarray(state[name])
            if value.shape != param.shape:
                raise T.ShapeMismatch(f"Parameter {name}: expected {param.shape}, got {value.shape}")
            param.data = value.astype(param.dtype).copy()

    def zero_(self) -> None:
        """Set every parameter to zero (used by degenerate-case checks)."""
        for _, param in self.named_parameters():
            param.data = np.zeros_like(param.data)

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.parameters()))


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Linear(Module):
    """Affine map y = x W + b, initialised uniform in ±1/sqrt(fan_in)."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 dtype=np.float32):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Tensor(_uniform(rng, (in_features, out_features), in_features, dtype),
                             requires_grad=True)
        self.bias = Tensor(_uniform(rng, (out_features,), in_features, dtype), requires_grad=True)

    def __call__(self, x) -> Tensor:
        x = T.as_tensor(x)
        if x.shape[-1] != self.in_features:
            raise T.ShapeMismatch(f"Linear expects last dim {self.in_features}, got {x.shape}")
        return T.add(T.matmul(x, self.weight), self.bias)


class MLP(Module):
    """Stack of Linear layers with an activation between them (none after the last)."""

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator,
                 activation: str = 'tanh', dtype=np.float32):
        if len(sizes) < 2:
            raise AutodiffError("MLP needs at least input and output sizes")
        if activation not in T.ACTIVATIONS:
            raise AutodiffError(f"Unknown activation '{activation}'")
        self.activation = activation
        self.layers = [Linear(a, b, rng, dtype) for a, b in zip(sizes[:-1], sizes[1:])]

    def __call__(self, x) -> Tensor:
        act = T.ACTIVATIONS[self.activation]
        out = T.as_tensor(x)
        for i, layer in enumerate(self.layers):
            out = layer(out)
            if i < len(self.layers) - 1:
                out = act(out)
        return out


class Embedding(Module):
    """Lookup table of row vectors."""

    def __init__(self, count: int, width: int, rng: np.random.Generator,
                 scale: float = 0.02, dtype=np.float32):
        self.count = count
        self.width = width
        self.table = Tensor((rng.standard_normal((count, width)) * scale).astype(dtype),
                            requires_grad=True)

    def __call__(self, indices) -> Tensor:
        indices = np.asarray(indices, dtype=np.int64)
        if indices.size and (indices.min() < 0 or indices.max() >= self.count):
            raise AutodiffError(f"Embedding index out of range [0, {self.count})")
        return T.take_rows(self.table, indices)


class LayerNorm(Module):
    def __init__(self, width: int, eps: float = 1e-5, dtype=np.float32):
        self.eps = eps
        self.gain = Tensor(np.ones(width, dtype=dtype), requires_grad=True)
        self.shift = Tensor(np.zeros(width, dtype=dtype), requires_grad=True)

    def __call__(self, x) -> Tensor:
        x = T.as_tensor(x)
        mean = T.reduce_mean(x, axis=-1, keepdims=True)
        centered = T.sub(x, mean)
        var = T.reduce_mean(T.square(centered), axis=-1, keepdims=True)
        normed = T.div(centered, T.sqrt(T.add(var, self.eps)))
        return T.add(T.mul(normed, self.gain), self.shift)


class GRUCell(Module):
    """Gated recurrent unit over (batch, width) inputs."""

    def __init__(self, input_size: int, hidden_size: int, rng: np.random.Generator,
                 dtype=np.float32):
        self.hidden_size = hidden_size
        self.input_gates = Linear(input_size, 3 * hidden_size, rng, dtype)
        self.hidden_gates = Linear(hidden_size, 3 * hidden_size, rng, dtype)

    def __call__(self, x: Tensor, h: Tensor) -> Tensor:
        n = self.hidden_size
        gx = self.input_gates(x)
        gh = self.hidden_gates(h)
        reset = T.sigmoid(T.add(gx[..., :n], gh[..., :n]))
        update = T.sigmoid(T.add(gx[..., n:2 * n], gh[..., n:2 * n]))
        candidate = T.tanh(T.add(gx[..., 2 * n:], T.mul(reset, gh[..., 2 * n:])))
        return T.add(T.mul(T.sub(1.0, update), candidate), T.mul(update, h))


def collect_parameters(modules: Sequence[Module]) -> List[Tuple[str, Tensor]]:
    named = []
    for module in modules:
        named.extend(module.named_parameters())
    return named


def sinusoidal_positions(length: int, width: int, dtype=np.float32) -> np.ndarray:
    """Fixed sine/cosine position table (length, width)."""
    positions = np.arange(length)[:, None]
    rates = 1.0 / np.power(10000.0, (2 * (np.arange(width) // 2)) / float(width))
    table = positions * rates[None, :]
    table[:, 0::2] = np.sin(table[:, 0::2])
    table[:, 1::2] = np.cos(table[:, 1::2])
    return table.astype(dtype)


def clip_gradients(grads: List[np.ndarray], max_norm: Optional[float]) -> Tuple[List[np.ndarray], float]:
    """Scale gradients so their global norm is at most max_norm."""
    total = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads)))
    if max_norm is None or total <= max_norm or total == 0.0:
        return grads, total
    scale = max_norm / total
    return [g * scale for g in grads], total

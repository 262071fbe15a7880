"""
Reverse-mode automatic differentiation over numpy arrays.

Operations on Tensors are recorded on the active Tape (see ``Tape.__enter__``)
whenever at least one input requires a gradient. The record order is a
topological order, so ``Tape.backward`` walks it in reverse.
"""

import contextvars
import itertools
import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)


class AutodiffError(Exception):
    """Custom exception for autodiff errors"""
    pass


class ShapeMismatch(AutodiffError):
    """Operand shapes do not compose"""
    pass


class NonScalarLoss(AutodiffError):
    """backward() was asked to start from a non-scalar node"""
    pass


_ACTIVE_TAPE = contextvars.ContextVar('hoi_active_tape', default=None)
_NODE_IDS = itertools.count()

ArrayLike = Union['Tensor', np.ndarray, float, int]


class Tensor:
    """Dense n-d value with an optional gradient slot on the tape."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        array = np.asarray(data)
        if not np.issubdtype(array.dtype, np.floating):
            array = array.astype(np.float64)
        self.data = array
        self.requires_grad = requires_grad
        self.name = name
        self.node_id = next(_NODE_IDS)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        label = f" name={self.name}" if self.name else ''
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # Operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __pow__(self, exponent): return power(self, exponent)
    def __matmul__(self, other): return matmul(self, other)
    def __rmatmul__(self, other): return matmul(other, self)
    def __getitem__(self, index): return getitem(self, index)

    def sum(self, axis=None, keepdims=False): return reduce_sum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return reduce_mean(self, axis, keepdims)
    def max(self, axis=-1, keepdims=False): return reduce_max(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 else shape)
    def transpose(self, *axes): return transpose(self, axes if axes else None)


def as_tensor(value: ArrayLike) -> Tensor:
    """Wrap constants so every op sees Tensors."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


@dataclass
class _Record:
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """
    Ordered record of primitive ops.

    A tape is single-writer: use one per thread. Independent tapes may run
    concurrently because the active tape is held in a context variable.
    """

    def __init__(self):
        self.records: List[_Record] = []
        self._token = None

    def __enter__(self) -> 'Tape':
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _ACTIVE_TAPE.reset(self._token)
        self._token = None
        return False

    def __len__(self):
        return len(self.records)

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, backward) -> None:
        self.records.append(_Record(op, tuple(inputs), output, backward))

    def forward(self, op: str, *inputs, **attrs) -> Tensor:
        """Apply a named primitive with this tape active."""
        if op not in OPS:
            raise AutodiffError(f"Unknown op '{op}'")
        with self:
            return OPS[op](*inputs, **attrs)

    def backward(self, loss: Tensor) -> Dict[int, np.ndarray]:
        """
        Propagate d(loss)/d(node) back through the record.

        Args:
            loss: scalar Tensor produced on this tape

        Returns:
            Mapping node_id -> gradient for every requires_grad leaf reached

        Raises:
            NonScalarLoss: if loss has more than one element
        """
        if loss.size != 1:
            raise NonScalarLoss(f"Loss must be scalar, got shape {loss.shape}")

        grads: Dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data, dtype=np.float64)}
        produced = set()
        leaves: Dict[int, Tensor] = {}

        for rec in self.records:
            produced.add(rec.output.node_id)

        for rec in reversed(self.records):
            grad_out = grads.pop(rec.output.node_id, None)
            if grad_out is None:
                continue
            input_grads = rec.backward(grad_out)
            for tensor, grad in zip(rec.inputs, input_grads):
                if grad is None or not tensor.requires_grad:
                    continue
                if grad.shape != tensor.shape:
                    raise ShapeMismatch(
                        f"Gradient shape {grad.shape} does not match {tensor.shape} in op '{rec.op}'"
                    )
                key = tensor.node_id
                grads[key] = grads[key] + grad if key in grads else grad
                if key not in produced:
                    leaves[key] = tensor

        return {key: grads[key] for key in leaves if key in grads}


def gradients_for(params: Sequence[Tensor], grads: Dict[int, np.ndarray]) -> List[np.ndarray]:
    """Gradient per parameter in order; zeros for parameters the loss never reached."""
    return [grads.get(p.node_id, np.zeros(p.shape, dtype=np.float64)) for p in params]


def _emit(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    tape = _ACTIVE_TAPE.get()
    needs_grad = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs_grad)
    if needs_grad:
        tape.record(op, inputs, out, backward)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"Cannot {op} shapes {a.shape} and {b.shape}")


# Elementwise arithmetic

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, 'add')
    return _emit('add', a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, 'subtract')
    return _emit('sub', a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, 'multiply')
    return _emit('mul', a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, 'divide')
    out = a.data / b.data
    return _emit('div', out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def neg(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _emit('neg', -a.data, (a,), lambda g: (-g,))


def power(a: ArrayLike, exponent: float) -> Tensor:
    a = as_tensor(a)
    return _emit('pow', a.data ** exponent, (a,),
                 lambda g: (g * exponent * a.data ** (exponent - 1),))


def square(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _emit('square', a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def exp(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _emit('exp', out, (a,), lambda g: (g * out,))


def log(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _emit('log', np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _emit('sqrt', out, (a,), lambda g: (g * 0.5 / out,))


def absolute(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _emit('abs', np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


# Activations

def tanh(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _emit('tanh', out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _emit('sigmoid', out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    positive = a.data > 0
    return _emit('relu', np.where(positive, a.data, 0.0), (a,), lambda g: (g * positive,))


ACTIVATIONS = {
    'tanh': tanh,
    'sigmoid': sigmoid,
    'relu': relu,
}


# Linear algebra

def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"Cannot matmul shapes {a.shape} and {b.shape}")

    def backward(g):
        grad_a = np.matmul(g, np.swapaxes(b.data, -1, -2))
        grad_b = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)

    return _emit('matmul', np.matmul(a.data, b.data), (a, b), backward)


# Reductions

def _expand_reduced(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(shape)), shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def reduce_sum(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    return _emit('reduce_sum', a.data.sum(axis=axis, keepdims=keepdims), (a,),
                 lambda g: (np.array(_expand_reduced(g, a.shape, axis, keepdims)),))


def reduce_mean(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return _emit('reduce_mean', a.data.mean(axis=axis, keepdims=keepdims), (a,),
                 lambda g: (np.array(_expand_reduced(g, a.shape, axis, keepdims)) / count,))


def reduce_max(a: ArrayLike, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Max over one axis; the gradient goes to the first maximal element."""
    a = as_tensor(a)
    axis = axis % a.ndim
    winners = np.expand_dims(np.argmax(a.data, axis=axis), axis)
    out = np.take_along_axis(a.data, winners, axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def backward(g):
        grad = np.zeros(a.shape, dtype=np.float64)
        g_kept = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(grad, winners, g_kept, axis=axis)
        return (grad,)

    return _emit('reduce_max', out, (a,), backward)


# Shape manipulation

def reshape(a: ArrayLike, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch(f"Cannot reshape {a.shape} to {shape}")
    return _emit('reshape', out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: ArrayLike, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _emit('transpose', np.transpose(a.data, axes), (a,),
                 lambda g: (np.transpose(g, inverse),))


def swapaxes(a: ArrayLike, axis1: int, axis2: int) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[axis1], axes[axis2] = axes[axis2], axes[axis1]
    return transpose(a, axes)


def getitem(a: ArrayLike, index) -> Tensor:
    """Basic or fancy indexing; repeated indices accumulate in backward."""
    a = as_tensor(a)

    def backward(g):
        grad = np.zeros(a.shape, dtype=np.float64)
        np.add.at(grad, index, g)
        return (grad,)

    return _emit('slice', np.array(a.data[index]), (a,), backward)


def take_rows(table: ArrayLike, indices) -> Tensor:
    """Row lookup (embedding tables): out[...] = table[indices[...]]."""
    table = as_tensor(table)
    indices = np.asarray(indices, dtype=np.int64)

    def backward(g):
        grad = np.zeros(table.shape, dtype=np.float64)
        np.add.at(grad, indices, g)
        return (grad,)

    return _emit('take_rows', table.data[indices], (table,), backward)


def concat(tensors: Sequence[ArrayLike], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeMismatch(f"Cannot concat shapes {[t.shape for t in tensors]}")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _emit('concat', out, tuple(tensors),
                 lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeMismatch(f"Cannot stack shapes {[t.shape for t in tensors]}")

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _emit('stack', out, tuple(tensors), backward)


# Gradient routing

def stop_gradient(a: ArrayLike) -> Tensor:
    """sg[x]: forwards x, contributes no gradient."""
    a = as_tensor(a)
    return _emit('stop_gradient', a.data.copy(), (a,), lambda g: (None,))


def straight_through(x: ArrayLike, quantized) -> Tensor:
    """Forwards the quantized value; the gradient reaches x unchanged."""
    x = as_tensor(x)
    value = quantized.data if isinstance(quantized, Tensor) else np.asarray(quantized)
    if value.shape != x.shape:
        raise ShapeMismatch(f"straight_through shapes differ: {x.shape} vs {value.shape}")
    return _emit('straight_through', value.astype(np.result_type(x.data, value)).copy(), (x,),
                 lambda g: (g,))


# Normalizers

def log_softmax(a: ArrayLike, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    probs = np.exp(out)
    return _emit('log_softmax', out, (a,),
                 lambda g: (g - probs * g.sum(axis=axis, keepdims=True),))


def softmax(a: ArrayLike, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = np.exp(a.data - a.data.max(axis=axis, keepdims=True))
    out = shifted / shifted.sum(axis=axis, keepdims=True)
    return _emit('softmax', out, (a,),
                 lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def l2_normalize(a: ArrayLike, axis: int = -1, eps: float = 1e-12) -> Tensor:
    a = as_tensor(a)
    norm = sqrt(reduce_sum(square(a), axis=axis, keepdims=True) + eps)
    return div(a, norm)


def cross(a: Tensor, b: Tensor) -> Tensor:
    """Cross product over the last axis (length 3)."""
    a, b = as_tensor(a), as_tensor(b)
    ax, ay, az = a[..., 0], a[..., 1], a[..., 2]
    bx, by, bz = b[..., 0], b[..., 1], b[..., 2]
    return stack([ay * bz - az * by, az * bx - ax * bz, ax * by - ay * bx], axis=-1)


OPS = {
    'add': add,
    'sub': sub,
    'mul': mul,
    'div': div,
    'neg': neg,
    'pow': power,
    'square': square,
    'exp': exp,
    'log': log,
    'sqrt': sqrt,
    'abs': absolute,
    'tanh': tanh,
    'sigmoid': sigmoid,
    'relu': relu,
    'affine': lambda x, w, b: add(matmul(x, w), b),
    'matmul': matmul,
    'reduce_sum': reduce_sum,
    'reduce_mean': reduce_mean,
    'reduce_max': reduce_max,
    'reshape': reshape,
    'transpose': transpose,
    'slice': getitem,
    'take_rows': take_rows,
    'concat': concat,
    'stack': stack,
    'stop_gradient': stop_gradient,
    'straight_through': straight_through,
    'log_softmax': log_softmax,
    'softmax': softmax,
}

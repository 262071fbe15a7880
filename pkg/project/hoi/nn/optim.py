"""
Adaptive-moment optimizer over engine parameters.
"""

import logging
from typing import Dict, List, Optional, Sequence

import numpy as np

from .layers import clip_gradients
from .tensor import Tensor, gradients_for

logger = logging.getLogger(__name__)


class Adam:
    """
    Adam with bias correction. Moments are kept in float64; parameters are
    written back in their own dtype so float32 checkpoints stay float32.
    """

    def __init__(self, params: Sequence[Tensor], lr: float = 2e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, max_grad_norm: Optional[float] = None):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.max_grad_norm = max_grad_norm
        self.step_count = 0
        self.m = [np.zeros(p.shape, dtype=np.float64) for p in self.params]
        self.v = [np.zeros(p.shape, dtype=np.float64) for p in self.params]

    def step(self, grads: Dict[int, np.ndarray]) -> float:
        """
        Apply one update from a backward() result.

        Returns:
            Global gradient norm before clipping
        """
        ordered = gradients_for(self.params, grads)
        ordered, norm = clip_gradients(ordered, self.max_grad_norm)
        self.step_count += 1
        t = self.step_count
        for i, (param, grad) in enumerate(zip(self.params, ordered)):
            grad = grad.astype(np.float64)
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad * grad
            m_hat = self.m[i] / (1.0 - self.beta1 ** t)
            v_hat = self.v[i] / (1.0 - self.beta2 ** t)
            updated = param.data.astype(np.float64) - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            param.data = updated.astype(param.dtype)
        return norm


def sum_gradients(shards: List[Dict[int, np.ndarray]]) -> Dict[int, np.ndarray]:
    """Reduce per-shard gradient dicts in shard order."""
    total: Dict[int, np.ndarray] = {}
    for shard in shards:
        for key, grad in shard.items():
            total[key] = total[key] + grad if key in total else grad.copy()
    return total

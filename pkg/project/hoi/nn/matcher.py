"""
Bidirectional GRU motion and text encoders that embed both modalities in one
unit-normalised feature space.
"""

import logging
from typing import List, Sequence, Tuple

import numpy as np

from . import tensor as T
from .layers import Embedding, GRUCell, Linear, Module
from .tensor import Tensor

logger = logging.getLogger(__name__)


def pad_batch(sequences: Sequence[np.ndarray], pad_value=0) -> Tuple[np.ndarray, np.ndarray]:
    """Stack variable-length sequences into (batch, max_len, ...) plus a (batch, max_len) mask."""
    longest = max(len(s) for s in sequences)
    sample = np.asarray(sequences[0])
    batch = np.full((len(sequences), longest) + sample.shape[1:], pad_value, dtype=sample.dtype)
    mask = np.zeros((len(sequences), longest), dtype=np.float64)
    for i, seq in enumerate(sequences):
        batch[i, :len(seq)] = seq
        mask[i, :len(seq)] = 1.0
    return batch, mask


class BiGRU(Module):
    """Runs a GRU each way over masked (batch, steps, width) input and projects both final states."""

    def __init__(self, input_size: int, hidden_size: int, embed_dim: int,
                 rng: np.random.Generator, dtype=np.float32):
        self.hidden_size = hidden_size
        self.forward_cell = GRUCell(input_size, hidden_size, rng, dtype)
        self.backward_cell = GRUCell(input_size, hidden_size, rng, dtype)
        self.projection = Linear(2 * hidden_size, embed_dim, rng, dtype)

    def _run(self, cell: GRUCell, x: Tensor, mask: np.ndarray, steps: List[int]) -> Tensor:
        h = T.as_tensor(np.zeros((x.shape[0], self.hidden_size)))
        for t in steps:
            keep = mask[:, t:t + 1]
            candidate = cell(x[:, t, :], h)
            # Padded steps carry the previous state through unchanged.
            h = T.add(T.mul(candidate, keep), T.mul(h, 1.0 - keep))
        return h

    def __call__(self, x, mask: np.ndarray) -> Tensor:
        x = T.as_tensor(x)
        steps = list(range(x.shape[1]))
        h_forward = self._run(self.forward_cell, x, mask, steps)
        h_backward = self._run(self.backward_cell, x, mask, steps[::-1])
        out = self.projection(T.concat([h_forward, h_backward], axis=-1))
        return T.l2_normalize(out, axis=-1)


class MotionTextMatcher(Module):
    """
    Args:
        vocab_size: size of the caption token id space
        frame_width: per-frame feature width of motion input
        embed_dim: shared feature width
        hidden: GRU hidden width
        motion_stride: keep every n-th frame
    """

    def __init__(self, vocab_size: int, frame_width: int = 208, embed_dim: int = 64,
                 hidden: int = 64, word_dim: int = 32, motion_stride: int = 4, seed: int = 0,
                 dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.motion_stride = motion_stride
        self.embed_dim = embed_dim
        self.motion_encoder = BiGRU(frame_width, hidden, embed_dim, rng, dtype)
        self.word_embedding = Embedding(vocab_size, word_dim, rng, scale=0.1, dtype=dtype)
        self.text_encoder = BiGRU(word_dim, hidden, embed_dim, rng, dtype)

    def embed_motion(self, sequences: Sequence[np.ndarray]) -> Tensor:
        strided = [np.asarray(s)[::self.motion_stride] for s in sequences]
        batch, mask = pad_batch(strided, 0.0)
        return self.motion_encoder(batch, mask)

    def embed_text(self, token_lists: Sequence[Sequence[int]]) -> Tensor:
        batch, mask = pad_batch([np.asarray(t, dtype=np.int64) for t in token_lists], 0)
        return self.text_encoder(self.word_embedding(batch), mask)


def contrastive_loss(motion: Tensor, text: Tensor, temperature: float = 0.1) -> Tensor:
    """Symmetric InfoNCE over in-batch negatives; row i of each side is a matched pair."""
    logits = T.div(T.matmul(motion, T.transpose(text)), temperature)
    n = motion.shape[0]
    diagonal = (np.arange(n), np.arange(n))
    motion_to_text = T.neg(T.reduce_mean(T.log_softmax(logits, axis=1)[diagonal]))
    text_to_motion = T.neg(T.reduce_mean(T.log_softmax(logits, axis=0)[diagonal]))
    return T.mul(T.add(motion_to_text, text_to_motion), 0.5)

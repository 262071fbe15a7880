"""
Pre-norm encoder-decoder transformer over the unified token vocabulary.

Sequences are processed one at a time (shape (length, width)); training
loops accumulate gradients over the pairs of a batch.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .layers import Embedding, LayerNorm, Linear, Module, sinusoidal_positions
from .tensor import AutodiffError, Tensor

logger = logging.getLogger(__name__)

NEG_INF = -1e9


@dataclass
class TransformerShape:
    vocab_size: int
    width: int = 128
    layers: int = 4
    heads: int = 4
    ffn_width: int = 512
    context: int = 512

    def __post_init__(self):
        if self.width % self.heads:
            raise AutodiffError(f"Width {self.width} is not divisible by {self.heads} heads")


class MultiHeadAttention(Module):
    def __init__(self, width: int, heads: int, rng: np.random.Generator, dtype=np.float32):
        self.heads = heads
        self.head_width = width // heads
        self.query = Linear(width, width, rng, dtype)
        self.key = Linear(width, width, rng, dtype)
        self.value = Linear(width, width, rng, dtype)
        self.output = Linear(width, width, rng, dtype)

    def _split(self, x: Tensor) -> Tensor:
        length = x.shape[0]
        return T.transpose(T.reshape(x, (length, self.heads, self.head_width)), (1, 0, 2))

    def __call__(self, x: Tensor, memory: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
        q = self._split(self.query(x))
        k = self._split(self.key(memory))
        v = self._split(self.value(memory))
        scores = T.div(T.matmul(q, T.swapaxes(k, -1, -2)), float(np.sqrt(self.head_width)))
        if mask is not None:
            scores = T.add(scores, mask)
        mixed = T.matmul(T.softmax(scores, axis=-1), v)
        merged = T.reshape(T.transpose(mixed, (1, 0, 2)), (x.shape[0], self.heads * self.head_width))
        return self.output(merged)


class FeedForward(Module):
    def __init__(self, width: int, hidden: int, rng: np.random.Generator, dtype=np.float32):
        self.inner = Linear(width, hidden, rng, dtype)
        self.outer = Linear(hidden, width, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.outer(T.relu(self.inner(x)))


class EncoderLayer(Module):
    def __init__(self, shape: TransformerShape, rng: np.random.Generator, dtype=np.float32):
        self.attn_norm = LayerNorm(shape.width, dtype=dtype)
        self.attn = MultiHeadAttention(shape.width, shape.heads, rng, dtype)
        self.ffn_norm = LayerNorm(shape.width, dtype=dtype)
        self.ffn = FeedForward(shape.width, shape.ffn_width, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.attn_norm(x)
        x = T.add(x, self.attn(h, h))
        return T.add(x, self.ffn(self.ffn_norm(x)))


class DecoderLayer(Module):
    def __init__(self, shape: TransformerShape, rng: np.random.Generator, dtype=np.float32):
        self.self_norm = LayerNorm(shape.width, dtype=dtype)
        self.self_attn = MultiHeadAttention(shape.width, shape.heads, rng, dtype)
        self.cross_norm = LayerNorm(shape.width, dtype=dtype)
        self.cross_attn = MultiHeadAttention(shape.width, shape.heads, rng, dtype)
        self.ffn_norm = LayerNorm(shape.width, dtype=dtype)
        self.ffn = FeedForward(shape.width, shape.ffn_width, rng, dtype)

    def __call__(self, x: Tensor, memory: Tensor, causal: np.ndarray) -> Tensor:
        h = self.self_norm(x)
        x = T.add(x, self.self_attn(h, h, causal))
        x = T.add(x, self.cross_attn(self.cross_norm(x), memory))
        return T.add(x, self.ffn(self.ffn_norm(x)))


class Seq2SeqTransformer(Module):
    """
    Encoder-decoder with a shared token embedding and sinusoidal positions.
    """

    def __init__(self, shape: TransformerShape, seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.shape = shape
        self.embedding = Embedding(shape.vocab_size, shape.width, rng, dtype=dtype)
        self.encoder_layers = [EncoderLayer(shape, rng, dtype) for _ in range(shape.layers)]
        self.encoder_norm = LayerNorm(shape.width, dtype=dtype)
        self.decoder_layers = [DecoderLayer(shape, rng, dtype) for _ in range(shape.layers)]
        self.decoder_norm = LayerNorm(shape.width, dtype=dtype)
        self.lm_head = Linear(shape.width, shape.vocab_size, rng, dtype)
        self._positions = sinusoidal_positions(shape.context + 1, shape.width, dtype)

    def _embed(self, ids: Sequence[int]) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        return T.add(self.embedding(ids), self._positions[:len(ids)])

    def encode(self, source_ids: Sequence[int]) -> Tensor:
        x = self._embed(source_ids)
        for layer in self.encoder_layers:
            x = layer(x)
        return self.encoder_norm(x)

    def decode(self, decoder_ids: Sequence[int], memory: Tensor) -> Tensor:
        """Logits (len(decoder_ids), vocab) for each next-token position."""
        length = len(decoder_ids)
        causal = np.triu(np.full((length, length), NEG_INF), k=1)
        x = self._embed(decoder_ids)
        for layer in self.decoder_layers:
            x = layer(x, memory, causal)
        return self.lm_head(self.decoder_norm(x))

    def __call__(self, source_ids: Sequence[int], decoder_ids: Sequence[int]) -> Tensor:
        return self.decode(decoder_ids, self.encode(source_ids))

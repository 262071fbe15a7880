"""
Quantizer service: hand and object codebooks, nearest-code lookup,
HOI-decomposed residual quantization, EMA codebook learning with dead-code
reset, the commitment loss and latent masking.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..domain import TokenTriple
from ..nn import tensor as T
from ..nn.tensor import Tensor

logger = logging.getLogger(__name__)

DEAD_CODE_THRESHOLD = 0.01
# Upper bound on the (rows, K, d) difference block built by nearest_codes
NEAREST_CHUNK_ELEMENTS = 1 << 22
STAGE_ORDER = ('o', 'l', 'r')


class QuantizerError(Exception):
    """Custom exception for quantizer errors"""
    pass


class CodebookKind(str, Enum):
    HAND = 'hand'
    OBJECT = 'object'


@dataclass
class Codebook:
    kind: CodebookKind
    entries: np.ndarray
    ema_counts: np.ndarray = None
    ema_sums: np.ndarray = None

    def __post_init__(self):
        self.kind = CodebookKind(self.kind)
        self.entries = np.asarray(self.entries, dtype=np.float32)
        if self.entries.ndim != 2 or self.entries.shape[0] < 2:
            raise QuantizerError(f"Codebook needs at least 2 entries, got shape {self.entries.shape}")
        if not np.all(np.isfinite(self.entries)):
            raise QuantizerError("Codebook entries must be finite")
        if self.ema_counts is None:
            self.ema_counts = np.ones(self.size, dtype=np.float32)
        if self.ema_sums is None:
            self.ema_sums = self.entries * self.ema_counts[:, None]
        self.ema_counts = np.asarray(self.ema_counts, dtype=np.float32)
        self.ema_sums = np.asarray(self.ema_sums, dtype=np.float32)

    @property
    def size(self) -> int:
        return int(self.entries.shape[0])

    @property
    def dim(self) -> int:
        return int(self.entries.shape[1])

    def copy(self) -> 'Codebook':
        return Codebook(self.kind, self.entries.copy(), self.ema_counts.copy(), self.ema_sums.copy())

    @classmethod
    def initialise(cls, kind, size: int, dim: int, rng: np.random.Generator,
                   scale: float = 0.1) -> 'Codebook':
        return cls(kind, (rng.standard_normal((size, dim)) * scale).astype(np.float32))

    @classmethod
    def from_samples(cls, kind, size: int, vectors: np.ndarray, rng: np.random.Generator,
                     jitter: float = 1e-3) -> 'Codebook':
        """Entries drawn from observed vectors (with replacement when there are too few), slightly jittered."""
        vectors = np.asarray(vectors, dtype=np.float64)
        picks = rng.choice(len(vectors), size=size, replace=len(vectors) < size)
        noise = rng.standard_normal((size, vectors.shape[1])) * jitter
        return cls(kind, (vectors[picks] + noise).astype(np.float32))


@dataclass
class QuantizeResult:
    """
    Per-stage contributions, their sum, residual norms and chosen indices.

    stage_inputs holds what each stage quantized (the residual for the
    decomposed mode, the raw latent for the independent mode); the EMA
    update learns from it.
    """
    z_hat_o: np.ndarray
    z_hat_l: np.ndarray
    z_hat_r: np.ndarray
    z_hat: np.ndarray
    residual_norms: np.ndarray
    indices: np.ndarray
    stage_inputs: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def tokens(self) -> List[TokenTriple]:
        rows = np.atleast_2d(self.indices)
        return [TokenTriple(int(l), int(r), int(o)) for l, r, o in rows]

    def stage(self, name: str) -> np.ndarray:
        return {'o': self.z_hat_o, 'l': self.z_hat_l, 'r': self.z_hat_r}[name]


def nearest_codes(entries: np.ndarray, vectors: np.ndarray) -> np.ndarray:
    """
    Index of the closest entry for each row; lowest index on ties.

    Rows are scanned in chunks of at most NEAREST_CHUNK_ELEMENTS difference
    values, so memory stays flat for large batches and codebooks.
    """
    entries = np.asarray(entries, dtype=np.float64)
    vectors = np.asarray(vectors, dtype=np.float64).reshape(-1, entries.shape[1])
    step = max(1, NEAREST_CHUNK_ELEMENTS // max(1, entries.size))
    chosen = np.empty(len(vectors), dtype=np.int64)
    for start in range(0, len(vectors), step):
        diff = vectors[start:start + step, None, :] - entries[None, :, :]
        chosen[start:start + step] = np.argmin(np.sum(diff * diff, axis=-1), axis=1)
    return chosen


def nearest_code(codebook: Codebook, v) -> Tuple[int, np.ndarray]:
    index = int(nearest_codes(codebook.entries, np.asarray(v).reshape(1, -1))[0])
    return index, codebook.entries[index]


def _as_batch(z) -> Tuple[np.ndarray, bool]:
    z = np.asarray(z, dtype=np.float64)
    return z.reshape(-1, z.shape[-1]), z.ndim == 1


def hoi_decomposed_quantize(z_o, z_l, z_r, hand_cb: Codebook, obj_cb: Codebook,
                            order: Sequence[str] = STAGE_ORDER) -> QuantizeResult:
    """
    Residual quantization of z = z_o + z_l + z_r, one stage per entity.

    The object stage uses the object codebook and both hand stages the hand
    codebook. Each stage quantizes the remaining residual, adds its entry to
    z_hat and subtracts it from the residual.
    """
    if sorted(order) != sorted(STAGE_ORDER):
        raise QuantizerError(f"Stage order must be a permutation of {STAGE_ORDER}, got {order}")
    (z_o, single), (z_l, _), (z_r, _) = _as_batch(z_o), _as_batch(z_l), _as_batch(z_r)
    if not (z_o.shape == z_l.shape == z_r.shape) or z_o.shape[1] != hand_cb.dim or obj_cb.dim != hand_cb.dim:
        raise QuantizerError("Latents and codebooks must share width d")

    residual = z_o + z_l + z_r
    z_hat = np.zeros_like(residual)
    contributions, indices, inputs, norms = {}, {}, {}, []
    for stage in order:
        book = obj_cb if stage == 'o' else hand_cb
        inputs[stage] = residual.copy()
        chosen = nearest_codes(book.entries, residual)
        q = book.entries[chosen].astype(np.float64)
        contributions[stage] = q
        indices[stage] = chosen
        z_hat = z_hat + q
        residual = residual - q
        norms.append(np.linalg.norm(residual, axis=1))
    return _result(contributions, indices, inputs, np.stack(norms, axis=1), single, z_hat)


def independent_quantize(z_o, z_l, z_r, hand_cb: Codebook, obj_cb: Codebook) -> QuantizeResult:
    """Baseline without residuals: every latent is quantized on its own."""
    (z_o, single), (z_l, _), (z_r, _) = _as_batch(z_o), _as_batch(z_l), _as_batch(z_r)
    latents = {'o': z_o, 'l': z_l, 'r': z_r}
    contributions, indices, norms = {}, {}, []
    for stage in STAGE_ORDER:
        book = obj_cb if stage == 'o' else hand_cb
        chosen = nearest_codes(book.entries, latents[stage])
        contributions[stage] = book.entries[chosen].astype(np.float64)
        indices[stage] = chosen
        norms.append(np.linalg.norm(latents[stage] - contributions[stage], axis=1))
    z_hat = contributions['o'] + contributions['l'] + contributions['r']
    return _result(contributions, indices, {k: v.copy() for k, v in latents.items()},
                   np.stack(norms, axis=1), single, z_hat)


def _result(contributions, indices, inputs, norms, single, z_hat) -> QuantizeResult:
    def shape(a):
        return a[0] if single else a
    stacked = np.stack([indices['l'], indices['r'], indices['o']], axis=1).astype(np.int64)
    return QuantizeResult(
        z_hat_o=shape(contributions['o']),
        z_hat_l=shape(contributions['l']),
        z_hat_r=shape(contributions['r']),
        z_hat=shape(z_hat),
        residual_norms=shape(norms),
        indices=shape(stacked),
        stage_inputs={k: v for k, v in inputs.items()},
    )


def quantize(z_o, z_l, z_r, hand_cb: Codebook, obj_cb: Codebook, mode: str = 'decomposed',
             order: Sequence[str] = STAGE_ORDER) -> QuantizeResult:
    if mode == 'decomposed':
        return hoi_decomposed_quantize(z_o, z_l, z_r, hand_cb, obj_cb, order)
    if mode == 'independent':
        return independent_quantize(z_o, z_l, z_r, hand_cb, obj_cb)
    raise QuantizerError(f"Unknown quantizer mode '{mode}'")


def lookup(triples: Sequence[TokenTriple], hand_cb: Codebook, obj_cb: Codebook) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Codebook entries (n, d) for the object, left and right slots of each triple."""
    rows = np.array([t.as_tuple() for t in triples], dtype=np.int64).reshape(-1, 3)
    return (obj_cb.entries[rows[:, 2]].astype(np.float64),
            hand_cb.entries[rows[:, 0]].astype(np.float64),
            hand_cb.entries[rows[:, 1]].astype(np.float64))


def embedding_loss(z_o, z_l, z_r, result: QuantizeResult, alpha: float = 0.5) -> float:
    """alpha * sum_i ||z_i - z_hat_i||^2, averaged over the batch."""
    if alpha < 0:
        raise QuantizerError("alpha must be nonnegative")
    total = 0.0
    for z, q in ((z_o, result.z_hat_o), (z_l, result.z_hat_l), (z_r, result.z_hat_r)):
        diff = np.atleast_2d(np.asarray(z, dtype=np.float64) - q)
        total = total + np.sum(diff * diff, axis=1)
    return float(alpha * np.mean(total))


def embedding_loss_tensor(latents: Sequence[Tensor], result: QuantizeResult, alpha: float = 0.5) -> Tensor:
    """Commitment term with stop-gradient on the quantized side; gradients reach latents only."""
    total = None
    for z, q in zip(latents, (result.z_hat_o, result.z_hat_l, result.z_hat_r)):
        term = T.reduce_sum(T.square(T.sub(z, T.stop_gradient(q))), axis=-1)
        total = term if total is None else T.add(total, term)
    return T.mul(T.reduce_mean(total), alpha)


def ema_update(codebook: Codebook, vectors, indices, decay: float = 0.99,
               rng: Optional[np.random.Generator] = None) -> Codebook:
    """
    Exponential moving average step toward the mean of assigned vectors.

    Counts and sums of every entry decay together, so entries with no
    assignment keep their value. Entries whose count falls below 0.01 are
    reset to a random vector from this batch.

    Returns:
        A new Codebook; the input is not modified
    """
    if not 0.0 < decay < 1.0:
        raise QuantizerError(f"EMA decay must be in (0, 1), got {decay}")
    vectors = np.asarray(vectors, dtype=np.float64).reshape(-1, codebook.dim)
    indices = np.asarray(indices, dtype=np.int64).reshape(-1)
    if len(vectors) == 0:
        return codebook.copy()
    if len(vectors) != len(indices):
        raise QuantizerError("Each vector needs one assigned index")

    assigned = np.bincount(indices, minlength=codebook.size).astype(np.float64)
    sums = np.zeros((codebook.size, codebook.dim))
    np.add.at(sums, indices, vectors)

    counts = decay * codebook.ema_counts.astype(np.float64) + (1.0 - decay) * assigned
    ema_sums = decay * codebook.ema_sums.astype(np.float64) + (1.0 - decay) * sums
    entries = codebook.entries.astype(np.float64).copy()
    live = counts > 0
    entries[live] = ema_sums[live] / counts[live, None]

    dead = np.flatnonzero(counts < DEAD_CODE_THRESHOLD)
    if dead.size:
        rng = rng or np.random.default_rng(0)
        picks = rng.integers(0, len(vectors), size=dead.size)
        entries[dead] = vectors[picks]
        counts[dead] = 1.0
        ema_sums[dead] = vectors[picks]
        logger.warning(f"Reset {dead.size} dead {codebook.kind.value} codes")

    return Codebook(codebook.kind, entries.astype(np.float32), counts.astype(np.float32),
                    ema_sums.astype(np.float32))


def update_codebooks(hand_cb: Codebook, obj_cb: Codebook, indices: np.ndarray,
                     stage_inputs: Dict[str, np.ndarray], decay: float,
                     rng: np.random.Generator) -> Tuple[Codebook, Codebook]:
    """
    EMA step for every stage of a batch of quantizations.

    Args:
        indices: (n, 3) chosen indices in l, r, o order
        stage_inputs: what each stage quantized, keyed o, l, r
    """
    indices = np.atleast_2d(indices)
    hand_vectors = np.concatenate([stage_inputs['l'], stage_inputs['r']])
    hand_indices = np.concatenate([indices[:, 0], indices[:, 1]])
    return (ema_update(hand_cb, hand_vectors, hand_indices, decay, rng),
            ema_update(obj_cb, stage_inputs['o'], indices[:, 2], decay, rng))


def latent_mask(count: int, mask_prob: float, rng: np.random.Generator) -> np.ndarray:
    """Boolean (count, 3) mask in o, l, r order with no row fully masked."""
    if not 0.0 <= mask_prob < 1.0:
        raise QuantizerError(f"mask_prob must be in [0, 1), got {mask_prob}")
    mask = rng.random((count, 3)) < mask_prob
    full = np.flatnonzero(mask.all(axis=1))
    if full.size:
        mask[full, rng.integers(0, 3, size=full.size)] = False
    return mask


def mask_latents(z_o, z_l, z_r, mask_prob: float = 0.15, seed=None,
                 rng: Optional[np.random.Generator] = None, mask: Optional[np.ndarray] = None):
    """
    Zero each latent independently with probability mask_prob, never all three.

    Tensors of shape (batch, d) are masked on the tape so training sees the
    zeroed latents; a precomputed mask skips the draw.

    Returns:
        ((z_o, z_l, z_r) masked copies, mask of shape (batch, 3) in o, l, r order)
    """
    latents = (z_o, z_l, z_r)
    if any(isinstance(z, Tensor) for z in latents):
        tensors = [T.as_tensor(z) for z in latents]
        if mask is None:
            mask = latent_mask(tensors[0].shape[0], mask_prob, rng or np.random.default_rng(seed))
        keep = [(~mask[:, i:i + 1]).astype(z.dtype) for i, z in enumerate(tensors)]
        return tuple(T.mul(z, k) for z, k in zip(tensors, keep)), mask

    batch = [np.atleast_2d(np.asarray(z, dtype=np.float64)) for z in latents]
    if mask is None:
        mask = latent_mask(batch[0].shape[0], mask_prob, rng or np.random.default_rng(seed))
    masked = tuple(np.where(mask[:, i:i + 1], 0.0, z) for i, z in enumerate(batch))
    if np.asarray(z_o).ndim == 1:
        masked = tuple(m[0] for m in masked)
    return masked, mask


def codebook_usage(codebook: Codebook, tokens) -> Tuple[np.ndarray, float]:
    """Histogram of token indices and the perplexity of that distribution."""
    tokens = np.asarray(tokens, dtype=np.int64).reshape(-1)
    histogram = np.bincount(tokens, minlength=codebook.size)[:codebook.size]
    if histogram.sum() == 0:
        return histogram, 0.0
    probs = histogram / histogram.sum()
    nonzero = probs[probs > 0]
    return histogram, float(np.exp(-np.sum(nonzero * np.log(nonzero))))

"""
Tokenizer service: trains the HOI-decomposed VQ-VAE and converts sequences
to and from token triples.

One training step runs encode -> quantize -> mask -> straight-through ->
decode and minimises

    L = mean |X - X_hat| + alpha * sum_i ||z_i - sg(z_hat_i)||^2 + L_geo

Codebooks are learned by EMA on the quantizer's stage inputs.
"""

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from ..domain import FRAME_WIDTH, HOISequence, TokenTriple
from ..nn import tensor as T
from ..nn.optim import Adam, sum_gradients
from ..nn.tensor import ShapeMismatch, Tape, Tensor
from ..nn.tokenizer_networks import TokenizerNetwork
from ..utils import file_formats
from .config_service import GeometryConfig, TokenizerConfig
from .geometry_service import ContactThresholds, GeoWeights, geo_terms_tensor
from .kinematics_service import ObjectModel
from .quantizer_service import (
    Codebook, CodebookKind, QuantizeResult, embedding_loss_tensor, latent_mask, lookup,
    mask_latents, quantize, update_codebooks,
)

logger = logging.getLogger(__name__)

LOSS_COLUMNS = ('epoch', 'l1', 'l_embed', 'l_pen', 'l_c', 'l_r', 'total')

PARAMS_FILE = 'tokenizer.params'
HAND_CODEBOOK_FILE = 'hand.cbk'
OBJECT_CODEBOOK_FILE = 'object.cbk'
CONFIG_FILE = 'tokenizer_config.json'


class TokenizerError(Exception):
    """Custom exception for tokenizer training and coding errors"""
    pass


class EmptyDataset(TokenizerError):
    pass


class EmptyTokenStream(TokenizerError):
    pass


class TokenOutOfRange(TokenizerError):
    pass


@dataclass
class TokenizerArtifacts:
    """Everything needed to encode and decode: network weights, both codebooks and their config."""
    network: TokenizerNetwork
    hand_codebook: Codebook
    object_codebook: Codebook
    config: TokenizerConfig

    @property
    def window(self) -> int:
        return self.network.window


@dataclass
class GeoContext:
    """Per-window object ids and what the geometry terms need to pose them."""
    object_ids: Sequence[str]
    object_models: Dict[str, ObjectModel]
    weights: GeoWeights = field(default_factory=GeoWeights)
    thresholds: ContactThresholds = field(default_factory=ContactThresholds)

    @property
    def enabled(self) -> bool:
        return max(self.weights.lambda_pen, self.weights.beta_c, self.weights.gamma_r) > 0


@dataclass
class TrainingResult:
    artifacts: TokenizerArtifacts
    loss_curve: List[Dict[str, float]]


def build_artifacts(config: TokenizerConfig, seed: int = 0) -> TokenizerArtifacts:
    rng = np.random.default_rng([seed, 1])
    network = TokenizerNetwork(latent_dim=config.latent_dim, hidden=config.hidden, window=config.window,
                               handedness_dim=config.handedness_dim, seed=seed)
    return TokenizerArtifacts(
        network=network,
        hand_codebook=Codebook.initialise(CodebookKind.HAND, config.codebook_size, config.latent_dim, rng),
        object_codebook=Codebook.initialise(CodebookKind.OBJECT, config.codebook_size, config.latent_dim, rng),
        config=config,
    )


def seed_codebooks(artifacts: TokenizerArtifacts, windows: np.ndarray, rng: np.random.Generator,
                   sample: int = 2048) -> None:
    """
    Initialise both codebooks from what their stages see under the initial
    encoder: the object codebook first, then the hand codebook from the
    residuals left by it.
    """
    config = artifacts.config
    rows = rng.choice(len(windows), size=min(sample, len(windows)), replace=False)
    z_o, z_l, z_r = (z.data for z in artifacts.network.encode_window(windows[np.sort(rows)]))
    first = quantize(z_o, z_l, z_r, artifacts.hand_codebook, artifacts.object_codebook,
                     config.quantizer_mode, config.stage_order)
    artifacts.object_codebook = Codebook.from_samples(CodebookKind.OBJECT, config.codebook_size,
                                                      first.stage_inputs['o'], rng)
    second = quantize(z_o, z_l, z_r, artifacts.hand_codebook, artifacts.object_codebook,
                      config.quantizer_mode, config.stage_order)
    hand_inputs = np.concatenate([second.stage_inputs['l'], second.stage_inputs['r']])
    artifacts.hand_codebook = Codebook.from_samples(CodebookKind.HAND, config.codebook_size, hand_inputs, rng)


def geo_weights(geometry: GeometryConfig, enabled: bool = True) -> GeoWeights:
    weights = GeoWeights(geometry.lambda_pen, geometry.beta_c, geometry.gamma_r)
    return weights if enabled else weights.scaled(0.0)


# ---------------------------------------------------------------------------
# Windows
# ---------------------------------------------------------------------------

def pad_to_windows(features: np.ndarray, window: int) -> Tuple[np.ndarray, int]:
    """
    Repeat the last frame until the length is a positive multiple of window.

    Returns:
        (padded features, number of frames added)
    """
    features = np.asarray(features, dtype=np.float32)
    if features.ndim != 2 or features.shape[1] != FRAME_WIDTH or features.shape[0] == 0:
        raise ShapeMismatch(f"Expected (T, {FRAME_WIDTH}) features with T >= 1, got {features.shape}")
    length = features.shape[0]
    target = max(window, -(-length // window) * window)
    pad = target - length
    if pad:
        features = np.concatenate([features, np.repeat(features[-1:], pad, axis=0)])
    return features, pad


def split_windows(features: np.ndarray, window: int) -> np.ndarray:
    padded, _ = pad_to_windows(features, window)
    return padded.reshape(-1, window, FRAME_WIDTH)


def dataset_windows(dataset: Sequence[HOISequence], window: int) -> Tuple[np.ndarray, np.ndarray]:
    """All windows of a dataset (N, W, 208) and the object id of each."""
    if not dataset:
        raise EmptyDataset("Tokenizer training needs at least one sequence")
    windows, ids = [], []
    for seq in dataset:
        chunk = split_windows(seq.features, window)
        windows.append(chunk)
        ids.extend([seq.object_id] * len(chunk))
    return np.concatenate(windows), np.asarray(ids)


# ---------------------------------------------------------------------------
# Forward pass and loss
# ---------------------------------------------------------------------------

def point_features_for(network: TokenizerNetwork, object_ids: Sequence[str],
                       object_models: Dict[str, ObjectModel]) -> Tensor:
    """c_o per window (B, d); each distinct object is encoded once."""
    cache: Dict[str, Tensor] = {}
    rows = []
    for name in object_ids:
        if name not in cache:
            cache[name] = network.point_features(object_models[name].point_cloud)
        rows.append(cache[name])
    return T.stack(rows, axis=0)


def forward_windows(artifacts: TokenizerArtifacts, windows: np.ndarray, c_o: Tensor,
                    mask: Optional[np.ndarray] = None):
    """
    Encode, mask, quantize and decode one batch of windows.

    Masked latents are zeroed before quantization, so the residual stages,
    the commitment loss and the EMA statistics all see the masked inputs.
    The decoder sees the quantized contributions through the straight-through
    estimator.

    Returns:
        (reconstruction Tensor (B, W, 208), (z_o, z_l, z_r) Tensors, QuantizeResult)
    """
    network = artifacts.network
    config = artifacts.config
    latents = network.encode_window(windows)
    if mask is not None:
        latents, _ = mask_latents(*latents, mask=mask)
    z_o, z_l, z_r = latents
    result = quantize(z_o.data, z_l.data, z_r.data, artifacts.hand_codebook, artifacts.object_codebook,
                      config.quantizer_mode, config.stage_order)
    quantized = [T.straight_through(z, np.atleast_2d(q).astype(z.dtype))
                 for z, q in zip(latents, (result.z_hat_o, result.z_hat_l, result.z_hat_r))]
    recon = network.decode(quantized[0], quantized[1], quantized[2], c_o)
    return recon, latents, result


def loss_total(gt, recon: Tensor, latents: Sequence[Tensor], result: QuantizeResult,
               config: TokenizerConfig, geo: Optional[GeoContext] = None) -> Tuple[Tensor, Dict[str, float]]:
    """
    Total tokenizer loss and its breakdown.

    l1 + l_embed + l_geo equals total; l_geo is the weighted sum of the three
    geometry terms, which are reported unweighted.

    Raises:
        ShapeMismatch: if gt and recon differ in shape
    """
    gt = np.asarray(gt)
    if tuple(gt.shape) != tuple(recon.shape):
        raise ShapeMismatch(f"Ground truth {gt.shape} and reconstruction {recon.shape} differ")

    l1 = T.reduce_mean(T.absolute(T.sub(recon, gt)))
    l_embed = embedding_loss_tensor(latents, result, config.alpha)
    total = T.add(l1, l_embed)
    breakdown = {'l1': l1.item(), 'l_embed': l_embed.item(),
                 'l_pen': 0.0, 'l_c': 0.0, 'l_r': 0.0, 'l_geo': 0.0}

    if geo is not None and geo.enabled:
        window = gt.shape[1]
        frame_ids = np.repeat(np.asarray(geo.object_ids), window)
        terms = geo_terms_tensor(gt.reshape(-1, FRAME_WIDTH), T.reshape(recon, (-1, FRAME_WIDTH)),
                                 frame_ids, geo.object_models, geo.thresholds)
        l_geo = terms.weighted(geo.weights)
        total = T.add(total, l_geo)
        breakdown.update(l_pen=terms.l_pen.item(), l_c=terms.l_c.item(), l_r=terms.l_r.item(),
                         l_geo=l_geo.item())

    breakdown['total'] = total.item()
    return total, breakdown


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def _shards(indices: np.ndarray, workers: int) -> List[np.ndarray]:
    return [s for s in np.array_split(indices, min(workers, len(indices))) if len(s)]


def _shard_step(artifacts: TokenizerArtifacts, windows: np.ndarray, object_ids: np.ndarray,
                mask: np.ndarray, geo: GeoContext):
    with Tape() as tape:
        c_o = point_features_for(artifacts.network, object_ids, geo.object_models)
        recon, latents, result = forward_windows(artifacts, windows, c_o, mask)
        shard_geo = GeoContext(object_ids, geo.object_models, geo.weights, geo.thresholds)
        total, breakdown = loss_total(windows, recon, latents, result, artifacts.config, shard_geo)
        grads = tape.backward(total)
    return grads, breakdown, result


def train_tokenizer(dataset: Sequence[HOISequence], config: TokenizerConfig,
                    object_models: Dict[str, ObjectModel], geometry: Optional[GeometryConfig] = None,
                    seed: int = 0, workers: int = 1, loss_csv: Optional[Union[str, Path]] = None,
                    checkpoint_dir: Optional[Union[str, Path]] = None) -> TrainingResult:
    """
    Train the tokenizer.

    Each minibatch is split into contiguous shards evaluated on separate
    tapes; shard gradients are weighted by shard size and summed in shard
    order, so results do not depend on thread scheduling.

    Args:
        dataset: training sequences
        config: tokenizer hyperparameters
        object_models: object models by id for point clouds and geometry terms
        geometry: geometry weights and thresholds; geometry terms are skipped
            when None or when config.geo_losses is false
        seed: seed for initialisation, shuffling, masking and code resets
        workers: threads per minibatch
        loss_csv: optional path for the per-epoch loss curve
        checkpoint_dir: where periodic checkpoints go when checkpoint_every > 0

    Returns:
        TrainingResult with the trained artifacts and the loss curve

    Raises:
        EmptyDataset: if dataset is empty
    """
    windows, object_ids = dataset_windows(dataset, config.window)
    missing = sorted(set(object_ids.tolist()) - set(object_models))
    if missing:
        raise TokenizerError(f"No object model for {missing}")

    artifacts = build_artifacts(config, seed)
    seed_codebooks(artifacts, windows, np.random.default_rng([seed, 2]))
    params = artifacts.network.parameters()
    optimizer = Adam(params, lr=config.learning_rate, max_grad_norm=config.max_grad_norm)
    enabled = geometry is not None and config.geo_losses
    geo = GeoContext(object_ids, object_models,
                     geo_weights(geometry, enabled) if geometry else GeoWeights().scaled(0.0),
                     ContactThresholds(geometry.phi_approach, geometry.tau_contact) if geometry else ContactThresholds())

    n = len(windows)
    logger.info(f"Training tokenizer on {len(dataset)} sequences ({n} windows), "
                f"{config.epochs} epochs, {len(params)} parameter tensors, workers={workers}")

    curve: List[Dict[str, float]] = []
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for epoch in range(1, config.epochs + 1):
            order = np.random.default_rng([seed, epoch]).permutation(n)
            sums = {key: 0.0 for key in LOSS_COLUMNS if key != 'epoch'}
            for b, start in enumerate(range(0, n, config.batch_size)):
                batch = order[start:start + config.batch_size]
                batch_rng = np.random.default_rng([seed, epoch, b])
                mask = latent_mask(len(batch), config.mask_prob, batch_rng)
                shards = _shards(np.arange(len(batch)), workers)
                outputs = list(pool.map(
                    lambda rows: _shard_step(artifacts, windows[batch[rows]], object_ids[batch[rows]],
                                             mask[rows], geo),
                    shards,
                ))

                weighted = []
                for rows, (grads, breakdown, _) in zip(shards, outputs):
                    share = len(rows) / len(batch)
                    weighted.append({key: g * share for key, g in grads.items()})
                    for key in sums:
                        sums[key] += breakdown[key] * len(rows)
                optimizer.step(sum_gradients(weighted))

                results = [result for _, _, result in outputs]
                indices = np.concatenate([np.atleast_2d(r.indices) for r in results])
                stage_inputs = {k: np.concatenate([r.stage_inputs[k] for r in results]) for k in ('o', 'l', 'r')}
                artifacts.hand_codebook, artifacts.object_codebook = update_codebooks(
                    artifacts.hand_codebook, artifacts.object_codebook, indices, stage_inputs, config.ema_decay,
                    np.random.default_rng([seed, epoch, b, 1]),
                )

            row = {'epoch': epoch}
            row.update({key: value / n for key, value in sums.items()})
            if not np.isfinite(row['total']):
                raise TokenizerError(f"Loss became non-finite at epoch {epoch}")
            curve.append(row)
            if epoch % max(config.log_every, 1) == 0 or epoch == config.epochs:
                logger.info(f"epoch {epoch}/{config.epochs} total={row['total']:.5f} "
                            f"l1={row['l1']:.5f} embed={row['l_embed']:.5f} pen={row['l_pen']:.5f}")
            if checkpoint_dir and config.checkpoint_every and epoch % config.checkpoint_every == 0:
                save_tokenizer(Path(checkpoint_dir) / f"epoch_{epoch:05d}", artifacts)

    if loss_csv:
        write_loss_curve(loss_csv, curve)
    return TrainingResult(artifacts=artifacts, loss_curve=curve)


def write_loss_curve(path: Union[str, Path], curve: Sequence[Dict[str, float]]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', newline='', encoding='utf-8') as fh:
        writer = csv.writer(fh, lineterminator='\n')
        writer.writerow(LOSS_COLUMNS)
        for row in curve:
            writer.writerow([row['epoch']] + [repr(float(row[key])) for key in LOSS_COLUMNS[1:]])


# ---------------------------------------------------------------------------
# Sequence coding
# ---------------------------------------------------------------------------

def encode_sequence(sequence: HOISequence, artifacts: TokenizerArtifacts) -> List[TokenTriple]:
    """One triple per window; short or ragged sequences are padded with their last frame."""
    windows = split_windows(sequence.features, artifacts.window)
    z_o, z_l, z_r = artifacts.network.encode_window(windows)
    result = quantize(z_o.data, z_l.data, z_r.data, artifacts.hand_codebook, artifacts.object_codebook,
                      artifacts.config.quantizer_mode, artifacts.config.stage_order)
    return result.tokens


def check_triples(triples: Sequence[TokenTriple], artifacts: TokenizerArtifacts) -> None:
    if not triples:
        raise EmptyTokenStream("Cannot decode an empty token list")
    hand_size, obj_size = artifacts.hand_codebook.size, artifacts.object_codebook.size
    for i, t in enumerate(triples):
        if not (0 <= t.left < hand_size and 0 <= t.right < hand_size):
            raise TokenOutOfRange(f"Window {i}: hand index out of range [0, {hand_size}) in {t.as_tuple()}")
        if not 0 <= t.obj < obj_size:
            raise TokenOutOfRange(f"Window {i}: object index out of range [0, {obj_size}) in {t.as_tuple()}")


def decode_sequence(triples: Sequence[TokenTriple], object_model: ObjectModel,
                    artifacts: TokenizerArtifacts, num_frames: Optional[int] = None,
                    caption: str = '') -> HOISequence:
    """
    Decode triples to a sequence of W * len(triples) frames, truncated to
    num_frames when the source was padded.

    Raises:
        EmptyTokenStream: if triples is empty
        TokenOutOfRange: if an index exceeds its codebook
    """
    check_triples(triples, artifacts)
    q_o, q_l, q_r = lookup(triples, artifacts.hand_codebook, artifacts.object_codebook)
    network = artifacts.network
    dtype = network.hand_decoder.layers[0].weight.dtype
    c_o = network.point_features(object_model.point_cloud)
    c_o = T.reshape(c_o, (1, -1))
    recon = network.decode(q_o.astype(dtype), q_l.astype(dtype), q_r.astype(dtype), c_o)
    features = recon.data.reshape(-1, FRAME_WIDTH)
    if num_frames is not None:
        features = features[:num_frames]
    return HOISequence(features=features, object_id=object_model.name, caption=caption)


def reconstruct(sequence: HOISequence, object_model: ObjectModel, artifacts: TokenizerArtifacts) -> HOISequence:
    triples = encode_sequence(sequence, artifacts)
    return decode_sequence(triples, object_model, artifacts, num_frames=sequence.num_frames,
                           caption=sequence.caption)


def reconstruction_error(a: HOISequence, b: HOISequence) -> float:
    """Mean per-frame L1 error (averaged over channels)."""
    if a.features.shape != b.features.shape:
        raise ShapeMismatch(f"Sequences differ: {a.features.shape} vs {b.features.shape}")
    return float(np.mean(np.abs(a.features.astype(np.float64) - b.features.astype(np.float64))))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_tokenizer(directory: Union[str, Path], artifacts: TokenizerArtifacts) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    file_formats.write_params(directory / PARAMS_FILE, 'tokenizer', artifacts.network.state_dict())
    for book, name in ((artifacts.hand_codebook, HAND_CODEBOOK_FILE),
                       (artifacts.object_codebook, OBJECT_CODEBOOK_FILE)):
        file_formats.write_codebook(directory / name, book.kind.value, book.entries,
                                    book.ema_counts, book.ema_sums)
    (directory / CONFIG_FILE).write_text(json.dumps(asdict(artifacts.config), sort_keys=True, indent=2) + '\n',
                                         encoding='utf-8')
    logger.info(f"Saved tokenizer checkpoint to {directory}")
    return directory


def load_tokenizer(directory: Union[str, Path]) -> TokenizerArtifacts:
    directory = file_formats.require(directory)
    config_path = file_formats.require(directory / CONFIG_FILE)
    config = TokenizerConfig(**json.loads(config_path.read_text(encoding='utf-8')))
    artifacts = build_artifacts(config)
    _, state, _ = file_formats.read_params(directory / PARAMS_FILE)
    artifacts.network.load_state_dict(state)
    books = []
    for name in (HAND_CODEBOOK_FILE, OBJECT_CODEBOOK_FILE):
        kind, entries, counts, sums = file_formats.read_codebook(directory / name)
        books.append(Codebook(kind, entries, counts, sums))
    artifacts.hand_codebook, artifacts.object_codebook = books
    return artifacts

"""
Evaluation service: feature-space metrics, displacement errors, IV
reporting and the contrastive motion/text matcher that supplies features.
"""

import csv
import json
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from ..domain import HOISequence
from ..nn.matcher import MotionTextMatcher, contrastive_loss
from ..nn.optim import Adam
from ..nn.tensor import Tape
from ..utils import file_formats
from .codec_service import TaskKind, TooShort, Vocabulary, prediction_split
from .config_service import CodecConfig, EvalConfig
from .geometry_service import sequence_iv
from .kinematics_service import ObjectModel, both_hands
from .language_model_service import (
    LMArtifacts,
    MalformedGeneration,
    TaskRequest,
    run_task,
)
from .tokenizer_service import TokenizerArtifacts

logger = logging.getLogger(__name__)

RIDGE = 1e-6
CLAMP_TOLERANCE = 1e-8
Z_95 = 1.96
MIN_MATCHER_PAIRS = 64
MATCHER_PARAMS_FILE = 'matcher.params'
MATCHER_VOCAB_FILE = 'vocab.txt'
MATCHER_CONFIG_FILE = 'matcher_config.json'


class EvaluationError(Exception):
    """Custom exception for evaluation errors"""
    pass


class TooFewSamples(EvaluationError):
    pass


class DegenerateCovariance(EvaluationError):
    pass


class LengthMismatch(EvaluationError):
    pass


# ---------------------------------------------------------------------------
# Feature-space metrics
# ---------------------------------------------------------------------------

def _as_features(features) -> np.ndarray:
    array = np.asarray(features, dtype=np.float64)
    return array.reshape(-1, 1) if array.ndim == 1 else array


def _sqrtm_psd(matrix: np.ndarray) -> np.ndarray:
    values, vectors = np.linalg.eigh((matrix + matrix.T) / 2.0)
    return (vectors * np.sqrt(np.clip(values, 0.0, None))) @ vectors.T


def _well_conditioned(cov: np.ndarray) -> bool:
    values = np.linalg.eigvalsh(cov)
    return bool(values.min() > 1e-12 * max(1.0, values.max()))


def frechet_from_moments(mu_a: np.ndarray, cov_a: np.ndarray, mu_b: np.ndarray, cov_b: np.ndarray) -> float:
    """
    ||mu_a - mu_b||^2 + Tr(cov_a + cov_b - 2 (cov_a cov_b)^(1/2)).

    The cross term uses Tr sqrt(sqrt(cov_a) cov_b sqrt(cov_a)), which stays symmetric.

    Raises:
        DegenerateCovariance: if the result is not finite or is below -1e-8
    """
    root_a = _sqrtm_psd(cov_a)
    cross = _sqrtm_psd(root_a @ cov_b @ root_a)
    diff = np.asarray(mu_a) - np.asarray(mu_b)
    value = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(cross))
    if not np.isfinite(value) or value < -CLAMP_TOLERANCE:
        raise DegenerateCovariance(f"Frechet distance evaluated to {value}")
    return max(value, 0.0)


def frechet_distance(features_a, features_b) -> float:
    """
    Frechet distance between Gaussian fits of two feature sets.

    Covariances that are singular (or fit from n <= d samples) get a ridge
    of 1e-6 on the diagonal, which is logged.

    Raises:
        TooFewSamples: fewer than 2 rows on either side
        DegenerateCovariance: if the distance is still not usable after the ridge
    """
    a, b = _as_features(features_a), _as_features(features_b)
    if a.shape[1] != b.shape[1]:
        raise EvaluationError(f"Feature widths differ: {a.shape[1]} vs {b.shape[1]}")
    if len(a) < 2 or len(b) < 2:
        raise TooFewSamples(f"Frechet distance needs at least 2 rows per side, got {len(a)} and {len(b)}")
    d = a.shape[1]
    cov_a = np.atleast_2d(np.cov(a, rowvar=False))
    cov_b = np.atleast_2d(np.cov(b, rowvar=False))
    if len(a) <= d or len(b) <= d or not (_well_conditioned(cov_a) and _well_conditioned(cov_b)):
        logger.warning(f"Adding ridge {RIDGE} to covariances (n={len(a)}, m={len(b)}, d={d})")
        cov_a = cov_a + RIDGE * np.eye(d)
        cov_b = cov_b + RIDGE * np.eye(d)
    return frechet_from_moments(a.mean(axis=0), cov_a, b.mean(axis=0), cov_b)


def _pairwise_mean(features: np.ndarray) -> float:
    diffs = features[:, None, :] - features[None, :, :]
    distances = np.sqrt((diffs ** 2).sum(axis=-1))
    upper = np.triu_indices(len(features), k=1)
    return float(distances[upper].mean())


def diversity(features, pairs: Optional[int] = 100, seed: int = 0) -> float:
    """
    Mean Euclidean distance over `pairs` seeded random pairs of distinct
    rows; pairs=None averages over all pairs.

    Raises:
        TooFewSamples: fewer than 2 rows
    """
    features = _as_features(features)
    n = len(features)
    if n < 2:
        raise TooFewSamples(f"Diversity needs at least 2 features, got {n}")
    if pairs is None:
        return _pairwise_mean(features)
    rng = np.random.default_rng(seed)
    first = rng.integers(n, size=pairs)
    second = (first + rng.integers(1, n, size=pairs)) % n
    return float(np.linalg.norm(features[first] - features[second], axis=1).mean())


def mmodality(groups: Sequence) -> float:
    """
    Mean over prompts of the mean pairwise distance between that prompt's generations.

    Raises:
        TooFewSamples: no groups, or a group with fewer than 2 features
    """
    if not groups:
        raise TooFewSamples("MModality needs at least one prompt group")
    scores = []
    for i, group in enumerate(groups):
        group = _as_features(group)
        if len(group) < 2:
            raise TooFewSamples(f"Prompt group {i} has {len(group)} generations, needs 2")
        scores.append(_pairwise_mean(group))
    return float(np.mean(scores))


def r_precision(motion_features, text_features, batch: int = 32, seed: int = 0,
                batches: Optional[int] = None) -> Dict[int, float]:
    """
    Retrieval rates of the true caption among `batch` candidates.

    By default rows are split into floor(n / batch) batches from a seeded
    permutation; with `batches` given, that many batches are drawn
    independently. Ties with the true caption count in its favour.

    Returns:
        {1: top-1 rate, 2: top-2 rate, 3: top-3 rate}

    Raises:
        TooFewSamples: fewer pairs than the batch size
    """
    motion, text = _as_features(motion_features), _as_features(text_features)
    if len(motion) != len(text):
        raise EvaluationError(f"{len(motion)} motion features but {len(text)} text features")
    n = len(motion)
    if n < batch:
        raise TooFewSamples(f"R-Precision needs at least {batch} pairs, got {n}")
    rng = np.random.default_rng(seed)
    if batches is None:
        order = rng.permutation(n)
        groups = [order[i:i + batch] for i in range(0, n - batch + 1, batch)]
    else:
        groups = [rng.choice(n, size=batch, replace=False) for _ in range(batches)]

    hits = {1: 0, 2: 0, 3: 0}
    trials = 0
    for group in groups:
        m, t = motion[group], text[group]
        distances = np.linalg.norm(m[:, None, :] - t[None, :, :], axis=-1)
        true = np.diag(distances)
        ranks = 1 + (distances < true[:, None]).sum(axis=1)
        for k in hits:
            hits[k] += int((ranks <= k).sum())
        trials += len(group)
    return {k: hits[k] / trials for k in hits}


def mm_dist(motion_features, text_features) -> float:
    motion, text = _as_features(motion_features), _as_features(text_features)
    if len(motion) != len(text) or not len(motion):
        raise TooFewSamples(f"MMDist needs aligned non-empty pairs, got {len(motion)} and {len(text)}")
    return float(np.linalg.norm(motion - text, axis=1).mean())


def real_split_fid(features, seed: int = 0) -> float:
    """FID between two seeded halves of one feature set (a floor for the FID scale)."""
    features = _as_features(features)
    order = np.random.default_rng(seed).permutation(len(features))
    half = len(features) // 2
    return frechet_distance(features[order[:half]], features[order[half:]])


# ---------------------------------------------------------------------------
# Motion metrics
# ---------------------------------------------------------------------------

def _frames_of(sequence: Union[HOISequence, np.ndarray]) -> np.ndarray:
    return sequence.features if isinstance(sequence, HOISequence) else np.asarray(sequence)


def displacement_per_frame(predicted, ground_truth) -> np.ndarray:
    """Mean Euclidean error over both hands' joints, per frame."""
    pred, gt = _frames_of(predicted), _frames_of(ground_truth)
    if pred.shape != gt.shape:
        raise LengthMismatch(f"Sequences differ: {pred.shape} vs {gt.shape}")
    if not len(pred):
        raise TooFewSamples("Displacement needs at least one frame")
    pred_joints, _ = both_hands(pred)
    gt_joints, _ = both_hands(gt)
    return np.linalg.norm(pred_joints - gt_joints, axis=-1).mean(axis=1)


def ade_fde(predicted, ground_truth) -> Tuple[float, float]:
    errors = displacement_per_frame(predicted, ground_truth)
    return float(errors.mean()), float(errors[-1])


def freeze_last_frame_baseline(sequence: HOISequence, observed_frames: int) -> HOISequence:
    """Repeat the last observed frame over the rest of the sequence."""
    if not 0 < observed_frames <= sequence.num_frames:
        raise TooFewSamples(f"Observed frames {observed_frames} outside [1, {sequence.num_frames}]")
    features = sequence.features.copy()
    features[observed_frames:] = features[observed_frames - 1]
    return sequence.with_features(features)


def iv_summary(sequences: Sequence[HOISequence], object_models: Dict[str, ObjectModel]) -> Dict[str, float]:
    """Total penetrating-vertex count, its per-frame mean and the maximum depth."""
    count, depth, frames = 0, 0.0, 0
    for sequence in sequences:
        c, d = sequence_iv(sequence.features, object_models[sequence.object_id])
        count += c
        depth = max(depth, d)
        frames += sequence.num_frames
    return {'iv_count': float(count), 'iv_per_frame': count / max(frames, 1), 'iv_max_depth': depth}


def confidence_interval(values: Sequence[float]) -> Tuple[float, float]:
    """(mean, 95% half-width) from the sample standard deviation."""
    values = np.asarray(values, dtype=np.float64)
    if not len(values):
        raise TooFewSamples("Confidence interval needs at least one value")
    if len(values) == 1:
        return float(values[0]), 0.0
    return float(values.mean()), float(Z_95 * values.std(ddof=1) / np.sqrt(len(values)))


# ---------------------------------------------------------------------------
# Matcher
# ---------------------------------------------------------------------------

@dataclass
class MatcherArtifacts:
    matcher: MotionTextMatcher
    vocab: Vocabulary
    config: EvalConfig

    def motion_features(self, sequences: Sequence[Union[HOISequence, np.ndarray]], batch: int = 64) -> np.ndarray:
        frames = [_frames_of(s) for s in sequences]
        chunks = [self.matcher.embed_motion(frames[i:i + batch]).data for i in range(0, len(frames), batch)]
        return np.concatenate(chunks).astype(np.float64)

    def text_features(self, captions: Sequence[str], batch: int = 64) -> np.ndarray:
        tokens = [self.vocab.encode_text(c) or [self.vocab.pad] for c in captions]
        chunks = [self.matcher.embed_text(tokens[i:i + batch]).data for i in range(0, len(tokens), batch)]
        return np.concatenate(chunks).astype(np.float64)


@dataclass
class MatcherResult:
    artifacts: MatcherArtifacts
    loss_curve: List[Dict[str, float]]
    matched_distance: float
    unmatched_distance: float


def build_matcher(vocab: Vocabulary, config: EvalConfig, seed: int = 0) -> MatcherArtifacts:
    matcher = MotionTextMatcher(len(vocab), embed_dim=config.embed_dim, hidden=config.matcher_hidden, seed=seed)
    return MatcherArtifacts(matcher=matcher, vocab=vocab, config=config)


def matching_margin(artifacts: MatcherArtifacts, sequences: Sequence[HOISequence]) -> Tuple[float, float]:
    """(mean matched distance, mean unmatched distance) over the given pairs."""
    motion = artifacts.motion_features(sequences)
    text = artifacts.text_features([s.caption for s in sequences])
    distances = np.linalg.norm(motion[:, None, :] - text[None, :, :], axis=-1)
    matched = float(np.diag(distances).mean())
    off = ~np.eye(len(sequences), dtype=bool)
    return matched, float(distances[off].mean()) if off.any() else matched


def train_matcher(sequences: Sequence[HOISequence], vocab: Vocabulary, config: EvalConfig, seed: int = 0,
                  heldout: Optional[Sequence[HOISequence]] = None,
                  min_pairs: int = MIN_MATCHER_PAIRS) -> MatcherResult:
    """
    Train the motion/text matcher contrastively on (sequence, caption) pairs.

    Args:
        sequences: captioned training sequences
        vocab: caption vocabulary (word ids index the matcher's embedding)
        config: epochs, batch size, learning rate, temperature and widths
        seed: seed for initialisation and batch order
        heldout: pairs for the margin check; the training pairs otherwise
        min_pairs: minimum number of training pairs

    Raises:
        TooFewSamples: fewer than min_pairs pairs
    """
    if len(sequences) < max(min_pairs, 2):
        raise TooFewSamples(f"Matcher training needs at least {min_pairs} pairs, got {len(sequences)}")
    artifacts = build_matcher(vocab, config, seed)
    matcher = artifacts.matcher
    optimizer = Adam(matcher.parameters(), lr=config.matcher_learning_rate)
    frames = [s.features for s in sequences]
    tokens = [vocab.encode_text(s.caption) or [vocab.pad] for s in sequences]
    logger.info(f"Training matcher on {len(sequences)} pairs for {config.matcher_epochs} epochs")

    curve = []
    for epoch in range(1, config.matcher_epochs + 1):
        order = np.random.default_rng([seed, epoch]).permutation(len(sequences))
        losses = []
        for start in range(0, len(order), config.matcher_batch):
            batch = order[start:start + config.matcher_batch]
            if len(batch) < 2:
                continue
            with Tape() as tape:
                loss = contrastive_loss(matcher.embed_motion([frames[i] for i in batch]),
                                        matcher.embed_text([tokens[i] for i in batch]), config.temperature)
                grads = tape.backward(loss)
            optimizer.step(grads)
            losses.append(loss.item())
        curve.append({'epoch': epoch, 'loss': float(np.mean(losses))})
        if epoch % 10 == 0 or epoch == config.matcher_epochs:
            logger.info(f"matcher epoch {epoch}/{config.matcher_epochs} loss={curve[-1]['loss']:.5f}")

    matched, unmatched = matching_margin(artifacts, heldout or sequences)
    if matched < unmatched:
        logger.info(f"Matcher margin ok: matched {matched:.4f} < unmatched {unmatched:.4f}")
    else:
        logger.warning(f"Matcher margin failed: matched {matched:.4f} >= unmatched {unmatched:.4f}")
    return MatcherResult(artifacts, curve, matched, unmatched)


def save_matcher(directory: Union[str, Path], artifacts: MatcherArtifacts) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    extra = [('vocab_size', str(len(artifacts.vocab))), ('embed_dim', str(artifacts.config.embed_dim)),
             ('hidden', str(artifacts.config.matcher_hidden))]
    file_formats.write_params(directory / MATCHER_PARAMS_FILE, 'matcher', artifacts.matcher.state_dict(), extra)
    artifacts.vocab.save(directory / MATCHER_VOCAB_FILE)
    (directory / MATCHER_CONFIG_FILE).write_text(json.dumps(asdict(artifacts.config), sort_keys=True, indent=2) + '\n',
                                                 encoding='utf-8')
    return directory


def load_matcher(directory: Union[str, Path]) -> MatcherArtifacts:
    directory = file_formats.require(directory)
    config = EvalConfig(**json.loads(file_formats.require(directory / MATCHER_CONFIG_FILE).read_text(encoding='utf-8')))
    vocab = Vocabulary.load(file_formats.require(directory / MATCHER_VOCAB_FILE))
    _, state, _ = file_formats.read_params(file_formats.require(directory / MATCHER_PARAMS_FILE))
    artifacts = build_matcher(vocab, config)
    artifacts.matcher.load_state_dict(state)
    return artifacts


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    fid: float = 0.0
    fid_real_split: float = 0.0
    diversity: float = 0.0
    mmodality: float = 0.0
    r_precision_top1: float = 0.0
    r_precision_top2: float = 0.0
    r_precision_top3: float = 0.0
    mm_dist: float = 0.0
    ade: float = 0.0
    fde: float = 0.0
    ade_baseline: float = 0.0
    fde_baseline: float = 0.0
    iv_count: float = 0.0
    iv_per_frame: float = 0.0
    iv_max_depth: float = 0.0
    malformed: float = 0.0

    @classmethod
    def metric_names(cls) -> List[str]:
        return [f.name for f in fields(cls)]

    def as_row(self) -> Dict[str, float]:
        return {name: float(getattr(self, name)) for name in self.metric_names()}

    def check(self) -> 'EvalReport':
        bad = [name for name, value in self.as_row().items() if not np.isfinite(value)]
        if bad:
            raise EvaluationError(f"Non-finite metrics: {bad}")
        for k in (1, 2, 3):
            if not 0.0 <= getattr(self, f'r_precision_top{k}') <= 1.0:
                raise EvaluationError(f"r_precision_top{k} outside [0, 1]")
        return self


def summarize(reports: Sequence[EvalReport]) -> Dict[str, Tuple[float, float]]:
    """metric -> (mean, 95% half-width) across repeated evaluations."""
    return {name: confidence_interval([getattr(r, name) for r in reports]) for name in EvalReport.metric_names()}


def write_report_csv(path: Union[str, Path], reports: Sequence[EvalReport]) -> None:
    """One row per metric: value per repeat, then mean and half-width."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    summary = summarize(reports)
    with open(path, 'w', newline='', encoding='utf-8') as fh:
        writer = csv.writer(fh, lineterminator='\n')
        writer.writerow(['metric'] + [f'run_{i}' for i in range(len(reports))] + ['mean', 'ci95'])
        for name in EvalReport.metric_names():
            mean, half = summary[name]
            writer.writerow([name] + [repr(float(getattr(r, name))) for r in reports] + [repr(mean), repr(half)])


def format_table(reports: Sequence[EvalReport]) -> str:
    summary = summarize(reports)
    width = max(len(name) for name in summary)
    lines = [f"{'metric':<{width}}  {'mean':>12}  {'ci95':>10}", '-' * (width + 26)]
    for name, (mean, half) in summary.items():
        lines.append(f"{name:<{width}}  {mean:>12.5f}  {half:>10.5f}")
    return '\n'.join(lines)


def evaluate(heldout: Sequence[HOISequence], lm: LMArtifacts, tokenizer: TokenizerArtifacts,
             matcher: MatcherArtifacts, object_models: Dict[str, ObjectModel],
             templates: Dict[str, List[str]], config: EvalConfig, codec: Optional[CodecConfig] = None,
             seed: int = 0) -> EvalReport:
    """
    Full metric suite on held-out sequences.

    Text-to-HOI generations feed FID, Diversity, R-Precision, MMDist and IV;
    sampled generations for the first prompts feed MModality; the prediction
    task feeds ADE/FDE next to the freeze-last-frame baseline. Malformed
    generations are counted and excluded.
    """
    codec = codec or CodecConfig()
    if len(heldout) < 2:
        raise TooFewSamples(f"Evaluation needs at least 2 held-out sequences, got {len(heldout)}")

    generated: List[HOISequence] = []
    captions: List[str] = []
    malformed = 0
    for i, sequence in enumerate(heldout):
        try:
            output = run_task(TaskKind.TEXT_TO_HOI, TaskRequest(caption=sequence.caption, object_id=sequence.object_id),
                              lm, tokenizer, object_models, templates, codec, seed=seed + i, mode='greedy')
        except MalformedGeneration as e:
            logger.warning(f"Skipping held-out sequence {i}: {e}")
            malformed += 1
            continue
        malformed += int(output.malformed)
        generated.append(output.sequence)
        captions.append(sequence.caption)
    if len(generated) < 2:
        raise TooFewSamples(f"Only {len(generated)} usable generations out of {len(heldout)}")

    real = matcher.motion_features(heldout)
    fake = matcher.motion_features(generated)
    text = matcher.text_features(captions)
    batch = config.r_precision_batch
    if len(generated) < batch:
        logger.warning(f"R-Precision batch reduced from {batch} to {len(generated)}")
        batch = len(generated)
    rates = r_precision(fake, text, batch=batch, seed=seed)

    groups = []
    for i, sequence in enumerate(heldout[:config.mmodality_samples]):
        group = []
        for s in range(config.mmodality_samples):
            try:
                output = run_task(TaskKind.TEXT_TO_HOI,
                                  TaskRequest(caption=sequence.caption, object_id=sequence.object_id),
                                  lm, tokenizer, object_models, templates, codec, seed=seed + 1000 * (s + 1) + i,
                                  mode='top_k')
                group.append(output.sequence)
            except MalformedGeneration:
                malformed += 1
        if len(group) >= 2:
            groups.append(matcher.motion_features(group))

    ade, fde, base_ade, base_fde = [], [], [], []
    for i, sequence in enumerate(heldout):
        n = -(-sequence.num_frames // tokenizer.window)
        try:
            observed = prediction_split(n, codec.prediction_fraction) * tokenizer.window
        except TooShort:
            continue
        output = run_task(TaskKind.PREDICTION, TaskRequest(sequence=sequence), lm, tokenizer, object_models,
                          templates, codec, seed=seed + i, mode='greedy')
        a, f = ade_fde(output.sequence.features[observed:], sequence.features[observed:])
        baseline = freeze_last_frame_baseline(sequence, observed)
        ba, bf = ade_fde(baseline.features[observed:], sequence.features[observed:])
        ade.append(a)
        fde.append(f)
        base_ade.append(ba)
        base_fde.append(bf)

    report = EvalReport(
        fid=frechet_distance(real, fake),
        fid_real_split=real_split_fid(real, seed) if len(real) >= 4 else 0.0,
        diversity=diversity(fake, config.diversity_pairs, seed),
        mmodality=mmodality(groups) if groups else 0.0,
        r_precision_top1=rates[1],
        r_precision_top2=rates[2],
        r_precision_top3=rates[3],
        mm_dist=mm_dist(fake, text),
        ade=float(np.mean(ade)) if ade else 0.0,
        fde=float(np.mean(fde)) if fde else 0.0,
        ade_baseline=float(np.mean(base_ade)) if base_ade else 0.0,
        fde_baseline=float(np.mean(base_fde)) if base_fde else 0.0,
        malformed=float(malformed),
        **iv_summary(generated, object_models),
    )
    logger.info(f"Evaluated {len(generated)} generations: fid={report.fid:.4f} "
                f"top3={report.r_precision_top3:.3f} ade={report.ade:.4f} (baseline {report.ade_baseline:.4f})")
    return report.check()

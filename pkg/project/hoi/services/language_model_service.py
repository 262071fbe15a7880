"""
Language model service: the encoder-decoder over the unified vocabulary,
its two training stages and task generation.

Stage 1 mixes span-corruption examples with plain caption/motion
translation pairs; stage 2 tunes on instruction prompts for the five tasks.
"""

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from ..domain import OBJECT_WIDTH, HOISequence, TokenTriple
from ..nn import tensor as T
from ..nn.optim import Adam, sum_gradients
from ..nn.tensor import Tape, Tensor
from ..nn.transformer import Seq2SeqTransformer, TransformerShape
from ..utils import file_formats
from .codec_service import (
    MalformedStream,
    TaskExample,
    TaskInputs,
    TaskKind,
    Vocabulary,
    build_task,
    motion_ids,
    tokens_to_motion,
    validate_stream,
)
from .config_service import CodecConfig, LMConfig
from .kinematics_service import OBJECT_CAPTION_NAMES, ObjectModel
from .tokenizer_service import TokenizerArtifacts, decode_sequence, encode_sequence

logger = logging.getLogger(__name__)

PARAMS_FILE = 'lm.params'
VOCAB_FILE = 'vocab.txt'
CONFIG_FILE = 'lm_config.json'
MOTION_TASKS = (TaskKind.TEXT_TO_HOI, TaskKind.PREDICTION, TaskKind.INTERPOLATION, TaskKind.OBJECT_CONDITIONED)
ARCHITECTURE_FIELDS = ('width', 'layers', 'heads', 'ffn_width', 'context')


class LanguageModelError(Exception):
    """Custom exception for language model errors"""
    pass


class ContextOverflow(LanguageModelError):
    pass


class MalformedGeneration(LanguageModelError):
    pass


@dataclass
class LMArtifacts:
    model: Seq2SeqTransformer
    vocab: Vocabulary
    config: LMConfig


@dataclass
class LMTrainingResult:
    artifacts: LMArtifacts
    loss_curve: List[Dict[str, float]]


@dataclass
class PretrainCorpus:
    """Streams for span corruption and (source, target) translation pairs."""
    streams: List[List[int]] = field(default_factory=list)
    pairs: List[Tuple[List[int], List[int]]] = field(default_factory=list)


@dataclass
class Generation:
    ids: List[int]
    malformed: bool = False
    reason: str = ''


def build_lm(vocab: Vocabulary, config: LMConfig, seed: int = 0, dtype=np.float32) -> LMArtifacts:
    shape = TransformerShape(vocab_size=len(vocab), width=config.width, layers=config.layers,
                             heads=config.heads, ffn_width=config.ffn_width, context=config.context)
    return LMArtifacts(model=Seq2SeqTransformer(shape, seed=seed, dtype=dtype), vocab=vocab, config=config)


def with_training_config(artifacts: LMArtifacts, config: LMConfig) -> LMArtifacts:
    """Take training settings from config; the architecture stays the checkpoint's."""
    kept = {name: getattr(artifacts.config, name) for name in ARCHITECTURE_FIELDS}
    artifacts.config = replace(config, **kept)
    return artifacts


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

def check_context(model: Seq2SeqTransformer, source: Sequence[int], target_length: int = 0) -> None:
    context = model.shape.context
    if len(source) > context:
        raise ContextOverflow(f"Source of {len(source)} tokens exceeds context {context}")
    if target_length > context:
        raise ContextOverflow(f"Target of {target_length} tokens exceeds context {context}")


def decoder_inputs(target: Sequence[int], pad: int) -> List[int]:
    """Decoder inputs: <PAD> as start token, then the target shifted right."""
    return [pad] + [int(t) for t in target[:-1]]


def lm_loss(model: Seq2SeqTransformer, source: Sequence[int], target: Sequence[int], pad: int = 0) -> Tensor:
    """
    Mean negative log-likelihood per non-<PAD> target token.

    Raises:
        ContextOverflow: if source or target exceed the model context
        LanguageModelError: if the target has no scored tokens
    """
    check_context(model, source, len(target))
    target = np.asarray(target, dtype=np.int64)
    keep = target != pad
    if not keep.any():
        raise LanguageModelError("Target has no non-<PAD> tokens")
    logits = model(source, decoder_inputs(target, pad))
    log_probs = T.log_softmax(logits, axis=-1)
    picks = np.zeros(logits.shape, dtype=logits.dtype)
    picks[np.arange(len(target)), target] = keep
    return T.neg(T.div(T.reduce_sum(T.mul(log_probs, picks)), float(keep.sum())))


# ---------------------------------------------------------------------------
# Span corruption
# ---------------------------------------------------------------------------

def _span_lengths(count: int, spans: int, rng: np.random.Generator) -> List[int]:
    if spans <= 1:
        return [count]
    cuts = np.sort(rng.choice(np.arange(1, count), size=spans - 1, replace=False))
    return np.diff(np.concatenate([[0], cuts, [count]])).astype(int).tolist()


def _place(length: int, eligible: np.ndarray, taken: np.ndarray, rng: np.random.Generator) -> Optional[int]:
    n = len(eligible)
    starts = []
    for s in range(n - length + 1):
        if not eligible[s:s + length].all() or taken[s:s + length].any():
            continue
        if (s > 0 and taken[s - 1]) or (s + length < n and taken[s + length]):
            continue
        starts.append(s)
    return int(rng.choice(starts)) if starts else None


def span_corrupt(ids: Sequence[int], vocab: Vocabulary, noise: float = 0.15, mean_span: float = 3.0,
                 rng: Optional[np.random.Generator] = None) -> Tuple[List[int], List[int]]:
    """
    Replace round(noise * n) tokens by sentinel-marked spans.

    Spans never cover <HOI>, <EOS> or <PAD> and are never adjacent, so each
    sentinel stands for exactly one span. The source ends with <EOS>; the
    target lists each sentinel followed by its span and ends with <EOS>.

    Returns:
        (source ids, target ids)
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    ids = [int(t) for t in ids]
    eligible = np.array([t not in (vocab.hoi, vocab.eos, vocab.pad) for t in ids], dtype=bool)
    count = min(int(round(len(ids) * noise)), int(eligible.sum()))
    if count == 0:
        return ids + [vocab.eos], [vocab.eos]
    spans = min(max(1, int(round(count / mean_span))), count, vocab.sentinel_count)

    taken = np.zeros(len(ids), dtype=bool)
    pending = sorted(_span_lengths(count, spans, rng), reverse=True)
    placed: List[Tuple[int, int]] = []
    dropped = 0
    while pending:
        length = pending.pop(0)
        start = _place(length, eligible, taken, rng)
        if start is None:
            if length == 1:
                dropped += 1
                continue
            half = length // 2
            pending = sorted(pending + [half, length - half], reverse=True)
            continue
        taken[start:start + length] = True
        placed.append((start, length))
    if dropped:
        logger.debug(f"Masked {count - dropped} of {count} tokens in a {len(ids)}-token stream; "
                     f"no room for {dropped} more span(s)")

    placed.sort()
    source, target = [], []
    cursor = 0
    for i, (start, length) in enumerate(placed[:vocab.sentinel_count]):
        source.extend(ids[cursor:start])
        source.append(vocab.sentinel(i))
        target.append(vocab.sentinel(i))
        target.extend(ids[start:start + length])
        cursor = start + length
    source.extend(ids[cursor:])
    return source + [vocab.eos], target + [vocab.eos]


def build_pretrain_corpus(captions: Sequence[str], motions: Sequence[Sequence[TokenTriple]],
                          vocab: Vocabulary, unpaired_motions: Sequence[Sequence[TokenTriple]] = ()) -> PretrainCorpus:
    """
    Paired captions and motions give one mixed stream each plus translation
    pairs in both directions; unpaired motions add motion-only streams.
    """
    corpus = PretrainCorpus()
    eos = [vocab.eos]
    for caption, triples in zip(captions, motions):
        text, motion = vocab.encode_text(caption), motion_ids(triples, vocab)
        corpus.streams.append(text + motion)
        corpus.pairs.append((text + eos, motion + eos))
        corpus.pairs.append((motion + eos, text + eos))
    for triples in unpaired_motions:
        corpus.streams.append(motion_ids(triples, vocab))
    return corpus


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def _shards(items: Sequence, workers: int) -> List[List]:
    chunks = np.array_split(np.arange(len(items)), min(workers, len(items)))
    return [[items[i] for i in chunk] for chunk in chunks if len(chunk)]


def _pairs_step(model: Seq2SeqTransformer, pairs: Sequence[Tuple[Sequence[int], Sequence[int]]],
                pad: int, batch_size: int):
    with Tape() as tape:
        losses = [lm_loss(model, source, target, pad) for source, target in pairs]
        total = losses[0]
        for loss in losses[1:]:
            total = T.add(total, loss)
        grads = tape.backward(T.div(total, float(batch_size)))
    return grads, [loss.item() for loss in losses]


def _train_batch(model: Seq2SeqTransformer, optimizer: Adam, pool: ThreadPoolExecutor,
                 batch: Sequence[Tuple[Sequence[int], Sequence[int]]], pad: int, workers: int) -> List[float]:
    """One optimizer step; shard gradients are summed in shard order."""
    shards = _shards(batch, workers)
    outputs = list(pool.map(lambda pairs: _pairs_step(model, pairs, pad, len(batch)), shards))
    optimizer.step(sum_gradients([grads for grads, _ in outputs]))
    losses = [loss for _, shard_losses in outputs for loss in shard_losses]
    if not np.all(np.isfinite(losses)):
        raise LanguageModelError("Loss became non-finite")
    return losses


def pretrain(artifacts: LMArtifacts, corpus: PretrainCorpus, codec: Optional[CodecConfig] = None,
             seed: int = 0, workers: int = 1, loss_csv: Optional[Union[str, Path]] = None) -> LMTrainingResult:
    """
    Motion-language pretraining.

    Each batch element is a span-corruption example with probability
    config.pretrain_mix and a translation pair otherwise; when one pool is
    empty the other is used.

    Raises:
        LanguageModelError: if the corpus is empty or the loss diverges
    """
    config, vocab, model = artifacts.config, artifacts.vocab, artifacts.model
    codec = codec or CodecConfig()
    if not corpus.streams and not corpus.pairs:
        raise LanguageModelError("Pretraining corpus is empty")
    optimizer = Adam(model.parameters(), lr=config.learning_rate, max_grad_norm=config.max_grad_norm)
    logger.info(f"Pretraining for {config.pretrain_steps} steps on {len(corpus.streams)} streams "
                f"and {len(corpus.pairs)} pairs, mix={config.pretrain_mix}")

    curve: List[Dict[str, float]] = []
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for step in range(1, config.pretrain_steps + 1):
            rng = np.random.default_rng([seed, step])
            batch = []
            for _ in range(config.batch_size):
                use_spans = corpus.streams and (not corpus.pairs or rng.random() < config.pretrain_mix)
                if use_spans:
                    stream = corpus.streams[int(rng.integers(len(corpus.streams)))]
                    batch.append(span_corrupt(stream, vocab, codec.span_noise, codec.mean_span_length, rng))
                else:
                    batch.append(corpus.pairs[int(rng.integers(len(corpus.pairs)))])
            losses = _train_batch(model, optimizer, pool, batch, vocab.pad, workers)
            curve.append({'step': step, 'loss': float(np.mean(losses))})
            if step % max(config.log_every, 1) == 0 or step == config.pretrain_steps:
                logger.info(f"pretrain step {step}/{config.pretrain_steps} loss={curve[-1]['loss']:.5f}")

    if loss_csv:
        write_curve(loss_csv, curve, ('step', 'loss'))
    return LMTrainingResult(artifacts=artifacts, loss_curve=curve)


def instruction_tune(artifacts: LMArtifacts, examples: Sequence[TaskExample], seed: int = 0,
                     workers: int = 1, loss_csv: Optional[Union[str, Path]] = None) -> LMTrainingResult:
    """
    Instruction tuning over task examples for config.tune_epochs epochs.

    Every epoch visits each example exactly once in a seeded order, so
    per-epoch task proportions equal the dataset's.

    Returns:
        LMTrainingResult whose curve holds the mean loss and the mean loss per task for each epoch
    """
    config, model = artifacts.config, artifacts.model
    examples = [e for e in examples if e.target]
    if not examples:
        raise LanguageModelError("No instruction examples with targets")
    optimizer = Adam(model.parameters(), lr=config.learning_rate, max_grad_norm=config.max_grad_norm)
    kinds = [e.kind.value for e in examples]
    logger.info(f"Instruction tuning for {config.tune_epochs} epochs on {len(examples)} examples "
                f"({', '.join(f'{k}={kinds.count(k)}' for k in sorted(set(kinds)))})")

    curve: List[Dict[str, float]] = []
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for epoch in range(1, config.tune_epochs + 1):
            order = np.random.default_rng([seed, epoch]).permutation(len(examples))
            per_task: Dict[str, List[float]] = {}
            for start in range(0, len(order), config.batch_size):
                chosen = [examples[i] for i in order[start:start + config.batch_size]]
                losses = _train_batch(model, optimizer, pool, [(e.source, e.target) for e in chosen],
                                      artifacts.vocab.pad, workers)
                for example, loss in zip(chosen, losses):
                    per_task.setdefault(example.kind.value, []).append(loss)
            row = {'epoch': epoch, 'loss': float(np.mean([l for ls in per_task.values() for l in ls]))}
            row.update({kind: float(np.mean(ls)) for kind, ls in per_task.items()})
            curve.append(row)
            if epoch % max(config.log_every, 1) == 0 or epoch == config.tune_epochs:
                detail = ' '.join(f"{k}={row[k]:.4f}" for k in sorted(per_task))
                logger.info(f"tune epoch {epoch}/{config.tune_epochs} loss={row['loss']:.5f} {detail}")

    if loss_csv:
        write_curve(loss_csv, curve, ('epoch', 'loss') + tuple(k.value for k in TaskKind))
    return LMTrainingResult(artifacts=artifacts, loss_curve=curve)


def write_curve(path: Union[str, Path], curve: Sequence[Dict[str, float]], columns: Sequence[str]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', newline='', encoding='utf-8') as fh:
        writer = csv.writer(fh, lineterminator='\n')
        writer.writerow(columns)
        for row in curve:
            writer.writerow([row[columns[0]]] + [repr(float(row[c])) if c in row else '' for c in columns[1:]])


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------

def check_generation(ids: Sequence[int], vocab: Vocabulary, expect_motion: bool) -> Tuple[bool, str]:
    """(malformed, reason) for a generated target."""
    if not ids or ids[-1] != vocab.eos:
        return True, "no <EOS> before the context limit"
    try:
        stream = validate_stream(ids, vocab)
    except MalformedStream as e:
        return True, str(e)
    motion = stream.motion_segments()
    if expect_motion and (len(motion) != 1 or len(stream.segments) != 2):
        return True, "expected exactly one motion segment followed by <EOS>"
    if not expect_motion and motion:
        return True, "motion tokens in a text output"
    return False, ''


def generate(model: Seq2SeqTransformer, source: Sequence[int], vocab: Vocabulary, mode: str = 'greedy',
             top_k: int = 5, seed: int = 0, expect_motion: Optional[bool] = None,
             max_length: Optional[int] = None) -> Generation:
    """
    Autoregressive decoding until <EOS> or the context limit.

    Greedy takes the first maximal logit; top-k samples from the k best
    logits (stable order, so k=1 equals greedy). When expect_motion is set
    the output is checked against the stream grammar and flagged, never
    repaired.

    Raises:
        ContextOverflow: if the source does not fit
        LanguageModelError: on an unknown mode
    """
    if mode not in ('greedy', 'top_k'):
        raise LanguageModelError(f"Unknown sampling mode '{mode}'")
    check_context(model, source)
    rng = np.random.default_rng(seed)
    memory = model.encode(source)
    limit = min(max_length or model.shape.context, model.shape.context)
    decoded = [vocab.pad]
    output: List[int] = []
    while len(output) < limit:
        logits = model.decode(decoded, memory).data[-1].astype(np.float64)
        if mode == 'greedy':
            token = int(np.argmax(logits))
        else:
            best = np.argsort(-logits, kind='stable')[:top_k]
            weights = np.exp(logits[best] - logits[best].max())
            token = int(best[rng.choice(len(best), p=weights / weights.sum())])
        output.append(token)
        decoded.append(token)
        if token == vocab.eos:
            break

    generation = Generation(ids=output)
    if expect_motion is not None:
        generation.malformed, generation.reason = check_generation(output, vocab, expect_motion)
        if generation.malformed:
            logger.warning(f"Malformed generation: {generation.reason}")
    return generation


# ---------------------------------------------------------------------------
# Tasks
# ---------------------------------------------------------------------------

@dataclass
class TaskRequest:
    caption: str = ''
    sequence: Optional[HOISequence] = None
    object_id: Optional[str] = None


@dataclass
class TaskOutput:
    kind: TaskKind
    triples: List[TokenTriple] = field(default_factory=list)
    sequence: Optional[HOISequence] = None
    caption: Optional[str] = None
    generation: Optional[Generation] = None

    @property
    def malformed(self) -> bool:
        return bool(self.generation and self.generation.malformed)


def salvage_triples(ids: Sequence[int], vocab: Vocabulary) -> List[TokenTriple]:
    """
    Windows of the first motion segment, read up to the first grammar
    violation. Well-formed streams yield exactly tokens_to_motion.
    """
    try:
        return tokens_to_motion(list(ids), vocab)
    except MalformedStream:
        pass
    ids = list(ids)
    if vocab.hoi not in ids:
        return []
    triples = []
    k = ids.index(vocab.hoi) + 1
    while k + 2 < len(ids):
        l, r, o = ids[k:k + 3]
        if not (vocab.is_hand(l) and vocab.is_hand(r) and vocab.is_object(o)):
            break
        triples.append(TokenTriple(vocab.hand_index(l), vocab.hand_index(r), vocab.object_index(o)))
        k += 3
    return triples


def _fit(generated: Sequence[TokenTriple], count: int, fallback: TokenTriple,
         generation: Generation) -> List[TokenTriple]:
    out = list(generated[:count])
    if len(generated) != count:
        generation.malformed = True
        generation.reason = generation.reason or f"generated {len(generated)} windows, expected {count}"
    while len(out) < count:
        out.append(out[-1] if out else fallback)
    return out


def object_for_caption(caption: str, object_models: Dict[str, ObjectModel],
                       default: Optional[str] = None) -> ObjectModel:
    """Object whose caption name appears in the caption, longest name first."""
    text = f" {caption.lower()} "
    for object_id, name in sorted(OBJECT_CAPTION_NAMES.items(), key=lambda item: -len(item[1])):
        if f" {name} " in text and object_id in object_models:
            return object_models[object_id]
    if default in object_models:
        return object_models[default]
    raise LanguageModelError(f"Caption '{caption}' names no known object")


def _assemble(reference: HOISequence, decoded: HOISequence, provided_windows: Sequence[int],
              window: int, keep_object: bool = False) -> HOISequence:
    """Decoded frames with provided windows (and optionally object channels) copied from the reference."""
    features = decoded.features[:reference.num_frames].copy()
    for w in provided_windows:
        features[w * window:(w + 1) * window] = reference.features[w * window:(w + 1) * window]
    if keep_object:
        features[:, :OBJECT_WIDTH] = reference.features[:, :OBJECT_WIDTH]
    return reference.with_features(features)


def run_task(kind: Union[TaskKind, str], request: TaskRequest, lm: LMArtifacts, tokenizer: TokenizerArtifacts,
             object_models: Dict[str, ObjectModel], templates: Dict[str, List[str]],
             codec: Optional[CodecConfig] = None, seed: int = 0, mode: Optional[str] = None) -> TaskOutput:
    """
    Run one task end to end: tokenize inputs, generate, decode.

    Conditioning is preserved verbatim: prediction keeps its observed prefix,
    interpolation its unmasked windows, object-conditioned generation every
    OBJ token (and the input object channels). Generations that break the
    stream grammar are flagged on the output's generation record.

    Raises:
        MalformedGeneration: text-to-HOI output with no readable window
        TooShort: prediction or interpolation with fewer than 2 windows
    """
    kind = TaskKind(kind)
    codec = codec or CodecConfig()
    vocab, config = lm.vocab, lm.config
    mode = mode or config.sampling

    def _generate(source: List[int]) -> Generation:
        return generate(lm.model, source, vocab, mode, config.top_k, seed,
                        expect_motion=kind in MOTION_TASKS)

    if kind == TaskKind.TEXT_TO_HOI:
        model = object_for_caption(request.caption, object_models, request.object_id)
        example = build_task(kind, TaskInputs(caption=request.caption), vocab, templates, seed)
        generation = _generate(example.source)
        triples = salvage_triples(generation.ids, vocab)
        if not triples:
            raise MalformedGeneration(f"No motion windows in generated stream: {generation.reason}")
        sequence = decode_sequence(triples, model, tokenizer, caption=request.caption)
        return TaskOutput(kind, triples, sequence=sequence, generation=generation)

    if request.sequence is None:
        raise LanguageModelError(f"Task {kind.value} needs an input sequence")
    reference = request.sequence
    model = object_models[reference.object_id]
    triples = encode_sequence(reference, tokenizer)
    inputs = TaskInputs(caption=request.caption or reference.caption, triples=triples)
    example = build_task(kind, inputs, vocab, templates, seed, codec.prediction_fraction, codec.interpolation_ratio)

    if kind == TaskKind.HOI_TO_TEXT:
        generation = _generate(example.source)
        text_ids = [t for t in generation.ids if t != vocab.eos]
        return TaskOutput(kind, triples, caption=vocab.decode_text(text_ids), generation=generation)

    if kind == TaskKind.INTERPOLATION and not example.masked_windows:
        return TaskOutput(kind, triples, sequence=reference.with_features(reference.features.copy()),
                          generation=Generation(ids=[]))

    generation = _generate(example.source)
    generated = salvage_triples(generation.ids, vocab)
    n = len(triples)
    if kind == TaskKind.PREDICTION:
        k = example.observed_windows
        out = triples[:k] + _fit(generated, n - k, triples[k - 1], generation)
        provided, keep_object = list(range(k)), False
    elif kind == TaskKind.INTERPOLATION:
        filled = _fit(generated, n, triples[0], generation)
        masked = set(example.masked_windows)
        out = [filled[w] if w in masked else triples[w] for w in range(n)]
        provided, keep_object = [w for w in range(n) if w not in masked], False
    else:
        filled = _fit(generated, n, triples[0], generation)
        out = [TokenTriple(f.left, f.right, t.obj) for f, t in zip(filled, triples)]
        provided, keep_object = [], True

    decoded = decode_sequence(out, model, tokenizer, caption=reference.caption)
    sequence = _assemble(reference, decoded, provided, tokenizer.window, keep_object)
    return TaskOutput(kind, out, sequence=sequence, generation=generation)


def task_examples(pairs: Sequence[TaskInputs], vocab: Vocabulary, templates: Dict[str, List[str]],
                  codec: Optional[CodecConfig] = None, seed: int = 0,
                  kinds: Sequence[TaskKind] = tuple(TaskKind)) -> List[TaskExample]:
    """One example per (caption + motion pair, task); motions too short for a task are skipped for it."""
    codec = codec or CodecConfig()
    examples = []
    for i, inputs in enumerate(pairs):
        for j, kind in enumerate(kinds):
            if kind in (TaskKind.PREDICTION, TaskKind.INTERPOLATION) and len(inputs.triples) < 2:
                continue
            examples.append(build_task(kind, inputs, vocab, templates, seed=[seed, i, j],
                                       prediction_fraction=codec.prediction_fraction,
                                       interpolation_ratio=codec.interpolation_ratio))
    return examples


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_lm(directory: Union[str, Path], artifacts: LMArtifacts) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    shape = artifacts.model.shape
    extra = [('vocab_size', str(shape.vocab_size)), ('width', str(shape.width)), ('layers', str(shape.layers)),
             ('heads', str(shape.heads)), ('ffn_width', str(shape.ffn_width)), ('context', str(shape.context))]
    file_formats.write_params(directory / PARAMS_FILE, 'seq2seq', artifacts.model.state_dict(), extra)
    artifacts.vocab.save(directory / VOCAB_FILE)
    (directory / CONFIG_FILE).write_text(json.dumps(asdict(artifacts.config), sort_keys=True, indent=2) + '\n',
                                         encoding='utf-8')
    logger.info(f"Saved language model checkpoint to {directory}")
    return directory


def load_lm(directory: Union[str, Path]) -> LMArtifacts:
    """
    Raises:
        MissingArtifact: if the directory or one of its files is missing
        LanguageModelError: if the vocabulary does not match the embedding table
    """
    directory = file_formats.require(directory)
    config = LMConfig(**json.loads(file_formats.require(directory / CONFIG_FILE).read_text(encoding='utf-8')))
    vocab = Vocabulary.load(file_formats.require(directory / VOCAB_FILE))
    _, state, extra = file_formats.read_params(file_formats.require(directory / PARAMS_FILE))
    if int(extra.get('vocab_size', len(vocab))) != len(vocab):
        raise LanguageModelError(f"{directory}: checkpoint has {extra['vocab_size']} rows, vocabulary {len(vocab)}")
    artifacts = build_lm(vocab, config)
    artifacts.model.load_state_dict(state)
    return artifacts

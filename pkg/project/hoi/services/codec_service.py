"""
Codec service: the unified text + motion vocabulary, token-stream grammar,
task prompt construction and hand-token masking.

Motion segments are sandwiched between <HOI> sentinels and hold one
(HAND, HAND, OBJ) group per window, left hand first:

    <HOI> HAND_3 HAND_7 OBJ_12 <HOI>
"""

import json
import logging
import math
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from django.conf import settings

from ..domain import TokenTriple
from ..utils import file_formats

logger = logging.getLogger(__name__)

PAD, EOS, HOI, MASK = '<PAD>', '<EOS>', '<HOI>', '<MASK>'
SPECIAL_TOKENS = (PAD, EOS, HOI, MASK)
DEFAULT_SENTINELS = 100

_HAND_PATTERN = re.compile(r'^HAND_(\d+)$')
_OBJ_PATTERN = re.compile(r'^OBJ_(\d+)$')
_SENTINEL_PATTERN = re.compile(r'^<X(\d+)>$')


class CodecError(Exception):
    """Custom exception for vocabulary and token-stream errors"""
    pass


class MalformedStream(CodecError):
    pass


class UnknownToken(CodecError):
    pass


class TooShort(CodecError):
    pass


class TokenClass(str, Enum):
    SPECIAL = 'special'
    SENTINEL = 'sentinel'
    HAND = 'hand'
    OBJECT = 'object'
    WORD = 'word'
    BYTE = 'byte'


class Vocabulary:
    """
    Dense token ids in a fixed class order: special tokens, span sentinels,
    HAND_*, OBJ_*, sorted words, then 256 byte-fallback tokens.
    """

    def __init__(self, words: Sequence[str], hand_size: int, object_size: int,
                 sentinels: int = DEFAULT_SENTINELS):
        if hand_size < 1 or object_size < 1:
            raise CodecError("Codebook sizes must be positive")
        self.hand_size = hand_size
        self.object_size = object_size
        self.sentinel_count = sentinels
        self.words = sorted(set(words))
        names = list(SPECIAL_TOKENS)
        names += [f"<X{i}>" for i in range(sentinels)]
        self.hand_offset = len(names)
        names += [f"HAND_{i}" for i in range(hand_size)]
        self.object_offset = len(names)
        names += [f"OBJ_{i}" for i in range(object_size)]
        self.word_offset = len(names)
        names += self.words
        self.byte_offset = len(names)
        names += [f"<0x{b:02X}>" for b in range(256)]
        self.names = names
        self.ids = {name: i for i, name in enumerate(names)}
        if len(self.ids) != len(names):
            raise CodecError("Vocabulary names collide across token classes")

    def __len__(self) -> int:
        return len(self.names)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.names == other.names

    @property
    def pad(self) -> int:
        return self.ids[PAD]

    @property
    def eos(self) -> int:
        return self.ids[EOS]

    @property
    def hoi(self) -> int:
        return self.ids[HOI]

    @property
    def mask(self) -> int:
        return self.ids[MASK]

    def sentinel(self, i: int) -> int:
        if not 0 <= i < self.sentinel_count:
            raise CodecError(f"Sentinel {i} outside [0, {self.sentinel_count})")
        return len(SPECIAL_TOKENS) + i

    def hand(self, index: int) -> int:
        if not 0 <= index < self.hand_size:
            raise MalformedStream(f"Hand index {index} outside [0, {self.hand_size})")
        return self.hand_offset + index

    def obj(self, index: int) -> int:
        if not 0 <= index < self.object_size:
            raise MalformedStream(f"Object index {index} outside [0, {self.object_size})")
        return self.object_offset + index

    def token_class(self, token: int) -> TokenClass:
        if not 0 <= token < len(self.names):
            raise UnknownToken(f"Token id {token} outside vocabulary of {len(self.names)}")
        if token < len(SPECIAL_TOKENS):
            return TokenClass.SPECIAL
        if token < self.hand_offset:
            return TokenClass.SENTINEL
        if token < self.object_offset:
            return TokenClass.HAND
        if token < self.word_offset:
            return TokenClass.OBJECT
        if token < self.byte_offset:
            return TokenClass.WORD
        return TokenClass.BYTE

    def is_hand(self, token: int) -> bool:
        return self.hand_offset <= token < self.object_offset

    def is_object(self, token: int) -> bool:
        return self.object_offset <= token < self.word_offset

    def is_motion(self, token: int) -> bool:
        return self.hand_offset <= token < self.word_offset

    def hand_index(self, token: int) -> int:
        return token - self.hand_offset

    def object_index(self, token: int) -> int:
        return token - self.object_offset

    def id_of(self, name: str) -> int:
        if name not in self.ids:
            raise UnknownToken(f"Unknown token '{name}'")
        return self.ids[name]

    def name_of(self, token: int) -> str:
        self.token_class(token)
        return self.names[token]

    # Text

    def encode_text(self, text: str) -> List[int]:
        """Word-level ids; words outside the vocabulary fall back to UTF-8 byte tokens."""
        ids: List[int] = []
        previous_unknown = False
        for word in text.lower().split():
            if word in self.ids and self.token_class(self.ids[word]) == TokenClass.WORD:
                ids.append(self.ids[word])
                previous_unknown = False
                continue
            if previous_unknown:
                ids.append(self.byte_offset + 0x20)
            ids.extend(self.byte_offset + b for b in word.encode('utf-8'))
            previous_unknown = True
        return ids

    def decode_text(self, ids: Sequence[int]) -> str:
        words: List[str] = []
        pending = bytearray()
        for token in ids:
            kind = self.token_class(token)
            if kind == TokenClass.BYTE:
                pending.append(token - self.byte_offset)
                continue
            if pending:
                words.extend(pending.decode('utf-8', errors='replace').split())
                pending = bytearray()
            if kind == TokenClass.WORD:
                words.append(self.names[token])
        if pending:
            words.extend(pending.decode('utf-8', errors='replace').split())
        return ' '.join(words)

    # Persistence

    def save(self, path: Union[str, Path]) -> None:
        file_formats.write_lines(path, (f"{name} {i}" for i, name in enumerate(self.names)))

    @classmethod
    def load(cls, path: Union[str, Path]) -> 'Vocabulary':
        """
        Rebuild from a vocabulary file and check that every id matches.

        Raises:
            CodecError: if ids are not dense or disagree with the class layout
        """
        entries = []
        for line in file_formats.read_lines(path):
            name, _, token = line.rpartition(' ')
            entries.append((name, int(token)))
        if [t for _, t in entries] != list(range(len(entries))):
            raise CodecError(f"{path}: token ids are not dense and ordered")
        names = [n for n, _ in entries]
        hands = sum(1 for n in names if _HAND_PATTERN.match(n))
        objects = sum(1 for n in names if _OBJ_PATTERN.match(n))
        sentinels = sum(1 for n in names if _SENTINEL_PATTERN.match(n))
        word_start = len(SPECIAL_TOKENS) + sentinels + hands + objects
        words = names[word_start:len(names) - 256]
        vocab = cls(words, hands, objects, sentinels)
        if vocab.names != names:
            raise CodecError(f"{path}: token layout does not match a rebuilt vocabulary")
        return vocab


def build_vocabulary(captions: Sequence[str], hand_size: int, object_size: int,
                     templates: Optional[Dict[str, List[str]]] = None,
                     sentinels: int = DEFAULT_SENTINELS) -> Vocabulary:
    """Words are every lowercased whitespace token of the captions and instruction templates."""
    words = set()
    for text in list(captions) + [t for group in (templates or {}).values() for t in group]:
        words.update(text.lower().split())
    return Vocabulary(sorted(words), hand_size, object_size, sentinels)


# ---------------------------------------------------------------------------
# Streams
# ---------------------------------------------------------------------------

@dataclass
class Segment:
    start: int
    end: int
    kind: str

    @property
    def length(self) -> int:
        return self.end - self.start


@dataclass
class TokenStream:
    """Token ids plus the segment map; motion segments span their <HOI> sentinels inclusively."""
    ids: List[int]
    segments: List[Segment] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self) -> Iterator[int]:
        return iter(self.ids)

    def motion_segments(self) -> List[Segment]:
        return [s for s in self.segments if s.kind == 'motion']


def validate_stream(ids: Sequence[int], vocab: Vocabulary, allow_mask: bool = False) -> TokenStream:
    """
    Check the stream grammar and build its segment map.

    Motion segments must be closed, non-empty, a whole number of windows and
    follow (HAND, HAND, OBJ) per window. Motion tokens may not appear outside
    a segment, and <EOS> may only end the stream. With allow_mask, <MASK>
    may stand in any motion slot.

    Raises:
        MalformedStream: on any violation
    """
    ids = [int(t) for t in ids]
    segments: List[Segment] = []
    i, text_start = 0, 0
    while i < len(ids):
        token = ids[i]
        vocab.token_class(token)
        if token == vocab.eos and i != len(ids) - 1:
            raise MalformedStream(f"<EOS> at position {i} is not the last token")
        if token == vocab.mask and not allow_mask:
            raise MalformedStream(f"<MASK> at position {i}")
        if vocab.is_motion(token):
            raise MalformedStream(f"Motion token {vocab.names[token]} at position {i} outside an <HOI> segment")
        if token != vocab.hoi:
            i += 1
            continue
        if text_start < i:
            segments.append(Segment(text_start, i, 'text'))
        close = next((j for j in range(i + 1, len(ids)) if ids[j] == vocab.hoi), None)
        if close is None:
            raise MalformedStream(f"<HOI> at position {i} is never closed")
        interior = ids[i + 1:close]
        if not interior or len(interior) % 3:
            raise MalformedStream(f"Motion segment at {i} has {len(interior)} tokens, not a positive multiple of 3")
        for k, slot_token in enumerate(interior):
            position = i + 1 + k
            if slot_token == vocab.mask and allow_mask:
                continue
            expect_hand = k % 3 < 2
            if expect_hand and not vocab.is_hand(slot_token):
                raise MalformedStream(f"Position {position} expects a HAND token, found {vocab.name_of(slot_token)}")
            if not expect_hand and not vocab.is_object(slot_token):
                raise MalformedStream(f"Position {position} expects an OBJ token, found {vocab.name_of(slot_token)}")
        segments.append(Segment(i, close + 1, 'motion'))
        i = close + 1
        text_start = i
    if text_start < len(ids):
        segments.append(Segment(text_start, len(ids), 'text'))
    return TokenStream(ids=ids, segments=segments)


def motion_ids(triples: Sequence[TokenTriple], vocab: Vocabulary, masked_windows: Sequence[int] = ()) -> List[int]:
    masked = set(masked_windows)
    ids = [vocab.hoi]
    for w, t in enumerate(triples):
        if w in masked:
            ids.extend([vocab.mask] * 3)
        else:
            ids.extend([vocab.hand(t.left), vocab.hand(t.right), vocab.obj(t.obj)])
    ids.append(vocab.hoi)
    return ids


def motion_to_tokens(triples: Sequence[TokenTriple], vocab: Vocabulary) -> TokenStream:
    """
    Raises:
        MalformedStream: if triples is empty or an index is outside its codebook
    """
    if not triples:
        raise MalformedStream("Cannot build a motion segment from zero windows")
    return validate_stream(motion_ids(triples, vocab), vocab)


def tokens_to_motion(stream: Union[TokenStream, Sequence[int]], vocab: Vocabulary) -> List[TokenTriple]:
    """Triples of every motion segment in order; a trailing <EOS> is ignored."""
    ids = list(stream.ids if isinstance(stream, TokenStream) else stream)
    checked = validate_stream(ids, vocab)
    motion = checked.motion_segments()
    if not motion:
        raise MalformedStream("Stream has no motion segment")
    triples = []
    for segment in motion:
        interior = ids[segment.start + 1:segment.end - 1]
        for k in range(0, len(interior), 3):
            triples.append(TokenTriple(vocab.hand_index(interior[k]), vocab.hand_index(interior[k + 1]),
                                       vocab.object_index(interior[k + 2])))
    return triples


@dataclass
class MaskRecord:
    positions: List[int]
    original: List[int]


def mask_hand_tokens(stream: Union[TokenStream, Sequence[int]], vocab: Vocabulary) -> Tuple[TokenStream, MaskRecord]:
    """Replace every HAND token with <MASK>; the record allows exact restoration."""
    ids = list(stream.ids if isinstance(stream, TokenStream) else stream)
    validate_stream(ids, vocab)
    positions = [i for i, token in enumerate(ids) if vocab.is_hand(token)]
    record = MaskRecord(positions=positions, original=[ids[i] for i in positions])
    for i in positions:
        ids[i] = vocab.mask
    return validate_stream(ids, vocab, allow_mask=True), record


def fill_masked(stream: Union[TokenStream, Sequence[int]], positions: Sequence[int], tokens: Sequence[int],
                vocab: Vocabulary) -> TokenStream:
    """Write tokens into masked positions and re-validate the result."""
    ids = list(stream.ids if isinstance(stream, TokenStream) else stream)
    if len(positions) != len(tokens):
        raise MalformedStream(f"{len(positions)} masked positions but {len(tokens)} fill tokens")
    for position, token in zip(positions, tokens):
        if ids[position] != vocab.mask:
            raise MalformedStream(f"Position {position} is not masked")
        ids[position] = int(token)
    return validate_stream(ids, vocab)


def stream_to_text(ids: Sequence[int], vocab: Vocabulary) -> str:
    return ' '.join(vocab.name_of(int(t)) for t in ids)


def text_to_stream(line: str, vocab: Vocabulary) -> List[int]:
    return [vocab.id_of(name) for name in line.split()]


# ---------------------------------------------------------------------------
# Tasks
# ---------------------------------------------------------------------------

class TaskKind(str, Enum):
    TEXT_TO_HOI = 'text_to_hoi'
    HOI_TO_TEXT = 'hoi_to_text'
    PREDICTION = 'prediction'
    INTERPOLATION = 'interpolation'
    OBJECT_CONDITIONED = 'object_conditioned'


@dataclass
class TaskInputs:
    caption: str = ''
    triples: List[TokenTriple] = field(default_factory=list)


@dataclass
class TaskExample:
    kind: TaskKind
    source: List[int]
    target: List[int]
    observed_windows: int = 0
    masked_windows: List[int] = field(default_factory=list)

    def __iter__(self):
        return iter((self.source, self.target))


def load_templates(path: Optional[Union[str, Path]] = None) -> Dict[str, List[str]]:
    path = Path(path or getattr(settings, 'HOI_INSTRUCTION_TEMPLATES'))
    data = json.loads(file_formats.require(path).read_text(encoding='utf-8'))
    missing = [k.value for k in TaskKind if not data.get(k.value)]
    if missing:
        raise CodecError(f"Instruction templates missing for {missing}")
    return data


def prediction_split(n: int, fraction: float = 0.2) -> int:
    """Observed window count: ceil(fraction * n)."""
    if n < 2:
        raise TooShort(f"Prediction needs at least 2 windows, got {n}")
    return min(n - 1, int(math.ceil(fraction * n - 1e-9)))


def interpolation_mask(n: int, ratio: float, rng: np.random.Generator) -> List[int]:
    """floor(ratio * n) window indices, sorted."""
    if n < 2:
        raise TooShort(f"Interpolation needs at least 2 windows, got {n}")
    count = int(math.floor(ratio * n + 1e-9))
    return sorted(int(i) for i in rng.choice(n, size=count, replace=False))


def build_task(kind: Union[TaskKind, str], inputs: TaskInputs, vocab: Vocabulary,
               templates: Dict[str, List[str]], seed: Union[int, Sequence[int]] = 0, prediction_fraction: float = 0.2,
               interpolation_ratio: float = 0.5) -> TaskExample:
    """
    Source and target ids for one instruction-tuning example. Both end with <EOS>.

    Raises:
        TooShort: prediction or interpolation with fewer than 2 windows
        MalformedStream: missing motion for a motion task
    """
    kind = TaskKind(kind)
    rng = np.random.default_rng(seed)
    options = templates[kind.value]
    prompt = vocab.encode_text(options[int(rng.integers(len(options)))])
    triples = list(inputs.triples)
    if not triples and kind != TaskKind.TEXT_TO_HOI:
        raise MalformedStream(f"Task {kind.value} needs motion tokens")
    caption = vocab.encode_text(inputs.caption)
    eos = [vocab.eos]

    if kind == TaskKind.TEXT_TO_HOI:
        target = motion_ids(triples, vocab) + eos if triples else []
        return TaskExample(kind, prompt + caption + eos, target)
    if kind == TaskKind.HOI_TO_TEXT:
        return TaskExample(kind, prompt + motion_ids(triples, vocab) + eos, caption + eos)
    if kind == TaskKind.PREDICTION:
        k = prediction_split(len(triples), prediction_fraction)
        return TaskExample(kind, prompt + motion_ids(triples[:k], vocab) + eos,
                           motion_ids(triples[k:], vocab) + eos, observed_windows=k)
    if kind == TaskKind.INTERPOLATION:
        masked = interpolation_mask(len(triples), interpolation_ratio, rng)
        return TaskExample(kind, prompt + motion_ids(triples, vocab, masked) + eos,
                           motion_ids(triples, vocab) + eos, masked_windows=masked)
    masked_stream, _ = mask_hand_tokens(motion_ids(triples, vocab), vocab)
    return TaskExample(kind, prompt + caption + masked_stream.ids + eos, motion_ids(triples, vocab) + eos)

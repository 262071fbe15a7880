"""
On-disk formats.

Every binary format is a short text header (one `key value` pair per line,
closed by an `end` line) followed by little-endian float32 payload:

    hoiseq v1   sequence: frames, width, fps, object, caption, seed
    params v1   named tensors of one network
    cbk v1      codebook entries plus EMA statistics

Token streams and vocabularies are plain text.
"""

import logging
from collections import OrderedDict
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple, Union

import numpy as np

from ..domain import FRAME_WIDTH, HOISequence

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
FLOAT = np.dtype('<f4')

HOISEQ_TAG = 'hoiseq v1'
PARAMS_TAG = 'params v1'
CODEBOOK_TAG = 'cbk v1'


class FileFormatError(Exception):
    """Custom exception for malformed artifact files"""

    def __init__(self, message: str, path: PathLike = ''):
        super().__init__(message)
        self.key = str(path)


class MissingArtifact(FileFormatError):
    """A referenced checkpoint, dataset or stream file does not exist"""
    pass


def require(path: PathLike) -> Path:
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(f"Missing artifact: {path}", path)
    return path


def _write(path: PathLike, tag: str, header: Sequence[Tuple[str, str]], payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [tag] + [f"{key} {value}" for key, value in header] + ['end']
    for line in lines:
        if '\n' in line:
            raise FileFormatError(f"Header line may not contain a newline: {line!r}", path)
    with open(path, 'wb') as fh:
        fh.write(('\n'.join(lines) + '\n').encode('utf-8'))
        fh.write(payload)


def _read(path: PathLike, tag: str) -> Tuple[List[Tuple[str, str]], bytes]:
    path = require(path)
    raw = path.read_bytes()
    header: List[Tuple[str, str]] = []
    offset = 0
    first = True
    while True:
        newline = raw.find(b'\n', offset)
        if newline < 0:
            raise FileFormatError(f"{path}: header is not terminated", path)
        line = raw[offset:newline].decode('utf-8')
        offset = newline + 1
        if first:
            if line != tag:
                raise FileFormatError(f"{path}: expected '{tag}', found '{line}'", path)
            first = False
            continue
        if line == 'end':
            break
        key, _, value = line.partition(' ')
        header.append((key, value))
    return header, raw[offset:]


def _floats(payload: bytes, count: int, path: PathLike) -> np.ndarray:
    if len(payload) != count * FLOAT.itemsize:
        raise FileFormatError(
            f"{path}: expected {count} float32 values, found {len(payload) // FLOAT.itemsize}", path
        )
    return np.frombuffer(payload, dtype=FLOAT).astype(np.float32)


# Sequences

def write_hoiseq(path: PathLike, sequence: HOISequence) -> None:
    features = np.ascontiguousarray(sequence.features, dtype=FLOAT)
    header = [
        ('frames', str(features.shape[0])),
        ('width', str(features.shape[1])),
        ('fps', str(sequence.fps)),
        ('object', sequence.object_id),
        ('caption', sequence.caption),
        ('seed', str(sequence.seed)),
    ]
    _write(path, HOISEQ_TAG, header, features.tobytes())


def read_hoiseq(path: PathLike) -> HOISequence:
    header, payload = _read(path, HOISEQ_TAG)
    fields = dict(header)
    try:
        frames, width = int(fields['frames']), int(fields['width'])
    except (KeyError, ValueError) as e:
        raise FileFormatError(f"{path}: bad hoiseq header ({e})", path)
    if width != FRAME_WIDTH:
        raise FileFormatError(f"{path}: feature width {width} != {FRAME_WIDTH}", path)
    features = _floats(payload, frames * width, path).reshape(frames, width)
    return HOISequence(features=features, object_id=fields.get('object', ''),
                       caption=fields.get('caption', ''), fps=int(fields.get('fps', 30)),
                       seed=int(fields.get('seed', 0)))


def write_dataset(directory: PathLike, sequences: Sequence[HOISequence]) -> List[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, seq in enumerate(sequences):
        path = directory / f"{i:05d}.hoiseq"
        write_hoiseq(path, seq)
        paths.append(path)
    return paths


def read_dataset(directory: PathLike) -> List[HOISequence]:
    directory = require(directory)
    if directory.is_file():
        return [read_hoiseq(directory)]
    return [read_hoiseq(p) for p in sorted(directory.glob('*.hoiseq'))]


# Parameters

def write_params(path: PathLike, module_name: str, state: 'OrderedDict[str, np.ndarray]',
                 extra: Sequence[Tuple[str, str]] = ()) -> None:
    """Named tensors in state order; `extra` header pairs are kept verbatim (architecture echo)."""
    header = [('module', module_name), ('count', str(len(state)))] + list(extra)
    chunks = []
    for name, value in state.items():
        value = np.ascontiguousarray(value, dtype=FLOAT)
        shape = ','.join(str(s) for s in value.shape) or 'scalar'
        header.append(('tensor', f"{name} {shape}"))
        chunks.append(value.tobytes())
    _write(path, PARAMS_TAG, header, b''.join(chunks))


def read_params(path: PathLike) -> Tuple[str, 'OrderedDict[str, np.ndarray]', Dict[str, str]]:
    """
    Returns:
        (module name, ordered name -> float32 array, other header fields)
    """
    header, payload = _read(path, PARAMS_TAG)
    module_name = ''
    specs = []
    extra: Dict[str, str] = {}
    for key, value in header:
        if key == 'module':
            module_name = value
        elif key == 'tensor':
            name, _, shape = value.rpartition(' ')
            dims = () if shape == 'scalar' else tuple(int(s) for s in shape.split(','))
            specs.append((name, dims))
        elif key != 'count':
            extra[key] = value

    total = sum(int(np.prod(dims)) for _, dims in specs)
    flat = _floats(payload, total, path)
    state: 'OrderedDict[str, np.ndarray]' = OrderedDict()
    offset = 0
    for name, dims in specs:
        size = int(np.prod(dims))
        state[name] = flat[offset:offset + size].reshape(dims).copy()
        offset += size
    return module_name, state, extra


# Codebooks

def write_codebook(path: PathLike, kind: str, entries: np.ndarray, ema_counts: np.ndarray,
                   ema_sums: np.ndarray) -> None:
    size, dim = entries.shape
    header = [('kind', kind), ('size', str(size)), ('dim', str(dim))]
    payload = b''.join(np.ascontiguousarray(a, dtype=FLOAT).tobytes()
                       for a in (entries, ema_counts, ema_sums))
    _write(path, CODEBOOK_TAG, header, payload)


def read_codebook(path: PathLike) -> Tuple[str, np.ndarray, np.ndarray, np.ndarray]:
    header, payload = _read(path, CODEBOOK_TAG)
    fields = dict(header)
    size, dim = int(fields['size']), int(fields['dim'])
    flat = _floats(payload, size * dim * 2 + size, path)
    entries = flat[:size * dim].reshape(size, dim).copy()
    counts = flat[size * dim:size * dim + size].copy()
    sums = flat[size * dim + size:].reshape(size, dim).copy()
    return fields['kind'], entries, counts, sums


# Text formats

def write_lines(path: PathLike, lines: Iterable[str]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(''.join(f"{line}\n" for line in lines), encoding='utf-8')


def read_lines(path: PathLike) -> List[str]:
    return [line for line in require(path).read_text(encoding='utf-8').splitlines() if line.strip()]

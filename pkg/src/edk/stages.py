"""Stage vocabularies, label sequences, run-length segments and boundary targets."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from edk.errors import FormatError

MFHE15 = (
    "tPB2", "tPNa", "tPNf", "t2", "t3", "t4", "t5", "t6",
    "t7", "t8", "t9+", "tM", "tSB", "tB", "tEB",
)
SFHE12 = (
    "tPNa", "tPNf", "t2", "t3", "t4", "t5", "t6", "t7", "t8", "tSC", "tM", "tSB",
)


@dataclass(frozen=True)
class StageVocabulary:
    """Ordered stage names. Position in ``names`` is the developmental rank."""

    names: tuple[str, ...]
    order: tuple[int, ...] = field(default=())

    def __post_init__(self):
        names = tuple(self.names)
        object.__setattr__(self, "names", names)
        if len(names) < 2:
            raise ValueError("a vocabulary needs at least 2 stages")
        if any(not isinstance(n, str) or not n for n in names):
            raise ValueError("stage names must be non-empty strings")
        if len(set(names)) != len(names):
            raise ValueError("stage names must be unique")
        order = tuple(self.order) if self.order else tuple(range(len(names)))
        if sorted(order) != list(range(len(names))):
            raise ValueError("order must be a permutation of 0..c-1")
        object.__setattr__(self, "order", order)

    @property
    def c(self) -> int:
        return len(self.names)

    def __len__(self) -> int:
        return len(self.names)

    def rank(self, stage_id: int) -> int:
        return self.order[stage_id]

    def index(self, name: str) -> int:
        return self.names.index(name)

    @classmethod
    def preset(cls, name: str) -> "StageVocabulary":
        presets = {"mfhe15": MFHE15, "sfhe12": SFHE12}
        if name not in presets:
            raise ValueError(f"unknown vocabulary preset {name!r}; expected one of {sorted(presets)}")
        return cls(presets[name])

    @classmethod
    def generic(cls, c: int) -> "StageVocabulary":
        return cls(tuple(f"s{i}" for i in range(c)))


def _as_vocab(vocab: StageVocabulary | int) -> StageVocabulary:
    return vocab if isinstance(vocab, StageVocabulary) else StageVocabulary.generic(int(vocab))


class StageSequence:
    """Immutable per-frame stage ids over a vocabulary."""

    __slots__ = ("labels", "vocab")

    def __init__(self, labels: Iterable[int], vocab: StageVocabulary | int):
        vocab = _as_vocab(vocab)
        arr = np.asarray(list(labels) if not isinstance(labels, np.ndarray) else labels)
        if arr.ndim != 1 or arr.size < 1:
            raise ValueError("a stage sequence needs at least one frame")
        if not np.issubdtype(arr.dtype, np.integer):
            if not np.all(np.equal(np.mod(arr, 1), 0)):
                raise ValueError("stage ids must be integers")
        arr = arr.astype(np.int64)
        if arr.min() < 0 or arr.max() >= vocab.c:
            raise ValueError(f"stage ids must lie in [0, {vocab.c})")
        arr.setflags(write=False)
        object.__setattr__(self, "labels", arr)
        object.__setattr__(self, "vocab", vocab)

    def __setattr__(self, name, value):
        raise AttributeError("StageSequence is immutable")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def T(self) -> int:
        return len(self)

    def __eq__(self, other) -> bool:
        if not isinstance(other, StageSequence):
            return NotImplemented
        return self.vocab == other.vocab and np.array_equal(self.labels, other.labels)

    def __hash__(self):
        return hash((self.vocab, self.labels.tobytes()))

    def __repr__(self) -> str:
        return f"StageSequence(T={self.T}, c={self.vocab.c}, segments={len(segments_of(self))})"

    def tolist(self) -> list[int]:
        return self.labels.tolist()


@dataclass(frozen=True)
class Segment:
    stage: int
    start: int
    end: int  # exclusive

    @property
    def length(self) -> int:
        return self.end - self.start


class SegmentList(tuple):
    """Ordered run-length segments tiling ``[0, T)``."""

    def __new__(cls, segments: Iterable[Segment | tuple[int, int, int]]):
        segs = tuple(s if isinstance(s, Segment) else Segment(*map(int, s)) for s in segments)
        if not segs:
            raise ValueError("empty segment list")
        if segs[0].start != 0:
            raise ValueError("segments must start at frame 0")
        for a, b in zip(segs, segs[1:]):
            if a.end != b.start:
                raise ValueError("segments must tile without gaps or overlaps")
            if a.stage == b.stage:
                raise ValueError("adjacent segments must carry different stages")
        if any(s.end <= s.start for s in segs):
            raise ValueError("segments must be non-empty")
        return super().__new__(cls, segs)

    @property
    def T(self) -> int:
        return self[-1].end

    @property
    def stages(self) -> list[int]:
        return [s.stage for s in self]

    def expand(self, vocab: StageVocabulary | int) -> StageSequence:
        labels = np.empty(self.T, dtype=np.int64)
        for s in self:
            labels[s.start:s.end] = s.stage
        return StageSequence(labels, vocab)


def one_hot(seq: StageSequence) -> np.ndarray:
    out = np.zeros((seq.T, seq.vocab.c), dtype=np.float64)
    out[np.arange(seq.T), seq.labels] = 1.0
    return out


def segments_of(seq: StageSequence | Sequence[int] | np.ndarray) -> SegmentList:
    labels = np.asarray(seq.labels if isinstance(seq, StageSequence) else seq)
    if labels.size == 0:
        raise ValueError("cannot segment an empty sequence")
    change = np.flatnonzero(labels[1:] != labels[:-1]) + 1
    starts = np.concatenate(([0], change))
    ends = np.concatenate((change, [labels.size]))
    return SegmentList(
        Segment(int(labels[s]), int(s), int(e)) for s, e in zip(starts, ends)
    )


def gaussian_kernel(sigma: float) -> np.ndarray:
    half = math.ceil(3 * sigma)
    x = np.arange(-half, half + 1, dtype=np.float64)
    with np.errstate(over="ignore"):  # tiny sigma: off-centre weights underflow to 0
        k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def boundary_targets(seq: StageSequence | Sequence[int], sigma: float = 1.0) -> np.ndarray:
    """Per-frame boundary target in [0, 1].

    Frame ``i`` is a boundary when it opens a segment other than the first.
    With ``sigma > 0`` the impulse train is smoothed by a normalized Gaussian
    (zero padding at the sequence ends) and clamped to [0, 1].
    """
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    labels = np.asarray(seq.labels if isinstance(seq, StageSequence) else seq)
    raw = np.zeros(labels.size, dtype=np.float64)
    raw[1:][labels[1:] != labels[:-1]] = 1.0
    if sigma == 0 or not raw.any():
        return raw
    kernel = gaussian_kernel(sigma)
    half = kernel.size // 2
    # "same" mode returns the longer input's length, so slice the full result
    smooth = np.convolve(raw, kernel, mode="full")[half:half + raw.size]
    return np.clip(smooth, 0.0, 1.0)


def is_monotone(seq: StageSequence) -> bool:
    ranks = np.asarray(seq.vocab.order)[seq.labels]
    return bool(np.all(np.diff(ranks) >= 0))


def load_labels(path: str | Path) -> StageSequence:
    """Read a ``{"vocab": [...], "labels": [...]}`` JSON label file."""
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"unreadable label file {path}: {e}") from e
    if not isinstance(obj, dict) or "vocab" not in obj or "labels" not in obj:
        raise FormatError("label file needs 'vocab' and 'labels' keys")
    try:
        vocab = StageVocabulary(tuple(obj["vocab"]))
        return StageSequence(obj["labels"], vocab)
    except (TypeError, ValueError) as e:
        raise FormatError(str(e)) from e


def save_labels(seq: StageSequence, path: str | Path) -> None:
    payload = {"vocab": list(seq.vocab.names), "labels": seq.tolist()}
    Path(path).write_text(json.dumps(payload), encoding="utf-8")

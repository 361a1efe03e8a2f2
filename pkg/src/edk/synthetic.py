"""Synthetic multi-focal stacks with monotone stage sequences and occlusions.

Every frame of every focal plane is a noisy copy of a unit-norm stage
prototype. An occluded (plane, frame) shows the prototype of a
developmentally nearby stage instead. Occlusions are drawn independently per
plane, which is what makes averaging over planes informative. This is a test
substrate, not a model of real microscopy.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from edk.errors import FormatError
from edk.fileio import pack_header, read_header
from edk.stages import StageSequence, StageVocabulary

SKIP_PROB = 0.05
DATASET_MAGIC = b"EDK1"


@dataclass
class SyntheticConfig:
    c: int = 8
    T_range: tuple[int, int] = (150, 250)
    N: int = 3
    D_raw: int = 32
    duration_logmean: float = 3.2
    duration_logstd: float = 0.3
    noise_sigma: float = 0.05
    occlusion_rate: float = 0.0
    confuse_span: int = 1
    seed: int = 0
    vocab: str | None = None  # preset name; generic s0..s{c-1} when None

    def __post_init__(self):
        self.T_range = tuple(int(v) for v in self.T_range)
        self.validate()

    def validate(self) -> None:
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if self.c < 2:
            raise ValueError("c must be >= 2")
        if not 0.0 <= self.occlusion_rate <= 1.0:
            raise ValueError("occlusion_rate must lie in [0, 1]")
        if self.D_raw < self.c:
            raise ValueError("D_raw must be >= c")
        lo, hi = self.T_range
        if not 1 <= lo <= hi:
            raise ValueError("T_range must satisfy 1 <= min <= max")
        if lo < self.c:
            raise ValueError("T_range min must be >= c so every stage fits")
        if self.noise_sigma < 0 or self.duration_logstd < 0 or self.confuse_span < 0:
            raise ValueError("noise_sigma, duration_logstd and confuse_span must be >= 0")
        if self.vocab is not None and len(StageVocabulary.preset(self.vocab)) != self.c:
            raise ValueError(f"preset {self.vocab!r} does not have c={self.c} stages")

    def stage_vocab(self) -> StageVocabulary:
        if self.vocab is None:
            return StageVocabulary.generic(self.c)
        return StageVocabulary.preset(self.vocab)


@dataclass(eq=False)
class RawFocalStack:
    data: np.ndarray  # (N, T, D_raw) float32
    labels: StageSequence
    plane_ids: tuple[int, ...]
    central: int

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError("data must be N x T x D_raw")
        if self.data.shape[1] != self.labels.T:
            raise ValueError("data and labels disagree on T")
        if len(self.plane_ids) != self.data.shape[0]:
            raise ValueError("one plane id per plane required")
        if not 0 <= self.central < self.data.shape[0]:
            raise ValueError("central plane index out of range")

    @property
    def N(self) -> int:
        return self.data.shape[0]

    @property
    def T(self) -> int:
        return self.data.shape[1]

    @property
    def D_raw(self) -> int:
        return self.data.shape[2]

    def __eq__(self, other) -> bool:
        if not isinstance(other, RawFocalStack):
            return NotImplemented
        return (
            self.labels == other.labels
            and self.plane_ids == other.plane_ids
            and self.central == other.central
            and self.data.dtype == other.data.dtype
            and np.array_equal(self.data, other.data)
        )


def default_plane_ids(N: int) -> tuple[int, ...]:
    return tuple(i - N // 2 for i in range(N))


def make_prototypes(cfg: SyntheticConfig) -> np.ndarray:
    rng = np.random.default_rng([cfg.seed, 0x5EED])
    p = rng.standard_normal((cfg.c, cfg.D_raw))
    return p / np.linalg.norm(p, axis=1, keepdims=True)


def _rescale(durations: np.ndarray, target: int) -> np.ndarray:
    scaled = durations * (target / durations.sum())
    out = np.maximum(1, np.floor(scaled)).astype(np.int64)
    # hand leftover frames to the largest fractional parts, or take them
    # back from the longest stages
    diff = target - int(out.sum())
    if diff > 0:
        order = np.argsort(-(scaled - np.floor(scaled)), kind="stable")
        for i in range(diff):
            out[order[i % len(out)]] += 1
    while diff < 0:
        j = int(np.argmax(out))
        out[j] -= 1
        diff += 1
    return out


def sample_stage_sequence(cfg: SyntheticConfig, rng: np.random.Generator) -> StageSequence:
    vocab = cfg.stage_vocab()
    by_rank = sorted(range(cfg.c), key=vocab.rank)
    visited = [by_rank[0]]
    for s in by_rank[1:-1]:
        if rng.random() >= SKIP_PROB:
            visited.append(s)
    visited.append(by_rank[-1])
    raw = rng.lognormal(cfg.duration_logmean, cfg.duration_logstd, size=len(visited))
    durations = np.maximum(1, np.ceil(raw)).astype(np.int64)
    lo, hi = cfg.T_range
    total = int(durations.sum())
    if total < lo or total > hi:
        durations = _rescale(durations.astype(np.float64), min(max(total, lo), hi))
    labels = np.repeat(np.asarray(visited, dtype=np.int64), durations)
    return StageSequence(labels, vocab)


def render_raw_stack(
    seq: StageSequence,
    cfg: SyntheticConfig,
    rng: np.random.Generator,
    prototypes: np.ndarray | None = None,
) -> RawFocalStack:
    if prototypes is None:
        prototypes = make_prototypes(cfg)
    vocab = seq.vocab
    ranks = np.asarray(vocab.order)
    T = seq.T
    shown = np.broadcast_to(seq.labels, (cfg.N, T)).copy()
    occluded = rng.random((cfg.N, T)) < cfg.occlusion_rate
    if cfg.confuse_span > 0:
        for i, t in zip(*np.nonzero(occluded)):
            s = shown[i, t]
            near = np.flatnonzero(
                (np.abs(ranks - ranks[s]) <= cfg.confuse_span) & (np.arange(vocab.c) != s)
            )
            if near.size:
                shown[i, t] = near[rng.integers(near.size)]
    data = prototypes[shown]
    if cfg.noise_sigma > 0:
        data = data + cfg.noise_sigma * rng.standard_normal(data.shape)
    return RawFocalStack(
        data=data.astype(np.float32),
        labels=seq,
        plane_ids=default_plane_ids(cfg.N),
        central=cfg.N // 2,
    )


def record_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, 1, index])


def generate_dataset(cfg: SyntheticConfig, n_records: int) -> list[RawFocalStack]:
    if n_records < 1:
        raise ValueError("n_records must be >= 1")
    protos = make_prototypes(cfg)
    stacks = []
    for k in range(n_records):
        rng = record_rng(cfg.seed, k)
        seq = sample_stage_sequence(cfg, rng)
        stacks.append(render_raw_stack(seq, cfg, rng, protos))
    return stacks


def write_dataset(stacks: list[RawFocalStack], path: str | Path) -> None:
    if not stacks:
        raise ValueError("refusing to write an empty dataset")
    first = stacks[0]
    for k, s in enumerate(stacks):
        if s.N != first.N or s.D_raw != first.D_raw or s.central != first.central:
            raise FormatError("N, D_raw and central plane must agree across records", k)
        if s.labels.vocab != first.labels.vocab:
            raise FormatError("vocabulary differs from record 0", k)
    header = {
        "format": "EDK1",
        "count": len(stacks),
        "N": first.N,
        "D_raw": first.D_raw,
        "vocab": list(first.labels.vocab.names),
        "central": first.central,
        "plane_ids": list(first.plane_ids),
        "T": [s.T for s in stacks],
        "labels": [s.labels.tolist() for s in stacks],
    }
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(pack_header(header))
        for s in stacks:
            fh.write(np.ascontiguousarray(s.data, dtype="<f4").tobytes())


def read_dataset(path: str | Path) -> list[RawFocalStack]:
    buf = Path(path).read_bytes()
    header, offset = read_header(buf, DATASET_MAGIC)
    try:
        count, N, D = int(header["count"]), int(header["N"]), int(header["D_raw"])
        Ts, labels = list(header["T"]), list(header["labels"])
        vocab = StageVocabulary(tuple(header["vocab"]))
        central = int(header["central"])
        plane_ids = tuple(int(p) for p in header.get("plane_ids", default_plane_ids(N)))
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"malformed header: {e}") from e
    if count < 1 or N < 1 or D < 1:
        raise FormatError("header declares an empty dataset")
    if len(Ts) != count or len(labels) != count:
        raise FormatError("per-record T/labels lists disagree with record count")
    if len(plane_ids) != N or not 0 <= central < N:
        raise FormatError("plane ids or central index inconsistent with N")
    stacks = []
    for k in range(count):
        T = int(Ts[k])
        if T < 1 or len(labels[k]) != T:
            raise FormatError(f"dimension mismatch: T={T} but {len(labels[k])} labels", k)
        nbytes = N * T * D * 4
        if offset + nbytes > len(buf):
            have = len(buf) - offset
            raise FormatError(f"truncated payload: need {nbytes} bytes, {have} present", k)
        data = np.frombuffer(buf, dtype="<f4", count=N * T * D, offset=offset).reshape(N, T, D)
        offset += nbytes
        try:
            seq = StageSequence(labels[k], vocab)
        except ValueError as e:
            raise FormatError(str(e), k) from e
        stacks.append(RawFocalStack(data.astype(np.float32), seq, plane_ids, central))
    if offset != len(buf):
        raise FormatError(f"{len(buf) - offset} trailing bytes after last record", count - 1)
    return stacks


def config_dict(cfg: SyntheticConfig) -> dict:
    d = asdict(cfg)
    d["T_range"] = list(cfg.T_range)
    return d


def expected_stage_duration(cfg: SyntheticConfig) -> float:
    return math.exp(cfg.duration_logmean + cfg.duration_logstd ** 2 / 2)

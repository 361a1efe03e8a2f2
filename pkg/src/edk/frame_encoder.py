"""Stage 1: per-frame classifier trained on the central focal plane, then
frozen and reused as the feature extractor for every plane."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from edk.errors import FormatError, ProtocolError
from edk.fileio import load_blob, pack_header, read_header, save_blob, state_checksum
from edk.stages import StageSequence, StageVocabulary
from edk.synthetic import RawFocalStack

log = logging.getLogger(__name__)

FEATURE_MAGIC = b"EDF1"
PAPER_FEATURE_DIM = 2048


@dataclass
class FrameEncoderConfig:
    D_raw: int = 32
    D: int = 64
    hidden: list[int] = field(default_factory=lambda: [128])
    c: int = 8
    lr: float = 1e-3
    min_lr: float = 1e-7
    batch_size: int = 256
    epochs: int = 10
    weight_decay: float = 0.01
    val_fraction: float = 0.2

    def __post_init__(self):
        self.hidden = [int(h) for h in self.hidden]
        if self.D < self.c:
            raise ValueError("feature dimension D must be >= c")
        if not self.hidden:
            raise ValueError("at least one hidden layer is required")
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("epochs, batch_size and lr must be positive")


class FrameEncoder(nn.Module):
    def __init__(self, D_raw: int, D: int, hidden: Sequence[int], c: int):
        super().__init__()
        self.D_raw, self.D, self.hidden, self.c = D_raw, D, list(hidden), c
        layers: list[nn.Module] = []
        width = D_raw
        for h in self.hidden:
            layers += [nn.Linear(width, h), nn.ReLU()]
            width = h
        layers.append(nn.Linear(width, D))
        self.trunk = nn.Sequential(*layers)
        self.head = nn.Linear(D, c)
        self.frozen = False
        self._checksum: str | None = None
        self.report: dict = {}

    @classmethod
    def from_config(cls, cfg: FrameEncoderConfig) -> "FrameEncoder":
        return cls(cfg.D_raw, cfg.D, cfg.hidden, cfg.c)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.trunk(x))

    def freeze(self) -> "FrameEncoder":
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        self.frozen = True
        self._checksum = self.checksum()
        return self

    def train(self, mode: bool = True):
        if mode and getattr(self, "frozen", False):
            raise ProtocolError("a frozen frame encoder cannot be put back into training mode")
        return super().train(mode)

    def checksum(self) -> str:
        return state_checksum(self.state_dict())

    def meta(self) -> dict:
        return {
            "D_raw": self.D_raw,
            "D": self.D,
            "hidden": self.hidden,
            "c": self.c,
            "frozen": self.frozen,
            "checksum": self.checksum(),
            "report": self.report,
        }

    def save(self, path: str | Path) -> str:
        return save_blob(path, "frame_encoder", self.meta(), self.state_dict())

    @classmethod
    def load(cls, path: str | Path) -> "FrameEncoder":
        header, state = load_blob(path, "frame_encoder")
        m = header["meta"]
        enc = cls(int(m["D_raw"]), int(m["D"]), m["hidden"], int(m["c"]))
        enc.load_state_dict(state)
        enc.report = m.get("report", {})
        if m.get("frozen"):
            enc.freeze()
            if enc._checksum != m["checksum"]:
                raise FormatError("encoder checksum does not match its metadata")
        return enc


@dataclass(eq=False)
class FocalFeatureStack:
    data: np.ndarray  # (N, T, D) float32
    vocab: StageVocabulary
    labels: StageSequence | None = None

    def __post_init__(self):
        if self.data.ndim != 3 or 0 in self.data.shape:
            raise ValueError("feature stack must be a non-empty N x T x D array")
        if self.labels is not None and self.labels.T != self.data.shape[1]:
            raise ValueError("labels and features disagree on T")

    @property
    def N(self) -> int:
        return self.data.shape[0]

    @property
    def T(self) -> int:
        return self.data.shape[1]

    @property
    def D(self) -> int:
        return self.data.shape[2]

    def __eq__(self, other) -> bool:
        if not isinstance(other, FocalFeatureStack):
            return NotImplemented
        return (
            self.vocab == other.vocab
            and self.labels == other.labels
            and np.array_equal(self.data, other.data)
        )


def _central_frames(dataset: Sequence[RawFocalStack]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    xs = [s.data[s.central] for s in dataset]
    ys = [s.labels.labels for s in dataset]
    rec = [np.full(s.T, k) for k, s in enumerate(dataset)]
    return np.concatenate(xs), np.concatenate(ys), np.concatenate(rec)


@torch.no_grad()
def frame_accuracy_of(enc: FrameEncoder, x: np.ndarray, y: np.ndarray) -> float:
    if len(y) == 0:
        return float("nan")
    pred = enc(torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32))).argmax(-1).numpy()
    return float((pred == y).mean() * 100.0)


def train_frame_classifier(
    dataset: Sequence[RawFocalStack], cfg: FrameEncoderConfig, seed: int = 0
) -> FrameEncoder:
    """Train on central-plane frames as i.i.d. samples, then freeze.

    Whole records are held out for validation (``cfg.val_fraction``) when the
    dataset has at least two records. Accuracies land in ``encoder.report``.
    """
    if not dataset:
        raise ValueError("empty dataset")
    vocab = dataset[0].labels.vocab
    for k, s in enumerate(dataset):
        if s.D_raw != cfg.D_raw:
            raise ValueError(f"record {k}: D_raw={s.D_raw} but config expects {cfg.D_raw}")
        if s.labels.vocab != vocab:
            raise ValueError(f"record {k}: vocabulary differs from record 0")
    if vocab.c != cfg.c:
        raise ValueError(f"dataset has c={vocab.c} stages but config expects {cfg.c}")

    x, y, rec = _central_frames(dataset)
    n_val = int(round(cfg.val_fraction * len(dataset))) if len(dataset) > 1 else 0
    perm = np.random.default_rng([seed, 7]).permutation(len(dataset))
    val_mask = np.isin(rec, perm[:n_val])
    xtr, ytr = x[~val_mask], y[~val_mask]

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        enc = FrameEncoder.from_config(cfg)
        gen = torch.Generator().manual_seed(seed)
        opt = torch.optim.AdamW(enc.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
        steps_per_epoch = math.ceil(len(ytr) / cfg.batch_size)
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(
            opt, T_max=cfg.epochs * steps_per_epoch, eta_min=cfg.min_lr
        )
        xt = torch.from_numpy(np.ascontiguousarray(xtr, dtype=np.float32))
        yt = torch.from_numpy(ytr.astype(np.int64))
        enc.train()
        for epoch in range(cfg.epochs):
            order = torch.randperm(len(yt), generator=gen)
            total = 0.0
            for i in range(0, len(yt), cfg.batch_size):
                idx = order[i:i + cfg.batch_size]
                loss = F.cross_entropy(enc(xt[idx]), yt[idx])
                opt.zero_grad()
                loss.backward()
                opt.step()
                sched.step()
                total += loss.item() * len(idx)
            log.debug("frame epoch %d loss %.4f", epoch, total / len(yt))

    enc.eval()
    enc.report = {
        "train_acc": frame_accuracy_of(enc, xtr, ytr),
        "val_acc": frame_accuracy_of(enc, x[val_mask], y[val_mask]),
        "train_frames": int(len(ytr)),
        "val_frames": int(val_mask.sum()),
    }
    log.info("frame classifier: train %.2f%% val %.2f%%", enc.report["train_acc"], enc.report["val_acc"])
    return enc.freeze()


@torch.no_grad()
def extract_features(enc: FrameEncoder, stack: RawFocalStack) -> FocalFeatureStack:
    if not enc.frozen:
        raise ProtocolError("feature extraction requires a frozen encoder; train and freeze it first")
    if stack.D_raw != enc.D_raw:
        raise ValueError(f"stack has D_raw={stack.D_raw}, encoder expects {enc.D_raw}")
    planes = [
        enc.trunk(torch.from_numpy(np.ascontiguousarray(stack.data[i], dtype=np.float32))).numpy()
        for i in range(stack.N)
    ]
    return FocalFeatureStack(np.stack(planes).astype(np.float32), stack.labels.vocab, stack.labels)


def export_features(stack: FocalFeatureStack, path: str | Path) -> None:
    header = {
        "format": "EDF1",
        "N": stack.N,
        "T": stack.T,
        "D": stack.D,
        "plane_T": [stack.T] * stack.N,
        "vocab": list(stack.vocab.names),
    }
    if stack.labels is not None:
        header["labels"] = stack.labels.tolist()
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(pack_header(header))
        fh.write(np.ascontiguousarray(stack.data, dtype="<f4").tobytes())


def import_precomputed(path: str | Path) -> FocalFeatureStack:
    """Load an externally computed feature file without transforming it.

    Planes are stored plane-major; a per-plane ``T`` list in the header, when
    present, must agree across planes.
    """
    buf = Path(path).read_bytes()
    header, offset = read_header(buf, FEATURE_MAGIC)
    try:
        N, T, D = int(header["N"]), int(header["T"]), int(header["D"])
        vocab = StageVocabulary(tuple(header["vocab"]))
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"malformed feature header: {e}") from e
    if min(N, T, D) < 1:
        raise FormatError("N, T and D must be positive")
    plane_T = header.get("plane_T")
    if plane_T is not None and (len(plane_T) != N or any(int(t) != T for t in plane_T)):
        raise FormatError(f"planes disagree on T: {plane_T}")
    n = N * T * D
    if len(buf) - offset != 4 * n:
        raise FormatError(f"payload holds {len(buf) - offset} bytes, header implies {4 * n}")
    data = np.frombuffer(buf, dtype="<f4", count=n, offset=offset).reshape(N, T, D).astype(np.float32)
    labels = None
    if header.get("labels") is not None:
        try:
            labels = StageSequence(header["labels"], vocab)
        except ValueError as e:
            raise FormatError(f"bad labels: {e}") from e
        if labels.T != T:
            raise FormatError(f"{labels.T} labels for T={T} frames")
    return FocalFeatureStack(data, vocab, labels)


def config_dict(cfg: FrameEncoderConfig) -> dict:
    return asdict(cfg)

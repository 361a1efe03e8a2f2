"""Stage-2 losses and training loop."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from edk.diffusion import q_sample
from edk.errors import ProtocolError
from edk.frame_encoder import FrameEncoder, extract_features
from edk.fusion import fuse, select_planes
from edk.model import Stage2Model, pad_batch
from edk.stages import boundary_targets
from edk.synthetic import RawFocalStack

log = logging.getLogger(__name__)

SMOOTH_TAU = 4.0


@dataclass(frozen=True)
class LossWeights:
    sem: float = 0.8
    smooth: float = 0.3
    bound: float = 0.5
    diff: float = 1.0

    def __post_init__(self):
        if min(self.sem, self.smooth, self.bound, self.diff) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class TrainConfig:
    epochs: int = 350
    batch_size: int = 24
    lr: float = 1e-4
    min_lr: float = 1e-7
    weight_decay: float = 0.01
    steps: int | None = None  # overrides epochs when set
    boundary_sigma: float = 1.0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("epochs, batch_size and lr must be positive")
        if self.steps is not None and self.steps < 1:
            raise ValueError("steps must be positive")

    def total_steps(self, n_sequences: int) -> int:
        if self.steps is not None:
            return self.steps
        return self.epochs * math.ceil(n_sequences / self.batch_size)


def _flat(logits: torch.Tensor, mask: torch.Tensor | None):
    if logits.ndim == 2:
        logits = logits.unsqueeze(0)
    if mask is None:
        mask = torch.ones(logits.shape[:2], dtype=torch.bool)
    elif mask.ndim == 1:
        mask = mask.unsqueeze(0)
    return logits, mask.bool()


def sem_loss(logits: torch.Tensor, y: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean cross-entropy over unmasked frames."""
    logits, mask = _flat(logits, mask)
    y = torch.as_tensor(y).reshape(mask.shape)
    ce = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), y.reshape(-1).long(), reduction="none")
    m = mask.reshape(-1).to(ce.dtype)
    return (ce * m).sum() / m.sum().clamp_min(1)


diff_loss = sem_loss


def smooth_loss(logits: torch.Tensor, mask: torch.Tensor | None = None,
                tau: float = SMOOTH_TAU) -> torch.Tensor:
    """Truncated MSE between adjacent-frame log-probabilities.

    ``mean(min(d^2, tau^2))`` over valid frame pairs and classes, with
    ``d = log p_t - log p_{t-1}`` and no gradient through the earlier frame.
    """
    logits, mask = _flat(logits, mask)
    if logits.shape[1] < 2:
        raise ValueError("smooth_loss needs T >= 2")
    logp = F.log_softmax(logits, dim=-1)
    d2 = (logp[:, 1:] - logp[:, :-1].detach()).pow(2).clamp(max=tau * tau)
    pair = (mask[:, 1:] & mask[:, :-1]).to(d2.dtype).unsqueeze(-1)
    return (d2 * pair).sum() / (pair.sum() * logits.shape[-1]).clamp_min(1)


def bound_loss(logits: torch.Tensor, targets: torch.Tensor,
               mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean binary cross-entropy between ``sigmoid(logits)`` and soft targets."""
    if logits.shape[-1] == 1:
        logits = logits.squeeze(-1)
    if logits.ndim == 1:
        logits = logits.unsqueeze(0)
    targets = torch.as_tensor(targets, dtype=logits.dtype).reshape(logits.shape)
    m = torch.ones_like(logits) if mask is None else mask.reshape(logits.shape).to(logits.dtype)
    bce = F.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    return (bce * m).sum() / m.sum().clamp_min(1)


def total_loss(parts: dict, w: LossWeights):
    return (w.sem * parts["L_sem"] + w.smooth * parts["L_smooth"]
            + w.bound * parts["L_bound"] + w.diff * parts["L_diff"])


def stage2_losses(model: Stage2Model, x, mask, y, btargets, t, noise):
    conds = model.conditions(x, mask)
    y0 = model.embedding(y)
    y_t = q_sample(y0, t, model.schedule, noise)
    _, logits = model.denoiser(y_t, t, conds, mask)
    return {
        "L_sem": sem_loss(conds.sem_logits, y, mask),
        "L_smooth": smooth_loss(conds.sem_logits, mask),
        "L_bound": bound_loss(conds.bound_logits, btargets, mask),
        "L_diff": diff_loss(logits, y, mask),
    }


@dataclass
class Stage2Data:
    """Fused features with labels and boundary targets, ready for batching."""

    fused: list[np.ndarray]
    labels: list[np.ndarray]
    btargets: list[np.ndarray]

    @classmethod
    def build(cls, fused: Sequence[np.ndarray], labels: Sequence[np.ndarray], sigma: float = 1.0):
        labels = [np.asarray(l, dtype=np.int64) for l in labels]
        return cls(
            [np.asarray(f, dtype=np.float32) for f in fused],
            labels,
            [boundary_targets(l, sigma).astype(np.float32) for l in labels],
        )

    def __len__(self) -> int:
        return len(self.fused)

    def batch(self, idx: Sequence[int]):
        x, mask = pad_batch([self.fused[i] for i in idx])
        y, _ = pad_batch([self.labels[i] for i in idx], dtype=torch.long)
        b, _ = pad_batch([self.btargets[i] for i in idx])
        return x, mask, y, b


def fused_features(dataset: Sequence[RawFocalStack], encoder: FrameEncoder,
                   planes: Sequence[int] | None = None) -> list[np.ndarray]:
    """Extract per-plane features with the frozen encoder and average them."""
    out = []
    for stack in dataset:
        feats = extract_features(encoder, stack)
        if planes is not None:
            feats = select_planes(feats, planes)
        out.append(fuse(feats))
    return out


def fit_stage2(
    model: Stage2Model,
    data: Stage2Data,
    tcfg: TrainConfig,
    weights: LossWeights = LossWeights(),
    seed: int = 0,
    on_step: Callable[[dict], None] | None = None,
    on_checkpoint: Callable[[int, Stage2Model], None] | None = None,
) -> list[dict]:
    """Optimise all stage-2 parameters jointly with AdamW and cosine decay.

    Each step draws one timestep uniformly from [1, S] per sequence. Padded
    frames are masked out of every loss. Returns the per-step log.
    """
    n = len(data)
    total = tcfg.total_steps(n)
    history: list[dict] = []
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        gen = torch.Generator().manual_seed(seed)
        opt = torch.optim.AdamW(model.parameters(), lr=tcfg.lr, weight_decay=tcfg.weight_decay)
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=total, eta_min=tcfg.min_lr)
        model.train()
        order: list[int] = []
        t0 = time.perf_counter()
        for step in range(1, total + 1):
            if len(order) < min(tcfg.batch_size, n):
                order += torch.randperm(n, generator=gen).tolist()
            idx, order = order[: min(tcfg.batch_size, n)], order[min(tcfg.batch_size, n):]
            x, mask, y, b = data.batch(idx)
            t = torch.randint(1, model.S + 1, (len(idx),), generator=gen)
            noise = torch.randn((len(idx), x.shape[1], model.den_cfg.width), generator=gen)
            parts = stage2_losses(model, x, mask, y, b, t, noise)
            loss = total_loss(parts, weights)
            lr = opt.param_groups[0]["lr"]
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            rec = {"step": step, **{k: v.item() for k, v in parts.items()},
                   "total": loss.item(), "lr": lr}
            history.append(rec)
            if on_step:
                on_step(rec)
            if step % 100 == 0 or step == total:
                log.info("step %d/%d total %.4f (%.1fs)", step, total, rec["total"],
                         time.perf_counter() - t0)
            if on_checkpoint and tcfg.checkpoint_every and step % tcfg.checkpoint_every == 0:
                on_checkpoint(step, model)
    model.eval()
    return history


def train_stage2(
    dataset: Sequence[RawFocalStack],
    encoder: FrameEncoder,
    model: Stage2Model,
    tcfg: TrainConfig,
    weights: LossWeights = LossWeights(),
    seed: int = 0,
    planes: Sequence[int] | None = None,
    on_step: Callable[[dict], None] | None = None,
) -> tuple[Stage2Model, list[dict]]:
    """Stage 2 on raw stacks through a frozen stage-1 encoder.

    Features are extracted and fused once up front; the encoder is frozen so
    this is identical to re-extracting every step. The encoder checksum is
    verified before and after.
    """
    if not encoder.frozen:
        raise ProtocolError("stage 2 requires a frozen stage-1 encoder")
    before = encoder.checksum()
    fused = fused_features(dataset, encoder, planes)
    data = Stage2Data.build(fused, [s.labels.labels for s in dataset], tcfg.boundary_sigma)
    model.frame_encoder_checksum = before
    history = fit_stage2(model, data, tcfg, weights, seed, on_step)
    if encoder.checksum() != before:
        raise ProtocolError("frame encoder parameters changed during stage 2")
    return model, history


def config_dict(obj) -> dict:
    return asdict(obj)

"""Noise schedule, label embeddings, forward corruption and DDIM sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
import torch.nn as nn

from edk.stages import StageSequence

COSINE_OFFSET = 0.008
MAX_BETA = 0.999


@dataclass(frozen=True)
class NoiseSchedule:
    S: int
    bar_alpha: np.ndarray  # float64, length S + 1, bar_alpha[0] == 1

    def __post_init__(self):
        a = self.bar_alpha
        if a.shape != (self.S + 1,):
            raise ValueError("bar_alpha must have S + 1 entries")
        # S = 1 clips to exactly 1 - MAX_BETA (up to rounding), hence the slack
        if a[0] != 1.0 or not np.all(np.diff(a) < 0) or a[-1] > 1e-3 * (1 + 1e-9) or a[-1] <= 0:
            raise ValueError("bar_alpha must start at 1, decrease strictly and end at or below 1e-3")

    def __getitem__(self, t):
        return self.bar_alpha[t]

    def snr(self) -> np.ndarray:
        """``a_t / (1 - a_t)``; infinite at t = 0."""
        with np.errstate(divide="ignore"):
            return self.bar_alpha / (1.0 - self.bar_alpha)

    def tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.as_tensor(self.bar_alpha, dtype=dtype)

    def to_json(self) -> dict:
        return {"S": self.S, "bar_alpha": self.bar_alpha.tolist()}


def make_cosine_schedule(S: int = 1000, offset: float = COSINE_OFFSET) -> NoiseSchedule:
    """Cosine schedule ``f(t)/f(0)`` with ``f(t) = cos^2(((t/S + s)/(1 + s)) * pi/2)``.

    Wherever the implied per-step ``beta_t = 1 - a_t/a_{t-1}`` would exceed
    0.999 it is clipped, which only touches the final step for S = 1000.
    """
    if S < 1:
        raise ValueError("S must be >= 1")
    t = np.arange(S + 1, dtype=np.float64)
    f = np.cos(((t / S + offset) / (1 + offset)) * math.pi / 2) ** 2
    a = f / f[0]
    a[0] = 1.0
    for i in range(1, S + 1):
        if a[i] / a[i - 1] < 1 - MAX_BETA:
            a[i] = a[i - 1] * (1 - MAX_BETA)
    return NoiseSchedule(S, a)


class LabelEmbedding(nn.Module):
    """Learnable ``c x d`` table; rows are RMS-normalised and multiplied by ``scale``."""

    def __init__(self, c: int, d: int, scale: float = 0.1):
        super().__init__()
        if scale <= 0:
            raise ValueError("scale must be positive")
        self.scale = scale
        self.table = nn.Parameter(torch.randn(c, d))

    def matrix(self) -> torch.Tensor:
        rms = self.table.pow(2).mean(-1, keepdim=True).add(1e-12).sqrt()
        return self.scale * self.table / rms

    def forward(self, labels: torch.Tensor) -> torch.Tensor:
        return self.matrix()[labels]


def embed_labels(labels, emb: LabelEmbedding) -> torch.Tensor:
    if isinstance(labels, StageSequence):
        labels = torch.from_numpy(np.array(labels.labels))
    return emb(torch.as_tensor(labels, dtype=torch.long))


def _bcast(v: torch.Tensor, ndim: int) -> torch.Tensor:
    return v.reshape(v.shape + (1,) * (ndim - v.ndim))


def q_sample(y0: torch.Tensor, t, schedule: NoiseSchedule, noise: torch.Tensor) -> torch.Tensor:
    """``sqrt(a_t) * y0 + sqrt(1 - a_t) * noise``; ``t`` is an int or one step per batch row."""
    a = torch.as_tensor(schedule.bar_alpha, dtype=y0.dtype, device=y0.device)[torch.as_tensor(t)]
    if a.ndim:
        a = _bcast(a, y0.ndim)
    return a.sqrt() * y0 + (1 - a).sqrt() * noise


def sinusoidal_embedding(t, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Half sines then half cosines over log-spaced frequencies ``max_period^(-i/half)``."""
    if dim % 2:
        raise ValueError("embedding dim must be even")
    t = torch.as_tensor(t, dtype=torch.float64).reshape(-1)
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class TimestepEmbedder(nn.Module):
    def __init__(self, width: int, freq_dim: int | None = None):
        super().__init__()
        self.freq_dim = freq_dim or width
        self.mlp = nn.Sequential(
            nn.Linear(self.freq_dim, width), nn.SiLU(), nn.Linear(width, width)
        )
        # starts at zero so a fresh denoiser is the identity on y_t
        nn.init.zeros_(self.mlp[2].weight)
        nn.init.zeros_(self.mlp[2].bias)

    def forward(self, t) -> torch.Tensor:
        w = self.mlp[0].weight
        return self.mlp(sinusoidal_embedding(t, self.freq_dim).to(w.dtype).to(w.device))


def ddim_timesteps(S: int, K: int) -> list[int]:
    """K evenly spaced steps descending from S; the step after the last is 0."""
    if not 1 <= K <= S:
        raise ValueError(f"steps must lie in [1, {S}], got {K}")
    return [int(round(S * (K - i) / K)) for i in range(K)]


DenoiseFn = Callable[[torch.Tensor, torch.Tensor], "tuple[torch.Tensor, torch.Tensor]"]


@torch.no_grad()
def ddim_sample(
    model: DenoiseFn,
    shape: tuple[int, ...],
    steps: int,
    schedule: NoiseSchedule,
    generator: torch.Generator | None = None,
    eta: float = 0.0,
    embed_matrix: torch.Tensor | None = None,
    init_noise: torch.Tensor | None = None,
    dtype=torch.float32,
) -> tuple[torch.Tensor, torch.Tensor]:
    """DDIM sampling of label embeddings.

    ``model(y_t, t)`` returns ``(y0_hat, logits)`` where ``t`` holds one step
    per batch row. When ``embed_matrix`` (``c x d``) is given, the clean
    estimate used in the update is ``softmax(logits) @ embed_matrix`` instead
    of ``y0_hat``, which keeps intermediate states on the training manifold.

    Returns the final-step logits and their argmax labels.
    """
    ts = ddim_timesteps(schedule.S, steps)
    a_all = schedule.tensor(torch.float64)
    if init_noise is not None:
        y = init_noise.to(dtype)
    else:
        y = torch.randn(shape, generator=generator, dtype=dtype)
    B = y.shape[0]
    logits = None
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        y0_hat, logits = model(y, torch.full((B,), t, dtype=torch.long))
        x0 = y0_hat if embed_matrix is None else torch.softmax(logits, -1) @ embed_matrix.to(logits.dtype)
        a_t, a_prev = a_all[t].item(), a_all[t_prev].item()
        eps = (y - math.sqrt(a_t) * x0) / math.sqrt(1 - a_t)
        sigma = 0.0
        if eta > 0 and t_prev > 0:
            sigma = eta * math.sqrt((1 - a_prev) / (1 - a_t)) * math.sqrt(1 - a_t / a_prev)
        y = math.sqrt(a_prev) * x0 + math.sqrt(max(1 - a_prev - sigma ** 2, 0.0)) * eps
        if sigma > 0:
            y = y + sigma * torch.randn(y.shape, generator=generator, dtype=y.dtype)
    return logits, logits.argmax(-1)

"""Semantic and boundary condition encoders.

Each branch is an encoder-only ASFormer-style stack: a 1x1 input projection,
then layers of dilated temporal convolution followed by single-head
self-attention restricted to a local window that doubles with depth.
Outputs of the tap layers are concatenated along channels to form the
condition signal; a linear head on the last layer gives auxiliary logits.
"""

from __future__ import annotations

import functools
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class TemporalEncoderConfig:
    layers: int = 6
    hidden: int = 96
    tap_layers: list[int] = field(default_factory=lambda: [2, 4, 6])
    base_window: int = 16
    dropout: float = 0.1

    def __post_init__(self):
        self.tap_layers = sorted(int(t) for t in self.tap_layers)
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if self.hidden < 8:
            raise ValueError("hidden must be >= 8")
        if not self.tap_layers or not set(self.tap_layers) <= set(range(1, self.layers + 1)):
            raise ValueError(f"tap_layers must be a non-empty subset of 1..{self.layers}")

    @property
    def cond_width(self) -> int:
        return len(self.tap_layers) * self.hidden

    def dilation(self, layer: int) -> int:
        return 2 ** (layer - 1)

    def window(self, layer: int, T: int | None = None) -> int:
        w = 2 ** (layer - 1) * self.base_window
        return w if T is None else min(T, w)


def receptive_field(layers: int, kernel: int = 3) -> int:
    """Receptive field of a stack of dilated convolutions with dilation 2^(l-1)."""
    return 1 + (kernel - 1) * (2 ** layers - 1)


class ConditionPair(NamedTuple):
    sem: torch.Tensor  # (B, T, W)
    bound: torch.Tensor  # (B, T, W)
    sem_logits: torch.Tensor  # (B, T, c)
    bound_logits: torch.Tensor  # (B, T, 1)


@functools.lru_cache(maxsize=64)
def _band(T: int, window: int) -> torch.Tensor:
    idx = torch.arange(T)
    return (idx[:, None] - idx[None, :]).abs() < window


def band_mask(T: int, window: int, device=None) -> torch.Tensor:
    """``[i, j]`` is True when frame i may attend to frame j: ``|i - j| < window``."""
    return _band(T, window).to(device)


def attention_mask(T: int, window: int | None, mask: torch.Tensor | None,
                   dtype=torch.float32) -> torch.Tensor | None:
    """Additive (B|1, T, T) mask combining the local window with key padding.

    Padded queries may attend everywhere so no softmax row is empty; their
    outputs are zeroed by the caller.
    """
    allowed = None
    if window is not None and window < T:
        allowed = _band(T, window).unsqueeze(0)
    if mask is not None:
        valid = mask.bool()
        keys = valid[:, None, :] if allowed is None else allowed & valid[:, None, :]
        allowed = keys | ~valid[:, :, None]
    if allowed is None:
        return None
    out = torch.zeros(allowed.shape, dtype=dtype)
    return out.masked_fill_(~allowed, float("-inf"))


class WindowedAttention(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x, bias: torch.Tensor | None = None):
        att = F.scaled_dot_product_attention(self.q(x), self.k(x), self.v(x), attn_mask=bias)
        return self.out(att)


class EncoderLayer(nn.Module):
    def __init__(self, hidden: int, dilation: int, window: int, dropout: float = 0.0,
                 padding_mode: str = "zeros"):
        super().__init__()
        self.dilation, self.window = dilation, window
        self.conv = nn.Conv1d(hidden, hidden, 3, dilation=dilation, padding=dilation,
                              padding_mode=padding_mode)
        self.norm = nn.LayerNorm(hidden)
        self.attn = WindowedAttention(hidden)
        self.proj = nn.Linear(hidden, hidden)
        self.dropout = nn.Dropout(dropout)

    def conv_path(self, x: torch.Tensor) -> torch.Tensor:
        return F.relu(self.conv(x.transpose(1, 2)).transpose(1, 2))

    def forward(self, x, mask: torch.Tensor | None = None, full_attention: bool = False,
                bias: torch.Tensor | None | bool = False):
        h = self.conv_path(x)
        if bias is False:
            window = None if full_attention else self.window
            bias = attention_mask(x.shape[1], window, mask, x.dtype)
        h = h + self.attn(self.norm(h), bias)
        out = x + self.dropout(self.proj(h))
        if mask is not None:
            out = out * mask.unsqueeze(-1)
        return out


def window_biases(cfg: TemporalEncoderConfig, T: int, mask, dtype) -> dict:
    return {
        cfg.window(l): attention_mask(T, cfg.window(l), mask, dtype)
        for l in range(1, cfg.layers + 1)
    }


class ConditionBranch(nn.Module):
    def __init__(self, in_dim: int, out_dim: int, cfg: TemporalEncoderConfig,
                 padding_mode: str = "zeros"):
        super().__init__()
        self.cfg = cfg
        self.in_proj = nn.Linear(in_dim, cfg.hidden)  # 1x1 convolution
        self.layers = nn.ModuleList(
            EncoderLayer(cfg.hidden, cfg.dilation(l), cfg.window(l), cfg.dropout, padding_mode)
            for l in range(1, cfg.layers + 1)
        )
        self.head = nn.Linear(cfg.hidden, out_dim)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None,
                biases: dict | None = None):
        h = self.in_proj(x)
        if mask is not None:
            h = h * mask.unsqueeze(-1)
        if biases is None:
            biases = window_biases(self.cfg, x.shape[1], mask, x.dtype)
        taps = []
        for l, layer in enumerate(self.layers, start=1):
            h = layer(h, mask, bias=biases[layer.window])
            if l in self.cfg.tap_layers:
                taps.append(h)
        return torch.cat(taps, dim=-1), self.head(h)


class ConditionEncoders(nn.Module):
    """Independent semantic (``c`` logits) and boundary (1 logit) branches."""

    def __init__(self, in_dim: int, c: int, cfg: TemporalEncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.semantic = ConditionBranch(in_dim, c, cfg)
        self.boundary = ConditionBranch(in_dim, 1, cfg)

    @property
    def cond_width(self) -> int:
        return self.cfg.cond_width

    def encode_semantic(self, x, mask=None):
        return self.semantic(x, mask)

    def encode_boundary(self, x, mask=None):
        return self.boundary(x, mask)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> ConditionPair:
        biases = window_biases(self.cfg, x.shape[1], mask, x.dtype)
        sem, sem_logits = self.semantic(x, mask, biases)
        bound, bound_logits = self.boundary(x, mask, biases)
        return ConditionPair(sem, bound, sem_logits, bound_logits)


def config_dict(cfg: TemporalEncoderConfig) -> dict:
    return asdict(cfg)

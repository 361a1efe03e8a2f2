"""DiT-style label denoiser built from hybrid semantic/boundary condition blocks."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from edk.conditions import ConditionPair
from edk.diffusion import TimestepEmbedder


@dataclass
class DenoiserConfig:
    blocks: int = 8
    width: int = 128
    heads: int = 4
    kernel: int = 3
    ffn_mult: int = 4
    dropout: float = 0.1

    def __post_init__(self):
        if self.blocks < 1:
            raise ValueError("blocks must be >= 1")
        if self.width % self.heads:
            raise ValueError("width must be divisible by heads")
        if self.kernel % 2 == 0:
            raise ValueError("kernel must be odd to preserve T")


def key_padding_bias(mask: torch.Tensor, dtype) -> torch.Tensor:
    """Additive (B, 1, 1, T) bias hiding padded keys."""
    bias = torch.zeros(mask.shape, dtype=dtype).masked_fill_(~mask.bool(), float("-inf"))
    return bias[:, None, None, :]


class HybridBlock(nn.Module):
    """One conditioning block.

    Boundary path: conv over ``[z, C_bound]`` (channels), projected to d.
    Semantic path: multi-head attention with queries/keys from ``[z, C_sem]``
    and values from ``z``. The two are summed, normalised, passed through an
    FFN and added back to ``z``. All three output projections start at zero.
    """

    def __init__(self, d: int, heads: int = 4, kernel: int = 3, ffn_mult: int = 4,
                 dropout: float = 0.0):
        super().__init__()
        self.d, self.heads = d, heads
        self.bound_conv = nn.Conv1d(2 * d, d, kernel, padding=kernel // 2)
        self.bound_out = nn.Linear(d, d)
        self.q = nn.Linear(2 * d, d)
        self.k = nn.Linear(2 * d, d)
        self.v = nn.Linear(d, d)
        self.sem_out = nn.Linear(d, d)
        self.norm = nn.LayerNorm(d)
        self.ffn = nn.Sequential(
            nn.Linear(d, ffn_mult * d), nn.GELU(), nn.Dropout(dropout), nn.Linear(ffn_mult * d, d)
        )
        self.attn_dropout = dropout
        for lin in (self.bound_out, self.sem_out, self.ffn[-1]):
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)
        self.taps: dict[str, torch.Tensor] | None = None

    def boundary_path(self, z, cb):
        u = self.bound_conv(torch.cat([z, cb], dim=-1).transpose(1, 2)).transpose(1, 2)
        return self.bound_out(u)

    def semantic_path(self, z, cs, mask=None, bias=None):
        B, T, d = z.shape
        h = self.heads
        zc = torch.cat([z, cs], dim=-1)
        q = self.q(zc).view(B, T, h, d // h).transpose(1, 2)
        k = self.k(zc).view(B, T, h, d // h).transpose(1, 2)
        v_flat = self.v(z)
        v = v_flat.view(B, T, h, d // h).transpose(1, 2)
        if bias is None and mask is not None:
            bias = key_padding_bias(mask, z.dtype)
        att = F.scaled_dot_product_attention(
            q, k, v, attn_mask=bias, dropout_p=self.attn_dropout if self.training else 0.0
        )
        out = self.sem_out(att.transpose(1, 2).reshape(B, T, d))
        return out, v_flat

    def forward(self, z, cs, cb, mask: torch.Tensor | None = None, bias=None):
        if not (z.shape == cs.shape == cb.shape):
            raise ValueError(f"shape mismatch: z {tuple(z.shape)}, C_sem {tuple(cs.shape)}, "
                             f"C_bound {tuple(cb.shape)}")
        if mask is not None:
            m = mask.unsqueeze(-1).to(z.dtype)
            z_in, cb = z * m, cb * m
        else:
            z_in = z
        u = self.boundary_path(z_in, cb)
        a, v = self.semantic_path(z, cs, mask, bias)
        update = self.ffn(self.norm(u + a))
        if mask is not None:
            update = update * m
        if self.taps is not None:
            self.taps.update(boundary=u.detach(), semantic=a.detach(), value=v.detach())
        return z + update


class Denoiser(nn.Module):
    """``(y_t, t, conditions) -> (y0_hat, logits)``.

    Conditions are linearly projected to the block width, the timestep
    embedding is added to ``y_t``, blocks run in sequence, a linear layer
    (identity at init) gives ``y0_hat`` and a linear head maps it to logits.
    """

    def __init__(self, cfg: DenoiserConfig, c: int, cond_width: int):
        super().__init__()
        d = cfg.width
        self.cfg, self.c = cfg, c
        self.sem_proj = nn.Linear(cond_width, d)
        self.bound_proj = nn.Linear(cond_width, d)
        self.time = TimestepEmbedder(d)
        self.blocks = nn.ModuleList(
            HybridBlock(d, cfg.heads, cfg.kernel, cfg.ffn_mult, cfg.dropout) for _ in range(cfg.blocks)
        )
        self.out = nn.Linear(d, d)
        with torch.no_grad():
            self.out.weight.copy_(torch.eye(d))
            self.out.bias.zero_()
        self.head = nn.Linear(d, c)

    def project_conditions(self, conds: ConditionPair):
        return self.sem_proj(conds.sem), self.bound_proj(conds.bound)

    def features(self, y_t, t, cs, cb, mask=None):
        z = y_t + self.time(t).unsqueeze(1)
        bias = None if mask is None else key_padding_bias(mask, z.dtype)
        for block in self.blocks:
            z = block(z, cs, cb, mask, bias)
        return z

    def forward(self, y_t: torch.Tensor, t, conds: ConditionPair, mask=None,
                projected: tuple[torch.Tensor, torch.Tensor] | None = None):
        if y_t.shape[:2] != conds.sem.shape[:2]:
            raise ValueError("y_t and conditions disagree on batch or T")
        t = torch.as_tensor(t).reshape(-1).expand(y_t.shape[0])
        cs, cb = projected if projected is not None else self.project_conditions(conds)
        y0_hat = self.out(self.features(y_t, t, cs, cb, mask))
        return y0_hat, self.head(y0_hat)

    def record_taps(self, enabled: bool = True) -> list[dict]:
        for b in self.blocks:
            b.taps = {} if enabled else None
        return [b.taps for b in self.blocks]


def config_dict(cfg: DenoiserConfig) -> dict:
    return asdict(cfg)


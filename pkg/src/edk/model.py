"""Stage-2 bundle: condition encoders, label embedding and denoiser."""

from __future__ import annotations

from dataclasses import asdict
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from edk.conditions import ConditionEncoders, ConditionPair, TemporalEncoderConfig
from edk.denoiser import Denoiser, DenoiserConfig
from edk.diffusion import LabelEmbedding, NoiseSchedule, ddim_sample, make_cosine_schedule
from edk.fileio import load_blob, save_blob, state_checksum
from edk.stages import StageVocabulary


def pad_batch(seqs: Sequence[np.ndarray | torch.Tensor], dtype=torch.float32):
    """Right-pad variable-length ``T_i x ...`` arrays; returns (batch, mask)."""
    T = max(len(s) for s in seqs)
    tail = tuple(np.shape(seqs[0])[1:])
    out = torch.zeros((len(seqs), T) + tail, dtype=dtype)
    mask = torch.zeros(len(seqs), T, dtype=torch.bool)
    for i, s in enumerate(seqs):
        if not isinstance(s, torch.Tensor):
            s = torch.from_numpy(np.array(s))
        out[i, : len(s)] = s.to(dtype)
        mask[i, : len(s)] = True
    return out, mask


def sequence_noise(seed: int, index: int, T: int, d: int) -> torch.Tensor:
    """Initial DDIM noise for one sequence; independent of batching."""
    state = np.random.SeedSequence([int(seed), int(index)]).generate_state(2)
    g = torch.Generator().manual_seed(int(state[0]) << 32 | int(state[1]))
    return torch.randn((T, d), generator=g)


class Stage2Model(nn.Module):
    def __init__(self, in_dim: int, vocab: StageVocabulary, enc_cfg: TemporalEncoderConfig,
                 den_cfg: DenoiserConfig, S: int = 1000, scale: float = 0.1,
                 reembed: bool = True):
        super().__init__()
        self.in_dim, self.vocab = in_dim, vocab
        self.enc_cfg, self.den_cfg = enc_cfg, den_cfg
        self.S, self.scale, self.reembed = S, scale, reembed
        self.schedule: NoiseSchedule = make_cosine_schedule(S)
        self.encoders = ConditionEncoders(in_dim, vocab.c, enc_cfg)
        self.embedding = LabelEmbedding(vocab.c, den_cfg.width, scale)
        self.denoiser = Denoiser(den_cfg, vocab.c, enc_cfg.cond_width)
        self.frame_encoder_checksum: str | None = None

    @classmethod
    def create(cls, in_dim: int, vocab: StageVocabulary, enc_cfg: TemporalEncoderConfig,
               den_cfg: DenoiserConfig, seed: int = 0, **kw) -> "Stage2Model":
        """Construct with parameters initialised from ``seed`` only."""
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            return cls(in_dim, vocab, enc_cfg, den_cfg, **kw)

    @property
    def c(self) -> int:
        return self.vocab.c

    def conditions(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> ConditionPair:
        return self.encoders(x, mask)

    @torch.no_grad()
    def sample(self, x: torch.Tensor, mask: torch.Tensor, steps: int, seed: int = 0,
               eta: float = 0.0, indices: Sequence[int] | None = None,
               conds: ConditionPair | None = None):
        """DDIM-decode a padded batch of fused features. Returns (logits, labels)."""
        was_training = self.training
        self.eval()
        try:
            if conds is None:
                conds = self.conditions(x, mask)
            projected = self.denoiser.project_conditions(conds)
            lengths = mask.sum(1).tolist()
            idx = list(indices) if indices is not None else list(range(len(lengths)))
            d = self.den_cfg.width
            noise = torch.zeros(x.shape[0], x.shape[1], d)
            for b, (k, T) in enumerate(zip(idx, lengths)):
                noise[b, :T] = sequence_noise(seed, k, int(T), d)
            gen = torch.Generator().manual_seed(int(seed))

            def fn(y, t):
                return self.denoiser(y, t, conds, mask, projected=projected)

            return ddim_sample(
                fn, noise.shape, steps, self.schedule, gen, eta,
                embed_matrix=self.embedding.matrix() if self.reembed else None,
                init_noise=noise,
            )
        finally:
            self.train(was_training)

    def predict(self, fused: Sequence[np.ndarray], steps: int, seed: int = 0, eta: float = 0.0,
                batch_size: int = 16) -> list[np.ndarray]:
        out = []
        for i in range(0, len(fused), batch_size):
            chunk = fused[i:i + batch_size]
            x, mask = pad_batch(chunk)
            _, labels = self.sample(x, mask, steps, seed, eta, indices=range(i, i + len(chunk)))
            out += [labels[b, : len(f)].numpy().astype(np.int64) for b, f in enumerate(chunk)]
        return out

    def meta(self) -> dict:
        return {
            "in_dim": self.in_dim,
            "vocab": list(self.vocab.names),
            "encoder": asdict(self.enc_cfg),
            "denoiser": asdict(self.den_cfg),
            "S": self.S,
            "scale": self.scale,
            "reembed": self.reembed,
            "frame_encoder_checksum": self.frame_encoder_checksum,
            "checksum": self.checksum(),
        }

    def checksum(self) -> str:
        return state_checksum(self.state_dict())

    def save(self, path: str | Path, extra: dict | None = None) -> str:
        meta = self.meta()
        if extra:
            meta["extra"] = extra
        return save_blob(path, "stage2", meta, self.state_dict())

    @classmethod
    def load(cls, path: str | Path) -> "Stage2Model":
        header, state = load_blob(path, "stage2")
        m = header["meta"]
        model = cls(
            int(m["in_dim"]), StageVocabulary(tuple(m["vocab"])),
            TemporalEncoderConfig(**m["encoder"]), DenoiserConfig(**m["denoiser"]),
            int(m["S"]), float(m["scale"]), bool(m.get("reembed", True)),
        )
        model.load_state_dict(state)
        model.frame_encoder_checksum = m.get("frame_encoder_checksum")
        model.extra = m.get("extra", {})
        return model.eval()

"""End-to-end helpers shared by the CLI and the acceptance runs."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from edk.config import RunConfig
from edk.frame_encoder import FrameEncoder, train_frame_classifier
from edk.model import Stage2Model
from edk.synthetic import RawFocalStack, generate_dataset
from edk.training import Stage2Data, fit_stage2, fused_features
from edk.errors import ProtocolError


def build_stage2(cfg: RunConfig, in_dim: int, vocab) -> Stage2Model:
    return Stage2Model.create(
        in_dim, vocab, cfg.encoder, cfg.denoiser, seed=cfg.seed,
        S=cfg.diffusion.S, scale=cfg.diffusion.scale, reembed=cfg.diffusion.reembed,
    )


def stage2_from_fused(cfg: RunConfig, fused: Sequence[np.ndarray], labels: Sequence,
                      vocab, encoder_checksum: str | None = None,
                      on_step: Callable[[dict], None] | None = None):
    model = build_stage2(cfg, fused[0].shape[-1], vocab)
    model.frame_encoder_checksum = encoder_checksum
    data = Stage2Data.build(fused, labels, cfg.train.boundary_sigma)
    history = fit_stage2(model, data, cfg.train, cfg.weights, cfg.seed, on_step)
    return model, history


def run_two_stage(cfg: RunConfig, dataset: Sequence[RawFocalStack] | None = None,
                  on_step: Callable[[dict], None] | None = None):
    """Stage 1 (train + freeze), extraction + fusion, Stage 2.

    Returns ``(encoder, model, history, fused)``.
    """
    if dataset is None:
        dataset = generate_dataset(cfg.data, cfg.n_sequences)
    encoder = train_frame_classifier(dataset, cfg.frame, cfg.seed)
    before = encoder.checksum()
    fused = fused_features(dataset, encoder, cfg.fusion.planes)
    model, history = stage2_from_fused(
        cfg, fused, [s.labels.labels for s in dataset], dataset[0].labels.vocab, before, on_step)
    if encoder.checksum() != before:
        raise ProtocolError("frame encoder parameters changed during stage 2")
    return encoder, model, history, fused


def fused_for(encoder: FrameEncoder, dataset: Sequence[RawFocalStack], cfg: RunConfig):
    return fused_features(dataset, encoder, cfg.fusion.planes)

"""Run configuration: nested dataclasses, YAML files, profiles and overrides.

Override grammar: ``--set a.b.c=v`` where ``v`` is parsed as a YAML scalar or
flow collection (``--set train.steps=500``, ``--set eval.steps=[1,15,25]``).
The ``EDK_SEED`` environment variable replaces ``seed`` after all overrides.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import os
import typing
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from edk.conditions import TemporalEncoderConfig
from edk.denoiser import DenoiserConfig
from edk.errors import ConfigError
from edk.frame_encoder import FrameEncoderConfig
from edk.synthetic import SyntheticConfig
from edk.training import LossWeights, TrainConfig

SEED_ENV = "EDK_SEED"


@dataclass
class DiffusionConfig:
    S: int = 1000
    scale: float = 0.1
    reembed: bool = True
    eta: float = 0.0

    def __post_init__(self):
        if self.S < 1 or self.scale <= 0 or self.eta < 0:
            raise ValueError("S and scale must be positive, eta non-negative")


@dataclass
class FusionConfig:
    planes: list[int] | None = None  # plane indices kept before fusing; None keeps all


@dataclass
class EvalConfig:
    steps: list[int] = field(default_factory=lambda: [1, 15, 25])
    seeds: int = 10
    aggregate: str = "per-seq"
    batch_size: int = 16

    def __post_init__(self):
        self.steps = [int(s) for s in self.steps]
        if not self.steps or min(self.steps) < 1 or self.seeds < 1:
            raise ValueError("eval.steps must be positive integers and eval.seeds >= 1")
        if self.aggregate not in ("per-seq", "pooled"):
            raise ValueError("eval.aggregate must be 'per-seq' or 'pooled'")


@dataclass
class RunConfig:
    seed: int = 0
    n_sequences: int = 8
    data: SyntheticConfig = field(default_factory=SyntheticConfig)
    frame: FrameEncoderConfig = field(default_factory=FrameEncoderConfig)
    encoder: TemporalEncoderConfig = field(default_factory=TemporalEncoderConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if self.n_sequences < 1:
            raise ValueError("n_sequences must be >= 1")
        if self.frame.c != self.data.c or self.frame.D_raw != self.data.D_raw:
            raise ValueError("frame.c / frame.D_raw must match data.c / data.D_raw")
        if self.fusion.planes is not None:
            if not self.fusion.planes or not all(0 <= p < self.data.N for p in self.fusion.planes):
                raise ValueError(f"fusion.planes must index planes 0..{self.data.N - 1}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["data"]["T_range"] = list(d["data"]["T_range"])
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))


_DESK = {
    "seed": 0,
    "n_sequences": 8,
    "data": {"c": 8, "N": 3, "T_range": [180, 220]},
    "frame": {"c": 8, "D": 64, "hidden": [128]},
    "encoder": {"hidden": 32, "dropout": 0.0},
    "denoiser": {"blocks": 2, "width": 128, "dropout": 0.0},
    "train": {"steps": 2000, "batch_size": 8, "lr": 1e-3},
}

_PAPER = {
    "n_sequences": 96,
    "encoder": {"hidden": 96, "dropout": 0.1},
    "denoiser": {"blocks": 8, "width": 128, "dropout": 0.1},
    "train": {"steps": None, "epochs": 350, "batch_size": 24, "lr": 1e-4},
}

_MFHE_LIKE = {
    "data": {"c": 15, "N": 7, "D_raw": 32, "vocab": "mfhe15", "T_range": [300, 500],
             "occlusion_rate": 0.3},
    "frame": {"c": 15, "D_raw": 32},
}

PROFILES = {
    "desk": [_DESK],
    "paper": [_DESK, _PAPER],
    "mfhe-like": [_DESK, _MFHE_LIKE],
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _build(cls, data, path: str):
    if not dataclasses.is_dataclass(cls):
        return data
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for f in fields(cls):
        if f.name in data:
            sub = f"{path}.{f.name}" if path else f.name
            kwargs[f.name] = _build(hints[f.name], data[f.name], sub)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path or 'config'}: {e}") from e


def parse_override(item: str) -> tuple[list[str], object]:
    key, sep, raw = item.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"override {item!r} is not of the form a.b.c=value")
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError as e:
        raise ConfigError(f"override {item!r}: {e}") from e
    return key.strip().split("."), value


def apply_override(tree: dict, keys: list[str], value) -> None:
    node = tree
    for k in keys[:-1]:
        nxt = node.setdefault(k, {})
        if not isinstance(nxt, dict):
            raise ConfigError(f"override path {'.'.join(keys)}: {k} is not a section")
        node = nxt
    node[keys[-1]] = value


def load_config(path: str | Path | None = None, profile: str = "desk",
                overrides: typing.Sequence[str] = (), env: typing.Mapping | None = None) -> RunConfig:
    """Resolve profile, then file, then ``--set`` overrides, then ``EDK_SEED``."""
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; choose from {', '.join(PROFILES)}")
    tree: dict = {}
    for layer in PROFILES[profile]:
        tree = _merge(tree, layer)
    if path is not None:
        try:
            loaded = yaml.safe_load(Path(path).read_text()) or {}
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        except yaml.YAMLError as e:
            raise ConfigError(f"config {path} is not valid YAML: {e}") from e
        if not isinstance(loaded, dict):
            raise ConfigError(f"config {path} must be a mapping at top level")
        tree = _merge(tree, loaded)
    for item in overrides:
        apply_override(tree, *parse_override(item))
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            tree["seed"] = int(env[SEED_ENV])
        except ValueError as e:
            raise ConfigError(f"{SEED_ENV}={env[SEED_ENV]!r} is not an integer") from e
    # the run seed drives data generation too unless the data section pins its own
    tree.setdefault("data", {}).setdefault("seed", tree.get("seed", 0))
    return _build(RunConfig, tree, "")

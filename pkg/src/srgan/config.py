"""Training configuration, presets and ``key=value`` overrides."""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .errors import InvalidArgument, IoError
from .losses import LossSpec
from .models import DiscriminatorConfig, FeatureExtractorConfig, GeneratorConfig


@dataclass(frozen=True)
class TrainSchedule:
    lr_segments: tuple = ((1000, 1e-4),)
    batch_size: int = 16
    crop: int = 96
    factor: int = 4
    gaussian_sigma: float | None = None
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        segs = tuple((int(n), float(lr)) for n, lr in self.lr_segments)
        object.__setattr__(self, "lr_segments", segs)
        if not segs or any(n <= 0 or lr <= 0 for n, lr in segs):
            raise InvalidArgument("lr_segments must be non-empty with positive counts and rates")
        if self.batch_size <= 0 or self.crop <= 0:
            raise InvalidArgument("batch_size and crop must be positive")
        if self.crop % self.factor:
            raise InvalidArgument(f"crop {self.crop} not divisible by factor {self.factor}")
        if self.checkpoint_every < 0:
            raise InvalidArgument("checkpoint_every must be >= 0")

    @property
    def iterations(self) -> int:
        return sum(n for n, _ in self.lr_segments)

    def lr_at(self, iteration: int) -> float:
        """Learning rate for 1-based ``iteration``."""
        end = 0
        for n, lr in self.lr_segments:
            end += n
            if iteration <= end:
                return lr
        return self.lr_segments[-1][1]


@dataclass(frozen=True)
class AdamConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    feature: FeatureExtractorConfig = field(default_factory=FeatureExtractorConfig)
    pretrain_loss: LossSpec = field(default_factory=lambda: LossSpec(adversarial_weight=0.0))
    gan_loss: LossSpec = field(default_factory=LossSpec)
    pretrain: TrainSchedule = field(default_factory=TrainSchedule)
    gan: TrainSchedule = field(default_factory=TrainSchedule)
    adam: AdamConfig = field(default_factory=AdamConfig)
    init_seed: int = 0
    feature_seed: int = 0
    feature_weights: str | None = None


def _jsonable(obj):
    if isinstance(obj, tuple):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    return obj


def to_dict(cfg: TrainConfig) -> dict:
    return _jsonable(asdict(cfg))


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise InvalidArgument(f"{where}: expected an object")
    names = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise InvalidArgument(f"unknown config keys in {where}: {unknown}")
    kwargs = {}
    for key, value in data.items():
        sub = _SECTIONS.get(names[key].type) if cls is TrainConfig else None
        if sub is not None:
            kwargs[key] = _build(sub, value, f"{where}.{key}")
        else:
            kwargs[key] = tuple(tuple(v) if isinstance(v, list) else v for v in value) \
                if isinstance(value, list) else value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise InvalidArgument(f"{where}: {exc}") from exc


_SECTIONS = {
    "GeneratorConfig": GeneratorConfig,
    "DiscriminatorConfig": DiscriminatorConfig,
    "FeatureExtractorConfig": FeatureExtractorConfig,
    "LossSpec": LossSpec,
    "TrainSchedule": TrainSchedule,
    "AdamConfig": AdamConfig,
}


def from_dict(data: dict) -> TrainConfig:
    return _build(TrainConfig, data, "config")


PRESETS = {
    # full-scale numbers; documented, not desk-runnable
    "full-scale": {
        "gan_loss": {"content": "feature", "tap": [5, 4]},
        "pretrain": {"lr_segments": [[1000000, 1e-4]], "batch_size": 16, "crop": 96},
        "gan": {"lr_segments": [[100000, 1e-4], [100000, 1e-5]], "batch_size": 16, "crop": 96},
    },
    "toy": {
        "generator": {"blocks": 2, "width": 16},
        "discriminator": {"input_size": 32, "widths": [8, 8, 16, 16, 32, 32, 64, 64],
                          "dense_width": 64},
        "feature": {"widths": [8, 16, 32, 64, 64], "tap": [2, 2]},
        "gan_loss": {"content": "feature", "tap": [2, 2]},
        "pretrain": {"lr_segments": [[450, 4e-3], [50, 4e-4]], "batch_size": 16, "crop": 32,
                     "checkpoint_every": 250},
        "gan": {"lr_segments": [[100, 1e-4], [100, 1e-5]], "batch_size": 8, "crop": 32,
                "checkpoint_every": 100},
    },
}


def merge(base: dict, overlay: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in overlay.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def parse_override(text: str) -> tuple[list[str], object]:
    if "=" not in text:
        raise InvalidArgument(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def apply_override(data: dict, path: list[str], value) -> dict:
    out = copy.deepcopy(data)
    node = out
    for part in path[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise InvalidArgument(f"cannot set {'.'.join(path)}: {part} is not a section")
    node[path[-1]] = value
    return out


def load_config(path=None, preset: str | None = None, overrides=(), seed: int | None = None):
    """Resolve preset <- file <- ``--set`` overrides <- ``--seed``.

    Returns ``(TrainConfig, effective_dict)``. A config file may name its
    own ``"preset"``.
    """
    data = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except OSError as exc:
            raise IoError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise InvalidArgument(f"config {path} is not valid JSON: {exc}") from exc
    preset = data.pop("preset", None) or preset
    base = {}
    if preset is not None:
        if preset not in PRESETS:
            raise InvalidArgument(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        base = PRESETS[preset]
    merged = merge(base, data)
    for text in overrides:
        merged = apply_override(merged, *parse_override(text))
    cfg = from_dict(merged)
    if seed is not None:
        cfg = replace(cfg, init_seed=seed,
                      pretrain=replace(cfg.pretrain, seed=seed), gan=replace(cfg.gan, seed=seed))
    effective = to_dict(cfg)
    if preset is not None:
        effective["preset"] = preset
    return cfg, effective

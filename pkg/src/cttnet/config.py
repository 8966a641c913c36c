"""Experiment configuration: named profiles plus strict JSON loading."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .ctt import FusionMode, ModelConfig
from .data import AugmentationPolicy
from .objectives import LossConfig


class ConfigError(ValueError):
    """Invalid or unknown configuration content."""


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-3
    momentum: float = 0.9
    decay: float = 0.1
    decay_interval: int = 1000
    iterations: int = 3000
    batch_size: int = 16
    eval_interval: int = 100

    def __post_init__(self):
        if self.lr <= 0 or not 0 <= self.momentum < 1:
            raise ValueError("lr must be positive and momentum in [0, 1)")
        if self.decay <= 0 or self.decay_interval < 1:
            raise ValueError("decay must be positive and decay_interval >= 1")
        if self.iterations < 1 or self.batch_size < 1 or self.eval_interval < 1:
            raise ValueError("iterations, batch_size and eval_interval must be >= 1")


@dataclass(frozen=True)
class DataConfig:
    manifest: Optional[str] = None
    synthetic_count: int = 512
    synthetic_seed: int = 0
    augmentation: AugmentationPolicy = field(default_factory=AugmentationPolicy.identity)
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.synthetic_count < 1:
            raise ValueError("synthetic_count must be >= 1")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must lie in [0, 1)")


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0
    folds: int = 5
    output_dir: str = "runs/default"

    def __post_init__(self):
        if self.folds < 2:
            raise ValueError("folds must be >= 2")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["model"] = self.model.to_dict()
        return d

    def replace(self, **sections) -> "ExperimentConfig":
        """Return a copy with top-level fields or ``section__field`` overrides applied."""
        top, nested = {}, {}
        for key, value in sections.items():
            if "__" in key:
                sec, name = key.split("__", 1)
                nested.setdefault(sec, {})[name] = value
            else:
                top[key] = value
        for sec, changes in nested.items():
            top[sec] = dataclasses.replace(top.get(sec, getattr(self, sec)), **changes)
        return dataclasses.replace(self, **top)


def full_profile() -> ExperimentConfig:
    """Hyperparameters reported for the full-size model (256x256 inputs)."""
    return ExperimentConfig(
        model=ModelConfig(
            image_size=(256, 256),
            downsample_factor=32,
            channels=(64, 64, 128, 256, 512),
            dim=128,
            layers=12,
            heads=4,
            cross_layer_start=6,
        ),
        loss=LossConfig(lam=2.0, threshold=0.2),
        optim=OptimConfig(lr=1e-3, momentum=0.9, decay=0.1, decay_interval=1000, iterations=3000, batch_size=16),
        data=DataConfig(augmentation=AugmentationPolicy()),
        output_dir="runs/full",
    )


def desk_profile() -> ExperimentConfig:
    """Small model that trains on one CPU core in well under a minute per run."""
    return ExperimentConfig(
        model=ModelConfig(
            image_size=(64, 64),
            downsample_factor=32,
            channels=(8, 16, 16, 32, 32),
            dim=32,
            layers=4,
            heads=2,
            cross_layer_start=2,
        ),
        loss=LossConfig(lam=2.0, threshold=0.2),
        optim=OptimConfig(lr=3e-3, momentum=0.9, decay=0.1, decay_interval=200, iterations=300, batch_size=16, eval_interval=50),
        data=DataConfig(synthetic_count=512),
        output_dir="runs/desk",
    )


def micro_profile() -> ExperimentConfig:
    """Gradient-check sized model."""
    return ExperimentConfig(
        model=ModelConfig(
            image_size=(64, 64),
            downsample_factor=32,
            channels=(2, 2, 4, 4, 4),
            dim=16,
            layers=2,
            heads=2,
            cross_layer_start=1,
            ffn_mult=2,
        ),
        optim=OptimConfig(lr=1e-2, iterations=20, batch_size=4, decay_interval=10, eval_interval=10),
        data=DataConfig(synthetic_count=16),
        folds=2,
        output_dir="runs/micro",
    )


PROFILES = {"full": full_profile, "desk": desk_profile, "micro": micro_profile}


def _build(cls, base, overrides: Any, where: str):
    if not isinstance(overrides, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(overrides) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}")
    values = {f.name: getattr(base, f.name) for f in dataclasses.fields(cls)}
    for key, val in overrides.items():
        if cls is DataConfig and key == "augmentation":
            val = _build(AugmentationPolicy, base.augmentation, val, f"{where}.augmentation")
        elif isinstance(val, list):
            val = tuple(val)
        values[key] = val
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def config_from_dict(doc: dict) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config root must be an object")
    allowed = {"profile", "model", "loss", "optim", "data", "seed", "folds", "output_dir"}
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {unknown}")
    profile = doc.get("profile", "desk")
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    base = PROFILES[profile]()
    sections = {
        "model": _build(ModelConfig, base.model, doc.get("model", {}), "model"),
        "loss": _build(LossConfig, base.loss, doc.get("loss", {}), "loss"),
        "optim": _build(OptimConfig, base.optim, doc.get("optim", {}), "optim"),
        "data": _build(DataConfig, base.data, doc.get("data", {}), "data"),
    }
    for key in ("seed", "folds"):
        if key in doc and (not isinstance(doc[key], int) or isinstance(doc[key], bool)):
            raise ConfigError(f"{key} must be an integer")
    try:
        return dataclasses.replace(
            base,
            **sections,
            seed=doc.get("seed", base.seed),
            folds=doc.get("folds", base.folds),
            output_dir=str(doc.get("output_dir", base.output_dir)),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> ExperimentConfig:
    """Read a JSON config; relative ``output_dir`` / ``manifest`` resolve against the file's folder."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    cfg = config_from_dict(doc)
    root = path.parent
    out = Path(cfg.output_dir)
    data = cfg.data
    if data.manifest is not None and not Path(data.manifest).is_absolute():
        data = dataclasses.replace(data, manifest=str(root / data.manifest))
    return dataclasses.replace(cfg, output_dir=str(out if out.is_absolute() else root / out), data=data)


FUSION_CHOICES = [m.value for m in FusionMode]

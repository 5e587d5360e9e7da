"""Dataclass configs and presets."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

VARIANTS = ("full", "wo_sub", "wo_adv", "fs_pooling", "source_only")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    d: int = 32
    n_layers: int = 2
    n_heads: int = 4
    d_head: int = 8
    d_ff: int = 64
    d_video: int = 32
    n_classes: int = 4
    head_hidden: int = 32
    t_max: int = 64
    share_encoder: bool = True
    ln_eps: float = 1e-5

    def validate(self) -> None:
        if self.d < 2 or self.d % 2:
            raise ConfigError(f"d must be even and >= 2, got {self.d}")
        for name in ("n_layers", "n_heads", "d_head", "d_ff", "d_video", "n_classes",
                     "head_hidden", "t_max"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.n_classes < 2:
            raise ConfigError("n_classes must be >= 2")
        if self.ln_eps <= 0:
            raise ConfigError("ln_eps must be positive")


@dataclass
class TrainConfig:
    lambda1: float = 0.05
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 32
    epochs: int = 60
    pseudo_start_epoch: int = 20
    seed: int = 0
    share_encoder: bool = True
    variant: str = "full"
    adv_during_warmup: bool = True
    pseudo_threshold: float | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    preset: str = "desk"
    model: ModelConfig = field(default_factory=ModelConfig)

    def validate(self) -> None:
        if self.lambda1 < 0:
            raise ConfigError("lambda1 must be >= 0")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.batch_size < 2 or self.batch_size % 2:
            raise ConfigError("batch_size must be an even count >= 2 (half source, half target)")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not 0 <= self.pseudo_start_epoch <= self.epochs:
            raise ConfigError("pseudo_start_epoch must lie in [0, epochs]")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        self.model.validate()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def desk_preset(**overrides) -> TrainConfig:
    return _apply(TrainConfig(), overrides)


def paper_preset(**overrides) -> TrainConfig:
    """Full-scale hyperparameters: 2048-d I3D features, 4 layers of 8 heads."""
    cfg = TrainConfig(learning_rate=1e-4, weight_decay=1e-4, batch_size=256, epochs=500,
                      pseudo_start_epoch=100, preset="paper",
                      model=ModelConfig(d=2048, n_layers=4, n_heads=8, d_head=256,
                                        d_ff=2048, d_video=512, n_classes=12,
                                        head_hidden=512, t_max=64))
    return _apply(cfg, overrides)


PRESETS = {"desk": desk_preset, "paper": paper_preset}


def _apply(cfg: TrainConfig, overrides: dict) -> TrainConfig:
    model_over = dict(overrides.pop("model", None) or {})
    for k, v in overrides.items():
        if k not in TrainConfig.__dataclass_fields__:
            raise ConfigError(f"unknown training field {k!r}")
        setattr(cfg, k, v)
    for k, v in model_over.items():
        if k not in ModelConfig.__dataclass_fields__:
            raise ConfigError(f"unknown model field {k!r}")
        setattr(cfg.model, k, v)
    cfg.model.share_encoder = cfg.share_encoder
    return cfg


def train_config_from_dict(data: dict, preset: str | None = None) -> TrainConfig:
    data = dict(data)
    name = preset or data.pop("preset", "desk")
    data.pop("preset", None)
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}")
    cfg = PRESETS[name](**data)
    cfg.validate()
    return cfg


def load_json(path: str | Path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path}: invalid JSON ({exc})") from exc

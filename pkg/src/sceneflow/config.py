"""Flat key = value configuration bundle for the CLI and the training loop."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .denoiser import DenoiserConfig
from .diffusion import DiffusionConfig
from .objective import LossConfig
from .pointcloud import SceneGenConfig


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    iterations: int = 5000
    batch_size: int = 4
    peak_lr: float = 4e-4
    weight_decay: float = 1e-4
    points_train: int = 256
    points_eval: int = 256
    seed: int = 0
    checkpoint_every: int = 1000
    log_every: int = 50
    grad_clip: float = 1.0
    eval_sampling: str = "fps"  # fps | random
    eval_hypotheses: int = 1
    eval_scenes: int = 0  # 0 = all scenes in the dataset

    def __post_init__(self):
        if self.iterations < 1 or self.batch_size < 1:
            raise ConfigError("iterations and batch_size must be positive")
        if self.peak_lr <= 0:
            raise ConfigError("peak_lr must be positive")
        if self.points_train < 1 or self.points_eval < 1:
            raise ConfigError("point counts must be positive")
        if self.eval_sampling not in ("fps", "random"):
            raise ConfigError(f"unknown eval_sampling: {self.eval_sampling!r}")
        if self.eval_hypotheses < 1:
            raise ConfigError("eval_hypotheses must be >= 1")


@dataclass
class Config:
    train: TrainConfig = field(default_factory=TrainConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    scene: SceneGenConfig = field(default_factory=SceneGenConfig)


_SECTIONS = {
    "train": TrainConfig,
    "diffusion": DiffusionConfig,
    "denoiser": DenoiserConfig,
    "loss": LossConfig,
    "scene": SceneGenConfig,
}


def _parse_value(raw: str, typ, key: str):
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError as e:
        raise ConfigError(f"bad value for {key}: {raw!r}") from e


def parse_config(text: str) -> Config:
    """Parse `section.field = value` lines; blank lines and `#` comments are
    skipped, unknown keys are errors."""
    values: dict[str, dict[str, object]] = {name: {} for name in _SECTIONS}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if "." not in key:
            raise ConfigError(f"line {lineno}: key {key!r} is not namespaced")
        section, name = key.split(".", 1)
        cls = _SECTIONS.get(section)
        if cls is None:
            raise ConfigError(f"line {lineno}: unknown section {section!r}")
        fields = {f.name: f for f in dataclasses.fields(cls)}
        if name not in fields:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        typ = fields[name].type
        if isinstance(typ, str):  # stringified annotations
            typ = {"int": int, "float": float, "bool": bool, "str": str}.get(typ, str)
        values[section][name] = _parse_value(raw, typ, key)
    try:
        return Config(**{
            section: cls(**values[section]) for section, cls in _SECTIONS.items()
        })
    except (ValueError, TypeError) as e:
        raise ConfigError(str(e)) from e


def load_config(path: str | Path | None) -> Config:
    if path is None:
        return Config()
    return parse_config(Path(path).read_text(encoding="utf-8"))


def serialize_config(cfg: Config) -> str:
    """Canonical flat text form (sorted keys), used inside checkpoints."""
    lines = []
    for section, sub in (("train", cfg.train), ("diffusion", cfg.diffusion),
                         ("denoiser", cfg.denoiser), ("loss", cfg.loss), ("scene", cfg.scene)):
        for f in dataclasses.fields(sub):
            value = getattr(sub, f.name)
            if isinstance(value, bool):
                value = "true" if value else "false"
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{section}.{f.name} = {value}")
    return "\n".join(sorted(lines)) + "\n"

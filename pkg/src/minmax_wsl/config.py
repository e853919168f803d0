"""Run configuration and the plain-text ``key = value`` file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Tuple, Union

import numpy as np


class ConfigError(ValueError):
    pass


@dataclass
class HyperConfig:
    # mask construction
    omega: float = 8.0
    sigma_prime: float = 0.5
    # recursive erasing
    sigma: float = 10.0
    u: int = 4
    # pooling
    kmax: float = 0.09
    kmin: float = 0.09
    alpha: float = 0.0
    modalities: int = 5
    dropout: float = 0.75
    # optimization
    lr: float = 0.001
    lr_decay: float = 0.1
    lr_step: int = 40
    lr_min: float = 1e-7
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 1e-5
    max_epochs: int = 400
    patience: int = 0
    batch_size: int = 8
    # loss term weights, kept at 1 outside ablations
    w_pos: float = 1.0
    w_neg: float = 1.0
    w_sec: float = 1.0
    # model / data
    seed: int = 0
    image_size: int = 64
    num_classes: int = 2
    in_channels: int = 3
    channels: Tuple[int, ...] = (16, 32, 64, 64)
    strides: Tuple[int, ...] = (1, 2, 2, 2)
    shared_backbone: bool = True
    precision: str = "float32"
    augment: Tuple[str, ...] = ("hflip", "vflip", "rot90")
    valid_fraction: float = 0.2
    data_dir: str = ""
    out_dir: str = ""

    def __post_init__(self) -> None:
        self.channels = tuple(int(c) for c in self.channels)
        self.strides = tuple(int(s) for s in self.strides)
        self.augment = tuple(self.augment)
        self.validate()

    def validate(self) -> None:
        checks = [
            (self.omega > 0, "omega must be > 0"),
            (self.sigma > 0, "sigma must be > 0"),
            (self.u >= 0, "u must be >= 0"),
            (0 < self.kmax <= 1, "kmax must be in (0, 1]"),
            (0 < self.kmin <= 1, "kmin must be in (0, 1]"),
            (self.alpha >= 0, "alpha must be >= 0"),
            (self.modalities >= 1, "modalities must be >= 1"),
            (0 <= self.dropout < 1, "dropout must be in [0, 1)"),
            (self.lr > 0, "lr must be > 0"),
            (0 < self.lr_decay <= 1, "lr_decay must be in (0, 1]"),
            (self.lr_step >= 1, "lr_step must be >= 1"),
            (0 <= self.lr_min <= self.lr, "lr_min must be in [0, lr]"),
            (0 <= self.momentum < 1, "momentum must be in [0, 1)"),
            (self.weight_decay >= 0, "weight_decay must be >= 0"),
            (self.max_epochs >= 1, "max_epochs must be >= 1"),
            (self.patience >= 0, "patience must be >= 0"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (min(self.w_pos, self.w_neg, self.w_sec) >= 0, "loss weights must be >= 0"),
            (self.num_classes >= 2, "num_classes must be >= 2"),
            (self.in_channels >= 1, "in_channels must be >= 1"),
            (len(self.channels) == len(self.strides) >= 1, "channels and strides must have equal length"),
            (self.image_size >= self.total_stride, "image_size must be >= the backbone stride"),
            (self.precision in ("float32", "float64"), "precision must be float32 or float64"),
            (set(self.augment) <= {"hflip", "vflip", "rot90"}, "augment ops must be among hflip, vflip, rot90"),
            (0 < self.valid_fraction < 1, "valid_fraction must be in (0, 1)"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    @property
    def total_stride(self) -> int:
        return int(np.prod(self.strides))

    @property
    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64

    def lr_at(self, epoch: int) -> float:
        """Step schedule: decay by ``lr_decay`` every ``lr_step`` epochs, floored at ``lr_min``."""
        return max(self.lr * self.lr_decay ** (epoch // self.lr_step), self.lr_min)

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "HyperConfig":
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> "HyperConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(values) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**values)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "HyperConfig":
        return cls.from_dict(coerce(cls, read_kv(path)))


def read_kv(path: Union[str, Path]) -> Dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment, blank lines are skipped."""
    out: Dict[str, str] = {}
    text = Path(path).read_text()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key")
        out[key] = value
    return out


def write_kv(path: Union[str, Path], values: Dict[str, Any]) -> None:
    lines = []
    for key, value in values.items():
        if isinstance(value, (tuple, list)):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key} = {value}")
    Path(path).write_text("\n".join(lines) + "\n")


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def coerce(cls, raw: Dict[str, str]) -> Dict[str, Any]:
    """Convert string values to the types of ``cls``'s dataclass fields."""
    defaults = {f.name: f for f in dataclasses.fields(cls)}
    out: Dict[str, Any] = {}
    for key, text in raw.items():
        if key not in defaults:
            raise ConfigError(f"unknown config key {key!r}")
        f = defaults[key]
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        try:
            if isinstance(default, bool):
                out[key] = _parse_bool(text)
            elif isinstance(default, int):
                out[key] = int(text)
            elif isinstance(default, float):
                out[key] = float(text)
            elif isinstance(default, tuple):
                items = [s.strip() for s in text.split(",") if s.strip()]
                if default and isinstance(default[0], int):
                    out[key] = tuple(int(s) for s in items)
                elif default and isinstance(default[0], tuple):
                    out[key] = tuple(tuple(s.split(":")) for s in items)
                else:
                    out[key] = tuple(items)
            else:
                out[key] = text
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"bad value for {key}: {text!r}") from None
    return out


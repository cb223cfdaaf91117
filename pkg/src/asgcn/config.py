"""Run configuration: dataclass sections, TOML loading and validation.

Values resolve as CLI > TOML file > preset defaults. Every field is checked
before any compute starts and unknown keys are rejected.
"""
from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .aim import AimConfig
from .errors import ConfigurationError
from .network import FULL_BLOCKS, TOY_BLOCKS, ModelConfig
from .training import TrainConfig


@dataclass
class DataSection:
    graph: str = "ntu25"
    train: Optional[str] = None
    val: Optional[str] = None
    test: Optional[str] = None
    center: bool = True


@dataclass
class ModelSection:
    blocks: str = "full"
    num_classes: int = 60
    T: int = 300
    L: int = 1
    links: str = "as"
    lam: float = 0.5
    form: str = "convex"
    kernel_family: str = "transition"
    horizon: int = 10
    prediction_head: bool = True
    C: int = 3
    P0: float = 0.95
    tau: float = 0.5
    sigma2: float = 5e-3
    aim_frames: int = 50
    aim_hidden: int = 128
    aim_dec_hidden: int = 64


@dataclass
class TrainSection:
    epochs: int = 100
    batch_size: int = 32
    lr: float = 0.1
    lr_decay: float = 0.1
    lr_interval: int = 20
    momentum: float = 0.9
    aim_epochs: int = 10
    aim_lr: float = 5e-4
    alpha: float = 1.0
    seed: int = 0
    dtype: str = "float32"
    timing: bool = True


@dataclass
class RunConfig:
    preset: str = "paper"
    out: str = "runs/default"
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)

    def model_config(self) -> ModelConfig:
        m = self.model
        blocks = {"full": FULL_BLOCKS, "toy": TOY_BLOCKS}[m.blocks]
        return ModelConfig(n=_graph_n(self.data.graph), num_classes=m.num_classes, T=m.T,
                           blocks=blocks, L=m.L, links=m.links, lam=m.lam, form=m.form,
                           kernel_family=m.kernel_family, horizon=m.horizon,
                           prediction_head=m.prediction_head)

    def aim_config(self) -> AimConfig:
        m = self.model
        return AimConfig(C=m.C, P0=m.P0, tau=m.tau, sigma2=m.sigma2, frames=m.aim_frames,
                         hidden=m.aim_hidden, dec_hidden=m.aim_dec_hidden)

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(**dataclasses.asdict(t))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


SECTIONS = {"data": DataSection, "model": ModelSection, "train": TrainSection}

PRESETS: Dict[str, Dict[str, Dict[str, Any]]] = {
    "paper": {},
    "toy": {
        "data": {"graph": "star4x7"},
        "model": {"blocks": "toy", "num_classes": 4, "T": 32, "L": 2, "aim_frames": 32,
                  "aim_hidden": 32, "aim_dec_hidden": 16},
        "train": {"epochs": 20, "lr": 0.05, "lr_interval": 10, "aim_epochs": 5},
    },
}


def _graph_n(spec: str) -> int:
    from .graph import resolve_graph
    return resolve_graph(spec).n


def _coerce(section: str, name: str, ftype, value):
    kind = ftype if isinstance(ftype, str) else getattr(ftype, "__name__", str(ftype))
    try:
        if "bool" in kind:
            if isinstance(value, bool):
                return value
            if isinstance(value, str) and value.lower() in ("true", "1", "yes", "false", "0", "no"):
                return value.lower() in ("true", "1", "yes")
            raise ValueError(value)
        if "Optional" in kind or "None" in kind:
            return None if value is None else str(value)
        if "int" in kind:
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError(value)
            return int(value)
        if "float" in kind:
            if isinstance(value, bool):
                raise ValueError(value)
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigurationError(f"{section}.{name}: cannot interpret {value!r} as {kind}") from None


def _apply(cfg: RunConfig, overrides: Dict[str, Any], origin: str) -> None:
    for key, value in overrides.items():
        if key in ("preset", "out"):
            setattr(cfg, key, str(value))
            continue
        if key not in SECTIONS:
            raise ConfigurationError(f"{origin}: unknown key {key!r}")
        if not isinstance(value, dict):
            raise ConfigurationError(f"{origin}: [{key}] must be a table")
        section = getattr(cfg, key)
        known = {f.name: f.type for f in fields(section)}
        for name, v in value.items():
            if name not in known:
                raise ConfigurationError(f"{origin}: unknown key {key}.{name}")
            setattr(section, name, _coerce(key, name, known[name], v))


def read_toml(path) -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        return tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError(f"{path}: {exc}") from exc


def resolve_config(file_values: Optional[Dict[str, Any]] = None,
                   cli_values: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Preset defaults, then the file, then CLI overrides (nested dicts)."""
    file_values = dict(file_values or {})
    cli_values = dict(cli_values or {})
    preset = cli_values.get("preset", file_values.get("preset", "paper"))
    if preset not in PRESETS:
        raise ConfigurationError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    cfg = RunConfig(preset=preset)
    _apply(cfg, PRESETS[preset], f"preset {preset}")
    _apply(cfg, file_values, "config file")
    _apply(cfg, cli_values, "command line")
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    m, t = cfg.model, cfg.train
    checks = [
        (m.blocks in ("full", "toy"), f"model.blocks must be full or toy, got {m.blocks!r}"),
        (m.num_classes >= 2, "model.num_classes must be >= 2"),
        (m.T >= 1, "model.T must be >= 1"),
        (t.epochs >= 1, "train.epochs must be >= 1"),
        (t.batch_size >= 2, "train.batch_size must be >= 2"),
        (t.lr > 0 and t.aim_lr > 0, "learning rates must be positive"),
        (0 < t.lr_decay <= 1, "train.lr_decay must lie in (0, 1]"),
        (t.lr_interval >= 1, "train.lr_interval must be >= 1"),
        (0 <= t.momentum < 1, "train.momentum must lie in [0, 1)"),
        (t.aim_epochs >= 0, "train.aim_epochs must be >= 0"),
        (t.dtype in ("float32", "float64"), "train.dtype must be float32 or float64"),
        (t.seed >= 0, "train.seed must be non-negative"),
    ]
    for ok, msg in checks:
        if not ok:
            raise ConfigurationError(msg)
    # construct the derived configs so their own checks run up front
    cfg.model_config()
    cfg.aim_config()
    cfg.train_config()


def field_help() -> Dict[str, list]:
    """(section, name, type, default) for every configurable field."""
    out = {}
    for sec, cls in SECTIONS.items():
        out[sec] = [(f.name, f.type if isinstance(f.type, str) else f.type.__name__, f.default)
                    for f in fields(cls)]
    return out

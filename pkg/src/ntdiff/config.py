"""
Experiment configuration: nested dataclasses, YAML files, dotted overrides.

Precedence is command line > config file > defaults. Overrides use dotted
paths (``train.lr_max=3e-4`` or ``--train.lr_max 3e-4``) and values are
parsed as YAML scalars, so numbers, booleans and lists work as expected.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Iterable

import yaml

from .errors import ConfigError


@dataclass
class DataSection:
    csv: str | None = None
    synthetic: bool = False
    num_segments: int = 20  # synthetic only
    motion: str = "through_center"
    synthetic_sigma_px: float = 1.5
    bbox: list[float] = field(default_factory=lambda: [24.0, 50.0, -125.0, -66.0])  # lat_min, lat_max, lon_min, lon_max
    resolution: list[int] = field(default_factory=lambda: [128, 128])
    segment_length: int = 28
    stride: int = 1
    ratios: list[float] = field(default_factory=lambda: [0.70, 0.15, 0.15])
    b_lo: float = 300.0
    b_hi: float = 500.0
    sigma_min_px: float = 1.0
    sigma_max_px: float = 4.0
    normalization: str = "global"
    percentile: float = 99.9
    min_confidence: float | None = None


@dataclass
class ModelSection:
    base_channels: int = 32
    depth: int = 3
    embed_dim: int = 64
    film_per_level: bool = False


@dataclass
class DiffusionSection:
    D_train: int = 1000
    D_test: int = 10
    beta_start: float = 1e-4
    beta_end: float = 0.02
    mode: str = "auto"


@dataclass
class TreeSection:
    L: int = 4
    branching: list[int] | None = None


@dataclass
class TrainSection:
    epochs: int = 10
    max_steps: int | None = None
    batch_size: int = 4
    lr_max: float = 1e-4
    lr_min: float = 1e-6
    weight_decay: float = 0.01
    p_tree: float = 0.8
    val_interval: int = 0
    val_max_segments: int = 8
    checkpoint_interval: int = 0


@dataclass
class PathsSection:
    dataset: str = "runs/data"
    checkpoints: str = "runs/ckpt"
    output: str = "runs/out"


@dataclass
class ExperimentConfig:
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    diffusion: DiffusionSection = field(default_factory=DiffusionSection)
    tree: TreeSection = field(default_factory=TreeSection)
    train: TrainSection = field(default_factory=TrainSection)
    paths: PathsSection = field(default_factory=PathsSection)
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def horizons(self) -> int:
        return self.data.segment_length - 1

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _build(cls, values: dict, where: str):
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, val in values.items():
        if key not in known:
            raise ConfigError(f"unknown config key {where}{key}")
        default = getattr(cls(), key)
        if is_dataclass(default):
            if not isinstance(val, dict):
                raise ConfigError(f"{where}{key} must be a mapping")
            kwargs[key] = _build(type(default), val, f"{where}{key}.")
        else:
            kwargs[key] = _coerce(val, str(known[key].type), f"{where}{key}")
    return cls(**kwargs)


def _coerce(val, type_name: str, where: str):
    # PyYAML reads "1e-4" as a string; numeric fields accept it anyway
    if val is None or not isinstance(val, str):
        if type_name.startswith("float") and isinstance(val, int) and not isinstance(val, bool):
            return float(val)
        return val
    for name, conv in (("float", float), ("int", int)):
        if type_name.startswith(name):
            try:
                return conv(val)
            except ValueError as exc:
                raise ConfigError(f"{where}: expected {name}, got {val!r}") from exc
    return val


def from_dict(doc: dict | None) -> ExperimentConfig:
    return _build(ExperimentConfig, doc or {}, "")


def parse_override(item: str) -> tuple[str, Any]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like key.path=value")
    key, raw = item.split("=", 1)
    try:
        value = yaml.safe_load(raw) if raw != "" else None
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse value for {key}: {exc}") from exc
    return key.strip(), value


def _set_dotted(doc: dict, key: str, value: Any) -> None:
    parts = key.split(".")
    node = doc
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"{key}: {p} is not a section")
    node[parts[-1]] = value


def load_config(path: str | Path | None = None, overrides: Iterable[str] = ()) -> ExperimentConfig:
    doc = ExperimentConfig().to_dict()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        loaded = yaml.safe_load(path.read_text()) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        _merge(doc, loaded, str(path) + ": ")
    for item in overrides:
        key, value = parse_override(item)
        _set_dotted(doc, key, value)
    return from_dict(doc)


def _merge(base: dict, new: dict, where: str) -> None:
    for k, v in new.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _merge(base[k], v, where)
        else:
            base[k] = v

"""Experiment configuration: dataclass sections plus a ``key = <json>`` text format.

A config file holds one dotted key per line::

    # comments and blank lines are ignored
    noise.rate = 0.6
    routing.strategy = "clean"
    seeds = [0, 1, 2]

Values are JSON; a bare word that is not valid JSON is taken as a string.
"""
from __future__ import annotations

import dataclasses
import hashlib
import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .model import ModelConfig
from .noise import NoiseSpec
from .router import RoutingPolicy
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    source: str = "synthetic"  # or "tsv"
    num_classes: int = 5
    n_train: int = 5000
    n_test: int = 1000
    seq_len: int = 12
    difficulty: float = 0.5
    seed: int = 0
    train_path: str = ""
    test_path: str = ""

    def __post_init__(self):
        if self.source not in ("synthetic", "tsv"):
            raise ConfigError(f"data.source must be 'synthetic' or 'tsv', got {self.source!r}")
        if self.source == "tsv" and not (self.train_path and self.test_path):
            raise ConfigError("data.train_path and data.test_path are required when data.source is 'tsv'")


@dataclass
class PretrainConfig:
    steps: int = 1000
    lr: float = 1e-3
    batch_size: int = 64
    seed: int = 0
    cache: bool = True

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError("pretrain.steps must be >= 0")


SECTIONS = {
    "data": DataConfig,
    "model": ModelConfig,
    "pretrain": PretrainConfig,
    "train": TrainConfig,
    "noise": NoiseSpec,
    "routing": RoutingPolicy,
}
METHODS = ("clear", "baseline")


@dataclass
class ExperimentConfig:
    name: str = "run"
    method: str = "clear"
    seeds: list[int] = field(default_factory=lambda: [0])
    out: str = "runs"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    routing: RoutingPolicy = field(default_factory=RoutingPolicy)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be a non-empty list of distinct integers")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def for_seed(self, seed: int) -> "ExperimentConfig":
        """Resolved single-seed config: the seed drives init, batch order, routing and noise."""
        return from_dict({**flatten(self.to_dict()), "seeds": [seed],
                          "train.seed": seed, "noise.seed": seed})

    def fingerprint(self) -> str:
        return hashlib.sha256(dumps(self).encode()).hexdigest()[:16]


def valid_keys() -> list[str]:
    return sorted(flatten(ExperimentConfig().to_dict()))


def flatten(d: dict, prefix: str = "") -> dict[str, Any]:
    out: dict[str, Any] = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _build(cls, values: dict, section: str):
    try:
        return cls(**values)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [{section}] settings: {exc}") from exc


def from_dict(flat: dict[str, Any]) -> ExperimentConfig:
    """Build from dotted keys; unknown keys are an error listing the valid ones."""
    keys = set(valid_keys())
    unknown = sorted(set(flat) - keys)
    if unknown:
        raise ConfigError(f"unknown config key(s) {unknown}; valid keys: {', '.join(sorted(keys))}")
    defaults = flatten(ExperimentConfig().to_dict())
    merged = {**defaults, **flat}
    sections = {}
    for name, cls in SECTIONS.items():
        vals = {k.split(".", 1)[1]: v for k, v in merged.items() if k.startswith(name + ".")}
        sections[name] = _build(cls, vals, name)
    top = {k: v for k, v in merged.items() if "." not in k}
    if not isinstance(top["seeds"], list) or not all(isinstance(s, int) for s in top["seeds"]):
        raise ConfigError(f"seeds must be a list of integers, got {top['seeds']!r}")
    return _build(ExperimentConfig, {**top, **sections}, "top level")


def parse_value(text: str) -> Any:
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_lines(text: str, source: str = "<config>") -> dict[str, Any]:
    flat: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        flat[key.strip()] = parse_value(value)
    return flat


def parse_overrides(pairs: list[str]) -> dict[str, Any]:
    """``["train.lr=0.001", ...]`` to a dotted-key dict."""
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override must look like key=value, got {pair!r}")
        k, v = pair.split("=", 1)
        out[k.strip()] = parse_value(v)
    return out


def loads(text: str, overrides: dict[str, Any] | None = None, source: str = "<config>") -> ExperimentConfig:
    flat = parse_lines(text, source)
    grid = [k for k in flat if k.startswith("grid.")]
    if grid:
        raise ConfigError(f"{source}: grid keys {grid} belong in an ablation grid file")
    return from_dict({**flat, **(overrides or {})})


def load(path: str | Path, overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return loads(path.read_text(encoding="utf-8"), overrides, str(path))


def dumps(cfg: ExperimentConfig) -> str:
    return "".join(f"{k} = {json.dumps(v)}\n" for k, v in sorted(flatten(cfg.to_dict()).items()))


def load_grid(path: str | Path, overrides: dict[str, Any] | None = None) -> list[tuple[dict, ExperimentConfig]]:
    """Expand ``grid.<key> = [v1, v2, ...]`` lines into the cartesian product of configs.

    Returns (cell assignment, config) pairs in file order of the grid keys.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"grid file not found: {path}")
    flat = {**parse_lines(path.read_text(encoding="utf-8"), str(path)), **(overrides or {})}
    axes = {k[5:]: v for k, v in flat.items() if k.startswith("grid.")}
    if not axes:
        raise ConfigError(f"{path}: no grid.<key> lines")
    for k, v in axes.items():
        if not isinstance(v, list) or not v:
            raise ConfigError(f"grid.{k} must be a non-empty list")
    fixed = {k: v for k, v in flat.items() if not k.startswith("grid.")}
    cells = []
    for combo in itertools.product(*axes.values()):
        cell = dict(zip(axes, combo))
        cells.append((cell, from_dict({**fixed, **cell})))
    return cells

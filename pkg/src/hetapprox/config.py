"""Run configuration: nested dataclasses loaded from JSON, unknown keys rejected."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .agn_search import NoiseConfig
from .errors import ConfigError

PAPER_LAMBDAS = [round(0.05 * i, 2) for i in range(13)]


@dataclass
class DataConfig:
    source: str = "synthetic"  # "synthetic" or "idx"
    classes: int = 10
    per_class: int = 300
    dim: list = field(default_factory=lambda: [1, 12, 12])
    noise: float = 0.3
    separation: float = 6.0
    images: str | None = None
    labels: str | None = None
    fractions: list = field(default_factory=lambda: [0.8, 0.15, 0.05])
    seed: int = 0

    def __post_init__(self):
        if self.source not in ("synthetic", "idx"):
            raise ConfigError(f"data.source must be 'synthetic' or 'idx', got {self.source!r}")
        if self.source == "idx" and not (self.images and self.labels):
            raise ConfigError("data.images and data.labels are required for source 'idx'")


@dataclass
class TrainConfig:
    epochs: int = 15
    lr: float = 0.05
    decay: float = 0.5
    decay_every: int = 10
    momentum: float = 0.9
    batch_size: int = 64


@dataclass
class RetrainConfig:
    epochs: int = 5
    lr: float = 1e-3
    decay: float = 0.9
    decay_every: int = 2
    momentum: float = 0.0
    batch_size: int = 64


@dataclass
class RunConfig:
    arch: str = "cnn"
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    retrain: RetrainConfig = field(default_factory=RetrainConfig)
    library: str = "builtin"
    lambdas: list = field(default_factory=lambda: list(PAPER_LAMBDAS))
    seed: int = 0
    k_samples: int = 512
    uniform_baselines: bool = True
    output_dir: str = "runs"

    def __post_init__(self):
        if self.arch not in ("cnn", "mlp"):
            raise ConfigError(f"arch must be 'cnn' or 'mlp', got {self.arch!r}")
        if not self.lambdas:
            raise ConfigError("lambda grid is empty")
        for lam in self.lambdas:
            if not isinstance(lam, (int, float)) or lam < 0:
                raise ConfigError(f"lambda values must be >= 0, got {lam!r}")
        if self.k_samples < 1:
            raise ConfigError("k_samples must be >= 1")
        if not self.library:
            raise ConfigError("library must name 'builtin' or a library directory")

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        return _build(cls, d, "")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def with_overrides(self, overrides: dict) -> RunConfig:
        """Apply dotted-key overrides such as ``{"noise.lam": 0.3}``."""
        d = self.to_dict()
        for key, value in overrides.items():
            node = d
            parts = key.split(".")
            for p in parts[:-1]:
                if p not in node or not isinstance(node[p], dict):
                    raise ConfigError(f"unknown config key {key!r}")
                node = node[p]
            if parts[-1] not in node:
                raise ConfigError(f"unknown config key {key!r}")
            node[parts[-1]] = value
        return RunConfig.from_dict(d)


def _build(cls, d, prefix):
    if not isinstance(d, dict):
        raise ConfigError(f"config section {prefix or '<root>'} must be an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(d) - set(fields)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(prefix + k for k in unknown)}")
    kwargs = {}
    for name, value in d.items():
        sub = _SECTIONS.get(name) if cls is RunConfig else None
        kwargs[name] = _build(sub, value, f"{prefix}{name}.") if sub else value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


_SECTIONS = {"data": DataConfig, "train": TrainConfig, "noise": NoiseConfig, "retrain": RetrainConfig}


def load_config(path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    return RunConfig.from_dict(raw)

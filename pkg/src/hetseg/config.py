"""Run configuration: one JSON file composing every sub-config.

Precedence is command-line flags, then the config file, then defaults.
"""

from __future__ import annotations

import json
from dataclasses import MISSING, asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path

from .core import DEFAULT_THRESHOLD, ConfigError
from .model import ModelConfig
from .phantom import PhantomConfig
from .trainer import TrainConfig


def config_from_dict(cls, doc: dict):
    """Rebuild a (possibly nested) frozen dataclass from ``asdict`` output."""
    if not isinstance(doc, dict):
        raise ConfigError(f"{cls.__name__}: expected an object, got {type(doc).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"{cls.__name__}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for f in fields(cls):
        if f.name not in doc:
            continue
        value = doc[f.name]
        default = f.default_factory() if f.default_factory is not MISSING else f.default
        if is_dataclass(default) and isinstance(value, dict):
            value = config_from_dict(type(default), value)
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[f.name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{cls.__name__}: {exc}") from None


@dataclass(frozen=True)
class MetricOptions:
    connectivity: int = 26
    min_overlap_voxels: int = 1
    threshold: float = DEFAULT_THRESHOLD
    overlap: float = 0.5

    def __post_init__(self):
        if self.connectivity not in (6, 18, 26):
            raise ConfigError("connectivity must be 6, 18 or 26")
        if self.min_overlap_voxels < 1:
            raise ConfigError("min_overlap_voxels must be >= 1")
        if not 0 < self.threshold < 1:
            raise ConfigError("threshold must lie in (0, 1)")

    def metric_kwargs(self) -> dict:
        return {
            "connectivity": self.connectivity,
            "min_overlap_voxels": self.min_overlap_voxels,
            "threshold": self.threshold,
        }


def _desk_phantom() -> PhantomConfig:
    from .experiments import DESK_PHANTOM

    return DESK_PHANTOM


def _desk_train() -> TrainConfig:
    return TrainConfig(n_epoch=200, folds=5)


@dataclass(frozen=True)
class RunConfig:
    phantom: PhantomConfig = field(default_factory=_desk_phantom)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=_desk_train)
    metrics: MetricOptions = field(default_factory=MetricOptions)
    n_subjects: int = 20
    test_fraction: float = 0.3
    series_subjects: int = 4
    series_timepoints: int = 4
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> RunConfig:
        return config_from_dict(cls, doc)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> RunConfig:
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_dict(doc)

    def with_seed(self, seed: int) -> RunConfig:
        """Propagate one seed to data synthesis and training."""
        return replace(
            self,
            seed=seed,
            phantom=replace(self.phantom, seed=seed),
            train=replace(self.train, seed=seed),
        )

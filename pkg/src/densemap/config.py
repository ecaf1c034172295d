"""Run configuration: nested dataclasses loaded from YAML."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any

import yaml

from .fusion import FusionPolicy
from .integrator import IntegratorConfig
from .submaps import SpawnPolicy


class ConfigError(ValueError):
    pass


@dataclass
class SolverConfig:
    max_iterations: int = 50
    tolerance: float = 1e-8


@dataclass
class PipelineConfig:
    voxel_size: float = 0.02
    block_size: int = 16
    integrator: IntegratorConfig = field(default_factory=IntegratorConfig)
    spawn: SpawnPolicy = field(default_factory=SpawnPolicy)
    fusion: FusionPolicy = field(default_factory=FusionPolicy)
    solver: SolverConfig = field(default_factory=SolverConfig)
    fusion_enabled: bool = True
    naive: bool = False  # one global volume, no re-posing: the drift baseline
    compare_integrators: bool = False
    thread_count: int = 1
    output_dir: Path = Path("out")

    def validate(self) -> None:
        if self.voxel_size <= 0:
            raise ConfigError("voxel_size must be positive")
        if self.block_size < 2:
            raise ConfigError("block_size must be >= 2")
        if self.thread_count < 1:
            raise ConfigError("thread_count must be >= 1")
        self.integrator.thread_count = self.thread_count
        try:
            self.integrator.validate(self.voxel_size)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.solver.max_iterations < 1 or self.solver.tolerance <= 0:
            raise ConfigError("solver needs positive iterations and tolerance")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["output_dir"] = str(self.output_dir)
        return d


def _build(cls, data: dict[str, Any], where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping")
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"{where}: unknown key {key!r}")
        default = getattr(cls(), key) if key in known else None
        if is_dataclass(default):
            kwargs[key] = _build(type(default), value or {}, f"{where}.{key}")
        elif isinstance(default, Path):
            kwargs[key] = Path(value)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def config_from_dict(data: dict | None) -> PipelineConfig:
    cfg = _build(PipelineConfig, data or {}, "config")
    cfg.validate()
    return cfg


def load_config(path: str | Path | None) -> PipelineConfig:
    if path is None:
        return config_from_dict({})
    try:
        data = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(data)

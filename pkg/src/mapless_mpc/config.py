"""Run configuration: YAML with one section per component, validated on load."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .dynamics import ModelParams
from .errors import ConfigError
from .perception import PerceptionConfig
from .planner import MpcConfig
from .simenv import ABLATIONS, TrialConfig


@dataclass(frozen=True)
class SceneSpec:
    source: str = "generated"
    path: str | None = None
    bounds: tuple = (50.0, 30.0)
    density: float = 1.0 / 25.0
    seed: int = 0

    def __post_init__(self):
        if self.source not in ("generated", "file"):
            raise ValueError("source must be 'generated' or 'file'")
        if self.source == "file" and not self.path:
            raise ValueError("source 'file' requires a path")
        if self.density < 0:
            raise ValueError("density must be >= 0")
        object.__setattr__(self, "bounds", tuple(float(b) for b in self.bounds))


@dataclass(frozen=True)
class BenchmarkSpec:
    speeds: tuple = (2.0, 5.0, 7.0, 10.0, 12.0)
    trials: int = 10
    scene_seeds: tuple = tuple(range(10))
    ablations: tuple = ("baseline",)
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "speeds", tuple(float(s) for s in self.speeds))
        object.__setattr__(self, "scene_seeds", tuple(int(s) for s in self.scene_seeds))
        object.__setattr__(self, "ablations", tuple(str(a) for a in self.ablations))
        if any(s <= 0 for s in self.speeds):
            raise ValueError("speeds must be positive")
        if self.trials < 0:
            raise ValueError("trials must be >= 0")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        unknown = [a for a in self.ablations if a not in ABLATIONS]
        if unknown:
            raise ValueError(f"unknown ablations {unknown}; choose from {sorted(ABLATIONS)}")


@dataclass(frozen=True)
class RunConfig:
    mpc: MpcConfig = field(default_factory=MpcConfig)
    model: ModelParams = field(default_factory=ModelParams)
    perception: PerceptionConfig = field(default_factory=PerceptionConfig)
    trial: TrialConfig = field(default_factory=TrialConfig)
    scene: SceneSpec = field(default_factory=SceneSpec)
    benchmark: BenchmarkSpec = field(default_factory=BenchmarkSpec)
    output_dir: str = "out"


SECTIONS = {
    "mpc": MpcConfig,
    "model": ModelParams,
    "perception": PerceptionConfig,
    "trial": TrialConfig,
    "scene": SceneSpec,
    "benchmark": BenchmarkSpec,
}


def _plain(value):
    if isinstance(value, np.ndarray):
        return [float(v) for v in value]
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    return value


def _build_section(name: str, cls, data) -> object:
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"section '{name}' must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in '{name}': {', '.join(unknown)}")
    defaults = cls()
    kwargs = {}
    for key, val in data.items():
        ref = getattr(defaults, key)
        try:
            if isinstance(ref, np.ndarray):
                arr = np.asarray(val, dtype=float)
                if arr.shape != ref.shape:
                    raise ConfigError(f"{name}.{key}: expected {ref.size} values, got {arr.size}")
                val = arr
            elif isinstance(ref, bool):
                if not isinstance(val, bool):
                    raise ConfigError(f"{name}.{key}: expected true/false, got {val!r}")
            elif isinstance(ref, int) and not isinstance(ref, bool):
                if isinstance(val, bool) or int(val) != val:
                    raise ConfigError(f"{name}.{key}: expected an integer, got {val!r}")
                val = int(val)
            elif isinstance(ref, float):
                if isinstance(val, bool):
                    raise ConfigError(f"{name}.{key}: expected a number, got {val!r}")
                val = float(val)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{name}.{key}: {exc}") from None
        kwargs[key] = val
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}") from None


def config_from_dict(data: dict | None) -> RunConfig:
    data = data or {}
    if not isinstance(data, dict):
        raise ConfigError("configuration root must be a mapping")
    unknown = sorted(set(data) - set(SECTIONS) - {"output_dir"})
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    kwargs = {name: _build_section(name, cls, data.get(name)) for name, cls in SECTIONS.items()}
    kwargs["output_dir"] = str(data.get("output_dir", RunConfig.output_dir))
    return RunConfig(**kwargs)


def config_to_dict(cfg: RunConfig) -> dict:
    out = {}
    for name in SECTIONS:
        section = getattr(cfg, name)
        out[name] = {f.name: _plain(getattr(section, f.name)) for f in dataclasses.fields(section)}
    out["output_dir"] = cfg.output_dir
    return out


class _Dumper(yaml.SafeDumper):
    pass


_Dumper.add_representer(
    list, lambda d, v: d.represent_sequence("tag:yaml.org,2002:seq", v, flow_style=True))


def dump_config(cfg: RunConfig) -> str:
    return yaml.dump(config_to_dict(cfg), Dumper=_Dumper, sort_keys=False)


def load_config(path=None) -> RunConfig:
    """Read a YAML run configuration, filling defaults for omitted fields."""
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(data)

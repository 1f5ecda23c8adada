"""Run configuration: strict YAML schema covering every tunable knob.

Unknown keys are rejected by name so a typo cannot silently fall back to a
default.  The resolved configuration is serialized into every run directory.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError
from .model import ModelConfig
from .synthetic import SyntheticConfig
from .training import OptimizerConfig


@dataclass(frozen=True)
class DataConfig:
    leads: tuple[int, ...] = (1, 8, 24, 48)
    history_hours: int = 1

    def __post_init__(self) -> None:
        if not self.leads:
            raise ValueError("data.leads must be non-empty")
        if self.history_hours < 1:
            raise ValueError("history_hours must be >= 1")


@dataclass(frozen=True)
class EvalConfig:
    table_leads: tuple[int, ...] = (1, 8, 24, 48)
    map_leads: tuple[int, ...] = (1, 8, 24, 48)
    map_cell_deg: float = 1.0
    error_metric: str = "speed"  # or "vector"

    def __post_init__(self) -> None:
        if self.error_metric not in ("speed", "vector"):
            raise ValueError(f"error_metric {self.error_metric!r} not in (speed, vector)")


@dataclass(frozen=True)
class InferenceConfig:
    chunk_size: int = 2048
    grid_resolution: float = 0.25
    dtype: str = "float64"  # inference precision; training stays float32

    def __post_init__(self) -> None:
        if self.chunk_size < 1:
            raise ValueError("chunk_size must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"inference dtype {self.dtype!r} not in (float32, float64)")


@dataclass
class RunConfig:
    workspace: Path
    seed: int = 0
    torch_threads: int = 0  # 0 leaves the torch default untouched
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: OptimizerConfig = field(default_factory=OptimizerConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)


_SECTIONS = {
    "synthetic": SyntheticConfig,
    "data": DataConfig,
    "model": ModelConfig,
    "training": OptimizerConfig,
    "evaluation": EvalConfig,
    "inference": InferenceConfig,
}
_TOP_KEYS = {"workspace", "seed", "torch_threads", *_SECTIONS}

# Section fields that are filled from the top-level seed, not from YAML.
_SEEDED_FIELDS = {"synthetic": "seed", "training": "seed"}


def _coerce(value, target_type):
    if target_type is float and isinstance(value, int):
        return float(value)
    return value


def _build_section(name: str, cls, mapping: dict):
    if not isinstance(mapping, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in mapping.items():
        if key not in fields:
            raise ConfigError(f"unknown key {key!r} in section {name!r}")
        if name in _SEEDED_FIELDS and key == _SEEDED_FIELDS[name]:
            raise ConfigError(
                f"section {name!r} takes its seed from the top-level 'seed' key"
            )
        if isinstance(value, list):
            value = tuple(value)
        kwargs[key] = _coerce(value, fields[key].type)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid section {name!r}: {exc}") from exc


def load_config(path, seed_override: int | None = None, workspace_override=None) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must be a mapping at top level")

    for key in raw:
        if key not in _TOP_KEYS:
            raise ConfigError(f"unknown key {key!r} at top level of {path}")
    if "workspace" not in raw and workspace_override is None:
        raise ConfigError(f"config {path} is missing required key 'workspace'")

    seed = int(raw.get("seed", 0)) if seed_override is None else int(seed_override)
    sections = {}
    for name, cls in _SECTIONS.items():
        mapping = dict(raw.get(name, {}) or {})
        if name in _SEEDED_FIELDS and _SEEDED_FIELDS[name] in mapping:
            raise ConfigError(
                f"section {name!r} takes its seed from the top-level 'seed' key"
            )
        if name in _SEEDED_FIELDS:
            mapping_with_seed = dict(mapping)
            section = _build_section(name, cls, mapping)
            section = dataclasses.replace(section, **{_SEEDED_FIELDS[name]: seed})
            sections[name] = section
            del mapping_with_seed
        else:
            sections[name] = _build_section(name, cls, mapping)

    workspace = Path(workspace_override) if workspace_override else Path(raw["workspace"])
    try:
        return RunConfig(
            workspace=workspace,
            seed=seed,
            torch_threads=int(raw.get("torch_threads", 0)),
            **sections,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def config_to_dict(cfg: RunConfig) -> dict:
    out = {
        "workspace": str(cfg.workspace),
        "seed": cfg.seed,
        "torch_threads": cfg.torch_threads,
    }
    for name in _SECTIONS:
        section = dataclasses.asdict(getattr(cfg, name))
        out[name] = {
            k: (list(v) if isinstance(v, tuple) else v) for k, v in section.items()
        }
    return out


def dump_config(cfg: RunConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(config_to_dict(cfg), fh, sort_keys=True)

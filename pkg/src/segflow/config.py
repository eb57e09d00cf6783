"""Run configuration: YAML file mirroring the parameter dataclasses, with dotted overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .energy import EnergyParams
from .errors import ConfigError
from .pipeline import PipelineConfig, SegmentationParams
from .solver import SolverOptions


@dataclass
class WindowParams:
    """Temporal window and correspondence/grouping settings."""

    window: int = 2
    reference: int = 0
    start: int = 0  # position of the first frame of the window in the sorted sequence
    dist_thresh: float = 0.1
    angle_thresh_deg: float = 45.0
    group_tol: float = 0.01
    joint_solve: bool = True


@dataclass
class RunConfig:
    segmentation: SegmentationParams = field(default_factory=SegmentationParams)
    energy: EnergyParams = field(default_factory=EnergyParams)
    solver: SolverOptions = field(default_factory=SolverOptions)
    pipeline: WindowParams = field(default_factory=WindowParams)

    def pipeline_config(self) -> PipelineConfig:
        p = self.pipeline
        try:
            return PipelineConfig(
                segmentation=self.segmentation,
                energy=self.energy,
                solver=self.solver,
                window=p.window,
                reference=p.reference,
                dist_thresh=p.dist_thresh,
                angle_thresh_deg=p.angle_thresh_deg,
                group_tol=p.group_tol,
                joint_solve=p.joint_solve,
            )
        except ValueError as e:
            raise ConfigError(str(e)) from None


SECTIONS = {
    "segmentation": SegmentationParams,
    "energy": EnergyParams,
    "solver": SolverOptions,
    "pipeline": WindowParams,
}


def field_types(cls) -> dict[str, type]:
    """Field name -> builtin type (bool, int, float) from the defaults."""
    out = {}
    for f in dataclasses.fields(cls):
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        out[f.name] = type(default)
    return out


def dotted_keys() -> list[str]:
    return [f"{s}.{k}" for s, cls in SECTIONS.items() for k in field_types(cls)]


def _coerce(key: str, value, kind: type):
    if kind is bool:
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{key}: expected true/false, got {value!r}")
    if isinstance(value, str):
        # YAML 1.1 reads exponent forms without a dot ("1e-4") as strings
        try:
            value = float(value)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {value!r}") from None
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{key}: expected a number, got {value!r}")
    if kind is int:
        if float(value) != int(value):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return int(value)
    return float(value)


def from_dict(data: dict | None) -> RunConfig:
    """Build a ``RunConfig`` from nested mappings; unknown sections or keys raise ``ConfigError``."""
    data = data or {}
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    unknown = set(data) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}; expected {list(SECTIONS)}")
    sections = {}
    for name, cls in SECTIONS.items():
        raw = data.get(name) or {}
        if not isinstance(raw, dict):
            raise ConfigError(f"section {name!r} must be a mapping")
        types = field_types(cls)
        bad = set(raw) - set(types)
        if bad:
            raise ConfigError(f"unknown keys in {name!r}: {sorted(bad)}")
        kwargs = {k: _coerce(f"{name}.{k}", v, types[k]) for k, v in raw.items()}
        try:
            sections[name] = cls(**kwargs)
        except ValueError as e:
            raise ConfigError(f"{name}: {e}") from None
    cfg = RunConfig(**sections)
    cfg.pipeline_config()  # cross-field validation
    return cfg


def to_dict(cfg: RunConfig) -> dict:
    return {name: dataclasses.asdict(getattr(cfg, name)) for name in SECTIONS}


def dumps(cfg: RunConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)


def loads(text: str) -> RunConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"malformed config: {e}") from None
    return from_dict(data)


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    return loads(text)


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(dumps(cfg))


def apply_overrides(cfg: RunConfig, overrides: dict[str, str]) -> RunConfig:
    """Return a copy with ``{"section.key": "yaml scalar"}`` overrides applied."""
    data = to_dict(cfg)
    for key, text in overrides.items():
        section, _, name = key.partition(".")
        if section not in SECTIONS or name not in data[section]:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            data[section][name] = yaml.safe_load(text) if isinstance(text, str) else text
        except yaml.YAMLError:
            raise ConfigError(f"{key}: cannot parse value {text!r}") from None
    return from_dict(data)

"""Run configuration: nested dataclasses addressed by dotted keys.

Every key is addressable as ``section.field`` (e.g. ``cf.bottleneck_size``).
Unknown keys are rejected; defaults are materialized so the resolved config
printed at run start fully determines a run.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .exceptions import ConfigError

DATA_ROOT_ENV = "TRD_DATA_ROOT"

PROFILES = ("toy", "full")
FUSIONS = ("norm_sum", "sum_raw", "product")
DATASETS = ("toy", "mvtec3d", "paired")


@dataclass
class BackboneConfig:
    profile: str = "toy"
    weights_path: str | None = None
    seed: int = 0


@dataclass
class FilterConfig:
    enabled: bool = True
    # None: profile default (8 for full, 4 for toy)
    bottleneck_size: int | None = None


@dataclass
class AmplifierConfig:
    enabled: bool = True
    expansion: int = 2


@dataclass
class ScoreConfig:
    # pixels at 256 px input; rescaled with the input resolution
    sigma: float = 4.0
    fusion: str = "norm_sum"


@dataclass
class MetricsConfig:
    pro_fpr_limit: float = 0.3
    # None: every unique prediction value is a threshold
    pro_max_thresholds: int | None = None


@dataclass
class TrainerConfig:
    epochs: int = 200
    batch_size: int = 16
    learning_rate: float = 0.005
    seed: int = 0
    block_output_to_decoder: bool = True
    deterministic: bool = True


@dataclass
class DataConfig:
    dataset: str = "toy"
    root: str | None = None
    category: str = "toy"
    rgb_dir: str = "rgb"
    aux_dir: str = "xyz"
    mask_dir: str = "gt"
    n_train: int = 200
    n_val: int = 50
    n_test: int = 100
    anomaly_fraction: float = 0.5
    anomaly_mix: list[float] = field(default_factory=lambda: [1 / 3, 1 / 3, 1 / 3])
    blob_radius: list[float] = field(default_factory=lambda: [4.0, 8.0])
    blob_amplitude: float = 0.5
    seed: int = 0


@dataclass
class RunConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    cf: FilterConfig = field(default_factory=FilterConfig)
    ca: AmplifierConfig = field(default_factory=AmplifierConfig)
    score: ScoreConfig = field(default_factory=ScoreConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def __post_init__(self):
        self.validate()

    @property
    def resolution(self) -> int:
        return 256 if self.backbone.profile == "full" else 64

    @property
    def bottleneck_size(self) -> int:
        if self.cf.bottleneck_size is not None:
            return self.cf.bottleneck_size
        return 8 if self.backbone.profile == "full" else 4

    @property
    def pixel_sigma(self) -> float:
        """Smoothing sigma in pixels at this run's input resolution."""
        return self.score.sigma * self.resolution / 256

    def validate(self) -> None:
        if self.backbone.profile not in PROFILES:
            raise ConfigError(f"backbone.profile must be one of {PROFILES}, got {self.backbone.profile!r}")
        if self.cf.bottleneck_size is not None and self.cf.bottleneck_size < 1:
            raise ConfigError("cf.bottleneck_size must be >= 1")
        if self.ca.expansion not in (1, 2, 4):
            raise ConfigError(f"ca.expansion must be 1, 2 or 4, got {self.ca.expansion}")
        if self.score.sigma <= 0:
            raise ConfigError("score.sigma must be > 0")
        if self.score.fusion not in FUSIONS:
            raise ConfigError(f"score.fusion must be one of {FUSIONS}, got {self.score.fusion!r}")
        if not 0 < self.metrics.pro_fpr_limit <= 1:
            raise ConfigError("metrics.pro_fpr_limit must lie in (0, 1]")
        t = self.trainer
        if t.epochs < 1 or t.batch_size < 1:
            raise ConfigError("trainer.epochs and trainer.batch_size must be >= 1")
        if t.learning_rate <= 0:
            raise ConfigError("trainer.learning_rate must be > 0")
        d = self.data
        if d.dataset not in DATASETS:
            raise ConfigError(f"data.dataset must be one of {DATASETS}, got {d.dataset!r}")
        if min(d.n_train, d.n_val, d.n_test) < 1:
            raise ConfigError("data.n_train, data.n_val and data.n_test must be > 0")
        if len(d.anomaly_mix) != 3 or min(d.anomaly_mix) < 0 or abs(sum(d.anomaly_mix) - 1) > 1e-6:
            raise ConfigError(f"data.anomaly_mix must be 3 non-negative probabilities summing to 1, got {d.anomaly_mix}")
        if not 0 <= d.anomaly_fraction <= 1:
            raise ConfigError("data.anomaly_fraction must lie in [0, 1]")
        if len(d.blob_radius) != 2 or not 0 < d.blob_radius[0] <= d.blob_radius[1]:
            raise ConfigError("data.blob_radius must be [min, max] with 0 < min <= max")

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    def fingerprint(self, sections: tuple[str, ...] | None = None) -> str:
        """Short sha256 over the canonical JSON of the selected sections."""
        d = self.to_dict()
        if sections is not None:
            d = {k: d[k] for k in sections}
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def model_fingerprint(self) -> str:
        return self.fingerprint(("backbone", "cf", "ca"))

    def data_root(self) -> str | None:
        return self.data.root or os.environ.get(DATA_ROOT_ENV)


def _parse(value: str, key: str) -> Any:
    for cast in (int, float):
        try:
            return cast(value)
        except ValueError:
            pass
    try:
        return yaml.safe_load(value)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{key}: cannot parse {value!r}") from exc


def _coerce(value: Any, default: Any, key: str, type_name: str = "") -> Any:
    if default is None:
        numeric = "int" in type_name or "float" in type_name
        if isinstance(value, str) and numeric:
            value = None if value.lower() in ("", "none", "null") else _parse(value, key)
        if numeric and value is not None and (isinstance(value, bool) or not isinstance(value, (int, float))):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return value
    if isinstance(default, bool):
        if isinstance(value, str):
            low = value.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        return bool(value)
    if isinstance(value, str) and not isinstance(default, str):
        value = _parse(value, key)
    if isinstance(default, (int, float)) and (isinstance(value, bool) or not isinstance(value, (int, float))):
        raise ConfigError(f"{key}: expected a number, got {value!r}")
    if isinstance(default, int) and isinstance(value, float):
        if not value.is_integer():
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return int(value)
    if isinstance(default, float) and isinstance(value, int):
        return float(value)
    return value


def from_dict(data: dict[str, Any] | None = None, overrides: dict[str, Any] | None = None) -> RunConfig:
    """Build a :class:`RunConfig` from a nested mapping plus dotted-key overrides.

    Overrides win over ``data``. Unknown sections or keys raise ConfigError.
    """
    base = RunConfig()
    sections = {f.name: getattr(base, f.name) for f in dataclasses.fields(base)}
    merged: dict[str, dict[str, Any]] = {name: {} for name in sections}

    def put(section: str, key: str, value: Any) -> None:
        if section not in sections:
            raise ConfigError(f"unknown config section {section!r}")
        known = {f.name for f in dataclasses.fields(sections[section])}
        if key not in known:
            raise ConfigError(f"unknown config key {section}.{key}")
        merged[section][key] = value

    for section, values in (data or {}).items():
        if not isinstance(values, dict):
            raise ConfigError(f"config section {section!r} must be a mapping")
        for key, value in values.items():
            put(section, key, value)
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        section, _, key = dotted.partition(".")
        put(section, key, value)

    built = {}
    for name, default_obj in sections.items():
        kwargs = {}
        for f in dataclasses.fields(default_obj):
            if f.name in merged[name]:
                kwargs[f.name] = _coerce(merged[name][f.name], getattr(default_obj, f.name),
                                         f"{name}.{f.name}", str(f.type))
        try:
            built[name] = type(default_obj)(**kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
    return RunConfig(**built)


def read_config_file(path: str | os.PathLike) -> dict[str, Any]:
    """Raw nested mapping from a YAML (or JSON) file, without defaults."""
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        data = yaml.safe_load(p.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config {p}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config {p} must contain a mapping")
    return data


def load_config(path: str | os.PathLike | None = None, overrides: dict[str, Any] | None = None,
                base: dict[str, Any] | None = None) -> RunConfig:
    """Layer ``base`` < config file < dotted ``overrides`` into a RunConfig."""
    data = {k: dict(v) for k, v in (base or {}).items()}
    if path is not None:
        for section, values in read_config_file(path).items():
            if not isinstance(values, dict):
                raise ConfigError(f"config section {section!r} must be a mapping")
            data.setdefault(section, {}).update(values)
    return from_dict(data, overrides)

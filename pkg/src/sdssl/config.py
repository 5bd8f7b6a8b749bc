"""Experiment configuration: schema, validation, file loading, overrides.

Config files are YAML with one section per subsystem. Unknown keys are
rejected, every default is materialized, and the resolved mapping is
written next to a run's outputs so the run can be reproduced exactly.
``framework`` and ``distill_view`` are set once at the top level and
injected into the sections that need them.
"""

import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .data import AugmentationRecipe
from .encoder import EncoderConfig
from .errors import ConfigurationError
from .heads import HeadConfig
from .losses import CROSS_VIEW, DISTILL_VIEWS, FRAMEWORKS, LossConfig
from .schedules import ScheduleConfig


@dataclass
class DataConfig:
    dataset: str = "cifar10"
    cache_dir: str = "data"
    batch_size: int = 256
    subset_size: int | None = None
    synthetic_samples: int = 256
    synthetic_classes: int = 4
    recipe: AugmentationRecipe = field(default_factory=AugmentationRecipe)

    def validate(self):
        if self.batch_size < 2:
            raise ConfigurationError(f"data.batch_size must be >= 2 (BatchNorm), got {self.batch_size}")
        if self.subset_size is not None and self.subset_size < 1:
            raise ConfigurationError(f"data.subset_size must be >= 1, got {self.subset_size}")
        self.recipe.validate()


@dataclass
class EvalConfig:
    knn_k: int = 20
    knn_temperature: float = 0.07
    probe_epochs: int = 50
    probe_lr: float = 0.1
    probe_batch_size: int = 256
    gamma: float = 2.0
    t: float = 2.0
    pair_sampling: str = "all_pairs"
    subsample_pairs: int = 100000
    train_bank_size: int | None = 5000
    test_bank_size: int | None = 2000
    metric_sample_size: int | None = 1000

    def validate(self):
        if self.knn_k < 1:
            raise ConfigurationError(f"eval.knn_k must be >= 1, got {self.knn_k}")
        if self.knn_temperature <= 0:
            raise ConfigurationError(f"eval.knn_temperature must be > 0, got {self.knn_temperature}")
        if self.gamma <= 0:
            raise ConfigurationError(f"eval.gamma must be > 0, got {self.gamma}")
        if self.t <= 0:
            raise ConfigurationError(f"eval.t must be > 0, got {self.t}")
        if self.pair_sampling not in ("all_pairs", "subsample"):
            raise ConfigurationError(
                f"eval.pair_sampling must be 'all_pairs' or 'subsample', got {self.pair_sampling!r}")
        if self.probe_epochs < 1 or self.probe_lr <= 0 or self.probe_batch_size < 1:
            raise ConfigurationError("eval probe settings must be positive")


@dataclass
class ExperimentConfig:
    framework: str = "mocov3"
    sdssl_enabled: bool = True
    distill_view: str = CROSS_VIEW
    seed: int = 0
    output_dir: str = "runs/default"
    checkpoint_every_epochs: int = 0
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    heads: HeadConfig = field(default_factory=HeadConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


_UNION_TYPES = (typing.Union, types.UnionType)


def _coerce(path: str, value, hint):
    origin = typing.get_origin(hint)
    if origin in _UNION_TYPES:
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if value is None:
            return None
        return _coerce(path, value, args[0])
    if dataclasses.is_dataclass(hint):
        if not isinstance(value, dict):
            raise ConfigurationError(f"{path} expects a mapping, got {value!r}")
        return _build_dataclass(hint, value, path)
    if hint is bool:
        if isinstance(value, bool):
            return value
        raise ConfigurationError(f"{path} expects a boolean, got {value!r}")
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"{path} expects an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{path} expects a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigurationError(f"{path} expects a string, got {value!r}")
        return value
    if hint is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigurationError(f"{path} expects a list, got {value!r}")
        return tuple(value)
    return value


def _build_dataclass(cls, mapping: dict, section: str = ""):
    hints = typing.get_type_hints(cls)
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(mapping) - allowed)
    if unknown:
        where = section or cls.__name__
        raise ConfigurationError(f"unknown config keys in {where}: {', '.join(unknown)}")
    kwargs = {}
    for key, value in mapping.items():
        path = f"{section}.{key}" if section else key
        kwargs[key] = _coerce(path, value, hints[key])
    return cls(**kwargs)


def from_mapping(mapping: dict) -> ExperimentConfig:
    """Build a fully validated ExperimentConfig; unknown keys raise."""
    if mapping is None:
        mapping = {}
    if not isinstance(mapping, dict):
        raise ConfigurationError(f"config root must be a mapping, got {type(mapping).__name__}")
    config = _build_dataclass(ExperimentConfig, mapping)
    # framework and distill_view are set once at the top level; a section may
    # repeat them (resolved configs do) but not contradict them
    for section, provided, expected, key in (
            ("heads", mapping.get("heads", {}).get("framework"), config.framework, "framework"),
            ("loss", mapping.get("loss", {}).get("framework"), config.framework, "framework"),
            ("loss", mapping.get("loss", {}).get("distill_view"), config.distill_view, "distill_view")):
        if provided is not None and provided != expected:
            raise ConfigurationError(
                f"{section}.{key}={provided!r} contradicts top-level {key}={expected!r}")
    config.heads = dataclasses.replace(config.heads, framework=config.framework)
    config.loss = dataclasses.replace(
        config.loss, framework=config.framework, distill_view=config.distill_view)
    validate_config(config)
    return config


def validate_config(config: ExperimentConfig):
    if config.framework not in FRAMEWORKS:
        raise ConfigurationError(f"framework must be one of {FRAMEWORKS}, got {config.framework!r}")
    if config.distill_view not in DISTILL_VIEWS:
        raise ConfigurationError(
            f"distill_view must be one of {DISTILL_VIEWS}, got {config.distill_view!r}")
    if config.checkpoint_every_epochs < 0:
        raise ConfigurationError("checkpoint_every_epochs must be >= 0")
    config.encoder.validate()
    config.heads.validate()
    config.loss.validate()
    config.schedule.validate()
    config.data.validate()
    config.eval.validate()


def to_mapping(config: ExperimentConfig) -> dict:
    """Resolved plain mapping (every default materialized; YAML/JSON friendly)."""

    def plain(value):
        if dataclasses.is_dataclass(value):
            return {f.name: plain(getattr(value, f.name)) for f in dataclasses.fields(value)}
        if isinstance(value, tuple):
            return [plain(v) for v in value]
        return value

    return plain(config)


def apply_override(mapping: dict, spec: str):
    """Apply one ``dotted.path=value`` override in place; values parse as YAML."""
    if "=" not in spec:
        raise ConfigurationError(f"override {spec!r} must look like dotted.path=value")
    dotted, raw = spec.split("=", 1)
    keys = [k for k in dotted.strip().split(".") if k]
    if not keys:
        raise ConfigurationError(f"override {spec!r} has an empty key path")
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"override value {raw!r} is not valid YAML: {exc}")
    node = mapping
    for key in keys[:-1]:
        nxt = node.get(key)
        if not isinstance(nxt, dict):
            nxt = {}
            node[key] = nxt
        node = nxt
    node[keys[-1]] = value


def load_config(path=None, overrides=(), env=None) -> ExperimentConfig:
    """Load a config file, apply environment root overrides, then --set overrides."""
    mapping = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigurationError(f"cannot read config file {path}: {exc}")
        try:
            loaded = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"config file {path} is not valid YAML: {exc}")
        if loaded is not None:
            if not isinstance(loaded, dict):
                raise ConfigurationError(f"config file {path} must hold a mapping")
            mapping = loaded
    if env is None:
        import os
        env = os.environ
    if env.get("SDSSL_CACHE_DIR"):
        mapping.setdefault("data", {})["cache_dir"] = env["SDSSL_CACHE_DIR"]
    if env.get("SDSSL_OUTPUT_DIR"):
        mapping["output_dir"] = env["SDSSL_OUTPUT_DIR"]
    for spec in overrides:
        apply_override(mapping, spec)
    return from_mapping(mapping)


def save_resolved(config: ExperimentConfig, path):
    Path(path).write_text(yaml.safe_dump(to_mapping(config), sort_keys=False))

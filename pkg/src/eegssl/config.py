"""Run configuration: nested dataclasses, strict YAML parsing, overrides.

Unknown keys are rejected with their full dotted path so typos never turn
into silently-ignored settings.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .data import SplitSpec, SyntheticSpec
from .embedding import EmbedConfig
from .masking import MaskConfig
from .networks import EncoderConfig
from .training import LossConfig, TrainConfig


class ConfigError(ValueError):
    """Raised for unparseable, unknown, or invalid configuration."""


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"  # "synthetic" or "manifest"
    manifest_path: str | None = None
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    split: SplitSpec = field(default_factory=SplitSpec)

    def __post_init__(self):
        if self.source not in ("synthetic", "manifest"):
            raise ConfigError(f"data.source must be 'synthetic' or 'manifest', got {self.source!r}")
        if self.source == "manifest" and not self.manifest_path:
            raise ConfigError("data.source 'manifest' requires data.manifest_path")


@dataclass(frozen=True)
class EmaConfig:
    tau_start: float = 0.996
    tau_end: float = 0.9999
    tau_steps: int | None = None  # None -> 30% of total updates

    def __post_init__(self):
        if not 0.0 <= self.tau_start <= self.tau_end <= 1.0:
            raise ConfigError("need 0 <= tau_start <= tau_end <= 1")
        if self.tau_steps is not None and self.tau_steps < 1:
            raise ConfigError("tau_steps must be >= 1 or null")


@dataclass(frozen=True)
class TrainingSection:
    batch_size: int = 64
    epochs: int = 50
    lr: float = 1e-3
    early_stop_patience: int | None = 20
    grad_clip: float | None = None
    workers: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    ema: EmaConfig = field(default_factory=EmaConfig)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size,
            epochs=self.epochs,
            lr=self.lr,
            early_stop_patience=self.early_stop_patience,
            grad_clip=self.grad_clip,
            workers=self.workers,
        )


@dataclass(frozen=True)
class EvalConfig:
    probe_encoder: str = "context"  # or "target"
    finetune_epochs: int = 5
    finetune_lr: float = 1e-3
    robustness_kinds: tuple[str, ...] = ("amplitude_scale", "time_shift", "dc_shift", "gaussian")
    robustness_magnitudes: tuple[float, ...] = (0.0, 0.25, 0.5, 0.75, 1.0)
    sweep_strategies: tuple[str, ...] = ("ssp", "random")
    sweep_mask_ratios: tuple[float, ...] = (0.1, 0.25, 0.5, 0.75, 0.9)
    sweep_preserve_blocks: tuple[int, ...] = (3,)
    sweep_seeds: tuple[int, ...] = (0, 1, 2)
    maskbench_plans: int = 1000

    def __post_init__(self):
        if self.probe_encoder not in ("context", "target"):
            raise ConfigError("evaluation.probe_encoder must be 'context' or 'target'")
        if self.maskbench_plans < 1:
            raise ConfigError("evaluation.maskbench_plans must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    run_name: str = "run"
    seed: int = 0
    output_dir: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    embedding: EmbedConfig = field(default_factory=EmbedConfig)
    masking: MaskConfig = field(default_factory=MaskConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    training: TrainingSection = field(default_factory=TrainingSection)
    evaluation: EvalConfig = field(default_factory=EvalConfig)


def _build_dataclass(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(
            f"config section {path or '<root>'} must be a mapping, got {type(data).__name__}"
        )
    known = {f.name for f in dataclasses.fields(cls)}
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for key, value in data.items():
        dotted = f"{path}.{key}" if path else key
        if key not in known:
            raise ConfigError(f"unknown config key: {dotted}")
        target = hints.get(key)
        if isinstance(target, type) and dataclasses.is_dataclass(target) and value is not None:
            kwargs[key] = _build_dataclass(target, value, dotted)
        elif isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config near {path or '<root>'}: {exc}") from exc


def build_run_config(data: dict) -> RunConfig:
    return _build_dataclass(RunConfig, data, "")


def load_config(path: str | Path, overrides: list[str] | None = None) -> RunConfig:
    """Parse a YAML config file and apply ``key.path=value`` overrides."""
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config file {path}: {exc}") from exc
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"config root in {path} must be a mapping")
    for override in overrides or []:
        raw = apply_override(raw, override)
    return build_run_config(raw)


def apply_override(data: dict, override: str) -> dict:
    """Set one dotted key to a YAML-parsed value, e.g. masking.mask_ratio=0.25."""
    if "=" not in override:
        raise ConfigError(f"override {override!r} must look like key.path=value")
    dotted, _, raw_value = override.partition("=")
    keys = [k for k in dotted.strip().split(".") if k]
    if not keys:
        raise ConfigError(f"override {override!r} has an empty key path")
    try:
        value = yaml.safe_load(raw_value)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse override value {raw_value!r}: {exc}") from exc
    out = dict(data)
    node = out
    for key in keys[:-1]:
        child = dict(node.get(key) or {})
        node[key] = child
        node = child
    node[keys[-1]] = value
    return out


def config_to_dict(cfg: RunConfig) -> dict:
    """Plain-type snapshot suitable for YAML/JSON artifacts."""
    def _clean(value):
        if dataclasses.is_dataclass(value) and not isinstance(value, type):
            return {f.name: _clean(getattr(value, f.name)) for f in dataclasses.fields(value)}
        if isinstance(value, tuple):
            return [_clean(v) for v in value]
        return value

    return _clean(cfg)


def dump_config(cfg: RunConfig, path: str | Path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(yaml.safe_dump(config_to_dict(cfg), sort_keys=False))

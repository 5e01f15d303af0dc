"""Run configuration: dataclasses plus YAML loading.

One file captures every shared hyperparameter with its default (Adam
learning rate 5e-4, beta1 0.75, beta2 0.999, gradient clip 3, weight
decay 1e-5, 15 epochs with early stopping, effective batch size 4,
20+20 parser symbols, 10+1 transducer symbols, 10 decode samples), so a
run is reproducible from the config file and a seed alone.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional

import yaml

from .qcfg import ConstraintConfig, mt_constraints, scan_constraints
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSettings:
    dim: int = 256
    qcfg_num_nt: int = 10
    qcfg_num_pt: int = 1
    pcfg_num_nt: int = 20
    pcfg_num_pt: int = 20
    use_bilstm: bool = False
    use_emphasis: bool = False

    def __post_init__(self):
        if min(self.dim, self.qcfg_num_nt, self.qcfg_num_pt, self.pcfg_num_nt, self.pcfg_num_pt) < 1:
            raise ConfigError("model dimensions and symbol counts must be positive")


@dataclass(frozen=True)
class ConstraintSettings:
    preset: str = "scan"           # none | scan | mt
    enable_copy: bool = False

    def __post_init__(self):
        if self.preset not in ("none", "scan", "mt"):
            raise ConfigError(f"unknown constraint preset {self.preset!r}")

    def build(self, model: ModelSettings) -> ConstraintConfig:
        # Copy symbols take the highest ids so ordinary symbols keep 0-based
        # contiguous ranges.
        copy_nt = model.qcfg_num_nt - 1 if self.enable_copy else None
        copy_pt = model.qcfg_num_pt - 1 if self.enable_copy else None
        if self.enable_copy and (model.qcfg_num_nt < 2 or model.qcfg_num_pt < 2):
            raise ConfigError("copy rules need at least 2 nonterminals and 2 preterminals")
        if self.preset == "scan":
            return scan_constraints(copy_nt, copy_pt)
        if self.preset == "mt":
            return mt_constraints(copy_nt, copy_pt)
        return ConstraintConfig(copy_nonterminal=copy_nt, copy_preterminal=copy_pt)


@dataclass(frozen=True)
class DecodeSettings:
    num_samples: int = 10
    deduplicate: bool = True
    max_length: int = 64
    max_depth: int = 32
    max_attempts: int = 32
    use_root_split_filter: bool = False

    def __post_init__(self):
        if self.num_samples < 1:
            raise ConfigError("num_samples must be >= 1")


@dataclass(frozen=True)
class DataSettings:
    dataset: str = "scan"          # scan | copy | file
    split: str = "addprim_jump"
    train_path: Optional[str] = None
    test_path: Optional[str] = None
    max_source_length: Optional[int] = None
    max_target_length: Optional[int] = None
    replicate_singletons: bool = True

    def __post_init__(self):
        if self.dataset not in ("scan", "copy", "file"):
            raise ConfigError(f"unknown dataset {self.dataset!r}")


@dataclass(frozen=True)
class RunConfig:
    model: ModelSettings = ModelSettings()
    constraints: ConstraintSettings = ConstraintSettings()
    training: TrainConfig = TrainConfig()
    decode: DecodeSettings = DecodeSettings()
    data: DataSettings = DataSettings()
    seed: int = 0
    checkpoint_path: str = "model.ckpt"
    log_path: Optional[str] = None


def _build(cls, values: dict, context: str):
    if not isinstance(values, dict):
        raise ConfigError(f"{context}: expected a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"{context}: unknown keys {sorted(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError, RuntimeError) as exc:
        raise ConfigError(f"{context}: {exc}") from exc


def run_config_from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    sections = {
        "model": ModelSettings,
        "constraints": ConstraintSettings,
        "training": TrainConfig,
        "decode": DecodeSettings,
        "data": DataSettings,
    }
    kwargs = {}
    for key, value in raw.items():
        if key in sections:
            kwargs[key] = _build(sections[key], value, key)
        elif key in ("seed", "checkpoint_path", "log_path"):
            kwargs[key] = value
        else:
            raise ConfigError(f"unknown top-level key {key!r}")
    return RunConfig(**kwargs)


def load_run_config(path: str) -> RunConfig:
    with open(path, encoding="utf-8") as handle:
        raw = yaml.safe_load(handle)
    if raw is None:
        raw = {}
    return run_config_from_dict(raw)


def run_config_to_dict(config: RunConfig) -> dict:
    return dataclasses.asdict(config)

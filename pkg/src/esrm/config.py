"""Experiment configuration: strict YAML parsing, canonical serialisation, fingerprints."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .data import AugmentationPolicy
from .losses import LossWeights
from .trainer import TrainConfig


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field path."""


@dataclass(frozen=True)
class DataConfig:
    real_root: str
    test_root: str
    class_count: int
    twin_roots: dict[str, str] = field(default_factory=dict)
    ratio: float = 0.0
    source_shares: dict[str, float] | None = None


@dataclass(frozen=True)
class SplitConfig:
    mode: str = "cil"
    n_tasks: int = 5
    coarse_map: dict[int, int] | None = None


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig
    split: SplitConfig = field(default_factory=SplitConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seeds: tuple[int, ...] = (0,)
    out_dir: str = "results"
    diagnostics: bool = True

    def shares(self) -> dict[str, float]:
        if self.data.source_shares is not None:
            return dict(self.data.source_shares)
        tags = sorted(self.data.twin_roots)
        return {t: 1.0 / len(tags) for t in tags}


# fields that never influence results
_NON_SEMANTIC = {"out_dir"}
# TrainConfig.seed is driven by the top-level seed list
_HIDDEN = {(TrainConfig, "seed")}


def _is_dataclass_type(tp) -> bool:
    return isinstance(tp, type) and dataclasses.is_dataclass(tp)


def _strip_optional(tp):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if len(args) == 1:
            return args[0], True
    return tp, False


def _coerce(tp, value, path: str):
    tp, optional = _strip_optional(tp)
    if value is None:
        if optional:
            return None
        raise ConfigError(f"{path}: value required")
    if _is_dataclass_type(tp):
        return _build(tp, value, path)
    origin = typing.get_origin(tp)
    if origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected a mapping, got {type(value).__name__}")
        kt, vt = typing.get_args(tp)
        return {_coerce(kt, k, f"{path}.{k}"): _coerce(vt, v, f"{path}.{k}") for k, v in value.items()}
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {type(value).__name__}")
        args = typing.get_args(tp)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], v, f"{path}[{i}]") for i, v in enumerate(value))
        if len(args) != len(value):
            raise ConfigError(f"{path}: expected {len(args)} items, got {len(value)}")
        return tuple(_coerce(a, v, f"{path}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            if isinstance(value, str) and value.lstrip("-").isdigit():
                return int(value)
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{path}: unsupported field type {tp}")


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or '<root>'}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if (cls, f.name) not in _HIDDEN}
    for key in data:
        if key not in names:
            where = f"{path}.{key}" if path else str(key)
            raise ConfigError(f"unknown key '{where}'")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            if f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
                where = f"{path}.{f.name}" if path else f.name
                raise ConfigError(f"{where}: missing required key")
            continue
        where = f"{path}.{f.name}" if path else f.name
        kwargs[f.name] = _coerce(hints[f.name], data[f.name], where)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{path or '<root>'}: {exc}") from exc


def _validate(cfg: ExperimentConfig, check_paths: bool) -> None:
    if not cfg.seeds:
        raise ConfigError("seeds: at least one seed is required")
    if not 0.0 <= cfg.data.ratio <= 1.0:
        raise ConfigError("data.ratio: must lie in [0, 1]")
    if cfg.data.ratio > 0 and not cfg.data.twin_roots:
        raise ConfigError("data.twin_roots: contamination ratio > 0 needs at least one twin dataset")
    if cfg.data.source_shares is not None:
        if set(cfg.data.source_shares) != set(cfg.data.twin_roots):
            raise ConfigError("data.source_shares: tags must match data.twin_roots")
        if abs(sum(cfg.data.source_shares.values()) - 1.0) > 1e-9:
            raise ConfigError("data.source_shares: shares must sum to 1")
    if cfg.split.mode not in ("cil", "dil"):
        raise ConfigError("split.mode: must be 'cil' or 'dil'")
    if cfg.split.mode == "dil" and cfg.split.coarse_map is None:
        raise ConfigError("split.coarse_map: required for a dil split")
    if check_paths:
        paths = {"data.real_root": cfg.data.real_root, "data.test_root": cfg.data.test_root}
        paths.update({f"data.twin_roots.{t}": p for t, p in cfg.data.twin_roots.items()})
        for key, p in paths.items():
            if not Path(p).is_dir():
                raise ConfigError(f"{key}: directory {p} does not exist")


def config_from_dict(data: dict, check_paths: bool = True) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, data, "")
    _validate(cfg, check_paths)
    return cfg


def parse_config(path: str | Path, overrides: dict | None = None, check_paths: bool = True) -> ExperimentConfig:
    """Load a YAML experiment config; ``overrides`` maps dotted paths to values."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        data = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    for dotted, value in (overrides or {}).items():
        node = data
        *parents, leaf = dotted.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    return config_from_dict(data, check_paths)


def _plain(value):
    if dataclasses.is_dataclass(value):
        return {
            f.name: _plain(getattr(value, f.name))
            for f in dataclasses.fields(value)
            if (type(value), f.name) not in _HIDDEN
        }
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in sorted(value.items())}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return _plain(cfg)


def dump_config(cfg: ExperimentConfig) -> str:
    """Canonical YAML text: sorted keys, every field present."""
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=True, default_flow_style=False)


def fingerprint(cfg: ExperimentConfig) -> str:
    data = {k: v for k, v in config_to_dict(cfg).items() if k not in _NON_SEMANTIC}
    canonical = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def default_train_config() -> TrainConfig:
    return TrainConfig(augmentation=AugmentationPolicy(), loss_weights=LossWeights())


__all__ = [
    "ConfigError",
    "DataConfig",
    "SplitConfig",
    "ExperimentConfig",
    "parse_config",
    "config_from_dict",
    "config_to_dict",
    "dump_config",
    "fingerprint",
]

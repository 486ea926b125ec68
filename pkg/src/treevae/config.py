"""Run configuration: nested dataclasses loaded from YAML with strict keys."""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

import yaml


class ConfigError(ValueError):
    """Raised for schema violations; the message names the offending key."""


@dataclass
class ArchConfig:
    input_shape: Optional[tuple] = None  # None: taken from the dataset
    encoder: str = "mlp"  # mlp | conv | omniglot | resnet
    likelihood: Optional[str] = None  # bernoulli | gaussian; None: dataset default
    latent_dims: Union[int, list] = 8
    max_depth: int = 6
    hidden: int = 128
    bottom_up_dim: int = 128
    encoder_out: int = 256
    encoder_hidden: list = field(default_factory=lambda: [512, 512, 256, 256])
    conv_channels: list = field(default_factory=lambda: [16, 32, 64])
    root_merge_prior: bool = True
    separate_posterior_transform: bool = False
    contrastive: bool = False
    projection_hidden: int = 512
    projection_dim: int = 64
    dtype: str = "float32"

    def latent_dim(self, depth: int) -> int:
        if isinstance(self.latent_dims, int):
            return self.latent_dims
        return int(self.latent_dims[depth])

    def covers_depth(self, depth: int) -> bool:
        return isinstance(self.latent_dims, int) or len(self.latent_dims) > depth


@dataclass
class GrowthSchedule:
    n_t: int = 150
    n_f: int = 200
    finetune_every: int = 3
    finetune_epochs: int = 80
    max_leaves: int = 10
    subset_threshold: float = 0.01
    prune_threshold: float = 0.01
    anneal_rate: float = 0.001
    final_anneal_rate: float = 0.01
    lr: float = 1e-3
    weight_decay: float = 0.0
    batch_size: int = 256
    mc_samples: int = 1

    def check(self) -> None:
        if self.n_t <= 0 or self.n_f <= 0:
            raise ConfigError("schedule.n_t and schedule.n_f must be positive")
        if not 0 < self.subset_threshold < 1:
            raise ConfigError("schedule.subset_threshold must lie in (0, 1)")
        if self.max_leaves < 2:
            raise ConfigError("schedule.max_leaves must be at least 2")


@dataclass
class ContrastiveConfig:
    enabled: bool = False
    weight: float = 100.0
    tau_embed: float = 0.5
    tau_router: float = 1.0
    augment: str = "cifar"  # cifar | celeba | none


@dataclass
class EvalConfig:
    mc_samples: int = 1
    iw_samples: int = 1000
    iw_max_points: Optional[int] = None
    representatives: int = 8


@dataclass
class DataConfig:
    name: str = "synthetic"
    root: Optional[str] = None
    subset: Optional[int] = None
    n: int = 2000
    n_test: int = 400
    dim: int = 16
    n_clusters: int = 4
    separation: float = 6.0


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)
    schedule: GrowthSchedule = field(default_factory=GrowthSchedule)
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    deterministic: bool = True
    out: str = "runs/default"

    def check(self) -> None:
        self.schedule.check()
        if self.arch.likelihood not in (None, "bernoulli", "gaussian"):
            raise ConfigError(f"arch.likelihood: unknown value {self.arch.likelihood!r}")
        if self.arch.encoder not in ("mlp", "conv", "omniglot", "resnet"):
            raise ConfigError(f"arch.encoder: unknown value {self.arch.encoder!r}")
        if self.arch.max_depth < 1:
            raise ConfigError("arch.max_depth must be at least 1")
        if self.contrastive.enabled and not self.arch.contrastive:
            self.arch.contrastive = True


def _coerce(tp, value, key):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{key}: expected a mapping")
        return _build(tp, value, key + ".")
    if origin is Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        for a in args:
            try:
                return _coerce(a, value, key)
            except ConfigError:
                continue
        raise ConfigError(f"{key}: cannot interpret {value!r}")
    if tp is tuple or origin is tuple:
        return tuple(value)
    if tp is list or origin is list:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected a list")
        return list(value)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number")
        return float(value)
    if tp is str:
        return str(value)
    return value


def _build(cls, raw: dict, prefix: str = ""):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"unknown config key: {prefix}{unknown[0]}")
    kwargs = {k: _coerce(hints[k], v, prefix + k) for k, v in raw.items()}
    return cls(**kwargs)


def config_from_dict(raw: dict | None) -> RunConfig:
    cfg = _build(RunConfig, raw or {})
    cfg.check()
    return cfg


def load_config(path: str | Path) -> RunConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError("top level of the config must be a mapping")
    return config_from_dict(raw)


def config_to_dict(cfg: Any) -> dict:
    def plain(v):
        if isinstance(v, tuple):
            return list(v)
        if isinstance(v, dict):
            return {k: plain(x) for k, x in v.items()}
        if isinstance(v, list):
            return [plain(x) for x in v]
        return v

    return plain(dataclasses.asdict(cfg))


def dump_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(config_to_dict(cfg), sort_keys=False))

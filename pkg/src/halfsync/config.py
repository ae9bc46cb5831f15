"""Run configuration: dataclasses plus TOML load/dump with dotted overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import tomli
import tomli_w

from .data import GeneratorParams
from .model import ModelConfig
from .numerics import PrecisionPolicy
from .optim import LrSchedule

__all__ = ["ClusterSpec", "DataSpec", "RunConfig", "ConfigError", "load_config", "dump_config",
           "config_from_dict", "config_to_dict", "apply_overrides"]

TRANSPORTS = ("in-process", "socket")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ClusterSpec:
    n: int = 1
    transport: str = "in-process"
    latency_ms: float = 0.0
    rendezvous: str = ""
    timeout_ms: float = 60000.0

    def __post_init__(self):
        if self.n < 1:
            raise ConfigError("cluster.n must be >= 1")
        if self.transport not in TRANSPORTS:
            raise ConfigError(f"cluster.transport must be one of {TRANSPORTS}")


@dataclass(frozen=True)
class DataSpec:
    seed: int = 0
    dir: str = ""  # load train/val/test .shots files from here instead of generating
    generator: GeneratorParams = field(default_factory=GeneratorParams)


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    policy: PrecisionPolicy = field(default_factory=PrecisionPolicy)
    schedule: LrSchedule = field(default_factory=LrSchedule)
    momentum: float = 0.9
    loss_scale: float = 10.0
    batch_size: int = 256
    epochs: int = 10
    patience: int = 0  # 0 disables early stopping
    seed: int = 0
    horizon: int = 200
    cluster: ClusterSpec = field(default_factory=ClusterSpec)
    data: DataSpec = field(default_factory=DataSpec)

    def __post_init__(self):
        if not self.loss_scale > 0:
            raise ConfigError("train.loss_scale must be positive")
        if self.batch_size < 1 or self.epochs < 1 or self.patience < 0:
            raise ConfigError("batch_size and epochs must be positive, patience non-negative")

    @property
    def effective_batch(self) -> int:
        return self.cluster.n * self.batch_size

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)


_TRAIN_KEYS = ("loss_scale", "batch_size", "epochs", "patience", "seed", "horizon")


def config_to_dict(run: RunConfig) -> dict:
    gen = dataclasses.asdict(run.data.generator)
    gen = {k: list(v) if isinstance(v, tuple) else v for k, v in gen.items()}
    return {
        "model": dataclasses.asdict(run.model),
        "precision": run.policy.to_dict(),
        "schedule": {**dataclasses.asdict(run.schedule), "momentum": run.momentum},
        "train": {k: getattr(run, k) for k in _TRAIN_KEYS},
        "cluster": dataclasses.asdict(run.cluster),
        "data": {"seed": run.data.seed, "dir": run.data.dir, **gen},
    }


def _defaults() -> dict:
    return config_to_dict(RunConfig(ModelConfig(feature_dim=1)))


def config_from_dict(d: dict) -> RunConfig:
    """Build a RunConfig from a (possibly partial) nested dict; unknown keys are errors."""
    merged = _defaults()
    for section, values in d.items():
        if section == "meta":
            continue
        if section not in merged or not isinstance(values, dict):
            raise ConfigError(f"unknown config section [{section}]")
        if section == "precision" and "preset" in values:
            values = {**PrecisionPolicy.named(values["preset"]).to_dict(),
                      **{k: v for k, v in values.items() if k != "preset"}}
        for key, value in values.items():
            if key not in merged[section]:
                raise ConfigError(f"unknown config key {section}.{key}")
            merged[section][key] = value
    try:
        gen = {k: v for k, v in merged["data"].items() if k not in ("seed", "dir")}
        gen = {k: tuple(v) if isinstance(v, list) else v for k, v in gen.items()}
        sched = dict(merged["schedule"])
        momentum = sched.pop("momentum")
        return RunConfig(
            model=ModelConfig(**merged["model"]),
            policy=PrecisionPolicy.from_dict(merged["precision"]),
            schedule=LrSchedule(**sched),
            momentum=momentum,
            cluster=ClusterSpec(**merged["cluster"]),
            data=DataSpec(merged["data"]["seed"], merged["data"]["dir"], GeneratorParams(**gen)),
            **merged["train"],
        )
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e


def _parse_value(text: str):
    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text


def apply_overrides(d: dict, overrides: list[str]) -> dict:
    """Apply ``section.key=value`` strings (values parsed as TOML literals)."""
    d = {k: dict(v) if isinstance(v, dict) else v for k, v in d.items()}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        path, text = item.split("=", 1)
        parts = path.strip().split(".")
        if len(parts) != 2:
            raise ConfigError(f"override key {path!r} must be section.key")
        section, key = parts
        d.setdefault(section, {})[key] = _parse_value(text.strip())
    return d


def load_config(path, overrides: list[str] = ()) -> RunConfig:
    try:
        d = tomli.loads(Path(path).read_text())
    except tomli.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from e
    return config_from_dict(apply_overrides(d, list(overrides)))


def dump_config(run: RunConfig, path=None, meta: dict | None = None) -> str:
    d = config_to_dict(run)
    if meta:
        d["meta"] = meta
    text = tomli_w.dumps(d)
    if path is not None:
        Path(path).write_text(text)
    return text

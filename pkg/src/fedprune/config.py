"""Experiment configuration: dataclasses, defaults, seed derivation and parsing."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ConfigError

STRATEGIES = ("fedavg", "fedprune", "fedprune_no_clt", "small_model")
SEED_NAMES = ("selection", "slow", "init", "sampling", "mask", "train", "data", "partition")


def derive_seed(base: int, name: str) -> int:
    """Independent 32-bit stream seed for ``name`` from one base seed."""
    digest = hashlib.sha256(f"{base}/{name}".encode()).digest()
    return int.from_bytes(digest[:4], "big")


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"  # synthetic | idx
    # synthetic generator
    n_samples: int = 6000
    n_features: int = 32
    classes: int = 10
    spread: float = 1.0
    separation: float = 1.0
    clusters_per_class: int = 3
    # idx files
    images_path: str | None = None
    labels_path: str | None = None
    max_samples: int | None = None
    # federation
    num_clients: int = 50
    partition: str = "skewed_niid"  # iid | skewed_niid
    classes_per_client: int = 5
    train_fraction: float = 0.8

    def validate(self) -> None:
        if self.source not in ("synthetic", "idx"):
            raise ConfigError(f"data.source: unknown source {self.source!r}")
        if self.source == "idx" and not (self.images_path and self.labels_path):
            raise ConfigError("data.images_path and data.labels_path are required for idx data")
        if self.partition not in ("iid", "skewed_niid"):
            raise ConfigError(f"data.partition: unknown scheme {self.partition!r}")
        for key in ("n_samples", "n_features", "classes", "clusters_per_class", "num_clients", "classes_per_client"):
            if getattr(self, key) < 1:
                raise ConfigError(f"data.{key}: must be >= 1")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("data.train_fraction: must lie in (0, 1)")


@dataclass(frozen=True)
class ExperimentConfig:
    strategy: str = "fedprune"
    rounds: int = 50
    clients_per_round: int = 10
    epochs: int = 10
    batch_size: int = 10
    lr: float = 0.001
    drop_rate: float = 0.5
    mask_update_round: int = 10
    slow_fraction: float = 0.0
    model: str = "mlp"  # mlp | cnn
    hidden: tuple[int, ...] = (64, 32)
    eval_every: int = 1
    acc_threshold: float = 0.5
    seed: int = 0
    selection_seed: int | None = None
    slow_seed: int | None = None
    init_seed: int | None = None
    sampling_seed: int | None = None
    mask_seed: int | None = None
    train_seed: int | None = None
    data_seed: int | None = None
    partition_seed: int | None = None
    data: DataConfig = field(default_factory=DataConfig)

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(self.hidden))

    def resolved_seed(self, name: str) -> int:
        explicit = getattr(self, f"{name}_seed")
        return derive_seed(self.seed, name) if explicit is None else int(explicit)

    def resolved_seeds(self) -> dict[str, int]:
        return {name: self.resolved_seed(name) for name in SEED_NAMES}

    def validate(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy: must be one of {', '.join(STRATEGIES)}, got {self.strategy!r}")
        for key in ("rounds", "clients_per_round", "epochs", "batch_size", "mask_update_round", "eval_every"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key}: must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr: must be > 0")
        if not 0.0 <= self.drop_rate < 1.0:
            raise ConfigError("drop_rate: must lie in [0, 1)")
        if not 0.0 <= self.slow_fraction < 1.0:
            raise ConfigError("slow_fraction: must lie in [0, 1)")
        if self.model not in ("mlp", "cnn"):
            raise ConfigError(f"model: unknown model {self.model!r}")
        if any(h < 1 for h in self.hidden):
            raise ConfigError("hidden: widths must be >= 1")
        self.data.validate()
        if self.clients_per_round > self.data.num_clients:
            raise ConfigError("clients_per_round: must not exceed data.num_clients")

    def to_dict(self) -> dict[str, Any]:
        out = dataclasses.asdict(self)
        out["hidden"] = list(self.hidden)
        return out


def _coerce(cls, values: dict[str, Any], prefix: str = ""):
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in values.items():
        if key not in known:
            raise ConfigError(f"unknown config key '{prefix}{key}'")
        if key == "data" and cls is ExperimentConfig:
            value = _coerce(DataConfig, value or {}, prefix="data.")
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def config_from_dict(values: dict[str, Any]) -> ExperimentConfig:
    cfg = _coerce(ExperimentConfig, values)
    cfg.validate()
    return cfg


def parse_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    """Load a JSON config (or a run manifest) and apply flag overrides; flags win.

    ``overrides`` may use dotted keys (``data.partition``) for nested fields.
    """
    values: dict[str, Any] = {}
    if path is not None:
        try:
            values = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(values, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
        if "config" in values and "seeds" in values:  # a run manifest
            values = values["config"]
    values = json.loads(json.dumps(values))
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key.startswith("data."):
            values.setdefault("data", {})[key[5:]] = value
        else:
            values[key] = value
    return config_from_dict(values)

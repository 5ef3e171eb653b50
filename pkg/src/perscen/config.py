"""Training and run configuration."""

from __future__ import annotations

import dataclasses
import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

POOLING = ("mean", "sum", "max", "concat")
ABLATIONS = ("no_gnn", "shared_graph", "no_spec_sequence", "no_vq", "no_glu")


class ConfigError(ValueError):
    def __init__(self, message: str, field_name: str | None = None):
        super().__init__(message)
        self.field_name = field_name


@dataclass
class TrainConfig:
    # architecture
    layers: int = 3
    d: int = 16
    d_z: int = 16
    d_glu: int = 32
    d_match: int = 32
    codebook_size: int = 10
    beta: float = 0.25
    k_sparse: int | None = None
    hidden_gen: int = 64
    hidden_pref: int = 64
    pooling: str = "mean"
    max_len: int = 50
    min_interactions: int = 2
    # optimisation
    batch_size: int = 4096
    learning_rate: float = 1e-3
    weight_decay: float = 1e-6
    negatives_per_positive: int = 10
    epochs: int = 10
    patience: int = 3
    eval_ks: tuple[int, ...] = (50, 100)
    seed: int = 0
    # ablations
    no_gnn: bool = False
    shared_graph: bool = False
    no_spec_sequence: bool = False
    no_vq: bool = False
    no_glu: bool = False

    def __post_init__(self):
        self.eval_ks = tuple(sorted(int(k) for k in self.eval_ks))
        self.validate()

    def validate(self) -> None:
        positive = ("layers", "d", "d_z", "d_glu", "d_match", "hidden_gen", "hidden_pref",
                    "max_len", "batch_size", "negatives_per_positive", "patience")
        for name in positive:
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}", name)
        for name in ("codebook_size", "epochs", "min_interactions"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0", name)
        if self.k_sparse is not None and self.k_sparse < 1:
            raise ConfigError("k_sparse must be >= 1", "k_sparse")
        if self.beta < 0:
            raise ConfigError("beta must be >= 0", "beta")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0", "learning_rate")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0", "weight_decay")
        if self.pooling not in POOLING:
            raise ConfigError(f"pooling must be one of {POOLING}", "pooling")
        if not self.eval_ks or min(self.eval_ks) < 1:
            raise ConfigError("eval_ks must be non-empty positive integers", "eval_ks")

    @property
    def use_vq(self) -> bool:
        return self.codebook_size > 0 and not self.no_vq and not self.no_spec_sequence

    def k_sparse_for(self, n_fields: int) -> int:
        return self.k_sparse if self.k_sparse is not None else -(-n_fields // 2)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["eval_ks"] = list(self.eval_ks)
        return d

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in obj.items() if k in names})

    @classmethod
    def preset(cls, name: str, **overrides) -> "TrainConfig":
        """Hyperparameters reported for the two public benchmarks."""
        presets = {
            "kuairand": dict(layers=3, codebook_size=10, eval_ks=(50, 100)),
            "alimama": dict(layers=1, codebook_size=5, eval_ks=(500, 1000)),
        }
        if name not in presets:
            raise ConfigError(f"unknown preset {name!r}")
        return cls(**{**presets[name], **overrides})


@dataclass
class RunConfig:
    """Everything a CLI invocation needs: data paths, workdir and a TrainConfig."""

    workdir: str = "work"
    schema: str | None = None
    interactions: str | None = None
    user_features: str | None = None
    item_features: str | None = None
    dataset: str = "custom"
    train_end: int | None = None
    valid_end: int | None = None
    filter_seen: bool = False
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name != "train"}
        d["train"] = self.train.to_dict()
        return d

    @classmethod
    def from_dict(cls, obj: dict) -> "RunConfig":
        obj = dict(obj)
        train = obj.pop("train", {}) or {}
        # flat train keys at top level are accepted too
        for key in list(obj):
            if key in {f.name for f in dataclasses.fields(TrainConfig)}:
                train[key] = obj.pop(key)
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(obj) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}", sorted(unknown)[0])
        return cls(**obj, train=TrainConfig.from_dict(train))

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            obj = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{exc.lineno}: {exc.msg}") from exc
        return cls.from_dict(obj)

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")


def rng_for(seed: int, stream: str) -> np.random.Generator:
    """Independent generator for a named randomness substream."""
    return np.random.default_rng([int(seed), zlib.crc32(stream.encode("utf-8"))])

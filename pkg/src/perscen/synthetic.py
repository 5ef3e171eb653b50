"""Planted-structure multi-scenario data for desk-scale experiments.

Each user belongs to a latent cluster with a preferred mix of item
categories (the preference shared across scenarios). Each (cluster,
scenario) pair adds its own shift to that mix, scaled by
``scenario_shift_strength``, so what a user clicks depends on both.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .config import RunConfig, TrainConfig, rng_for
from .schema import (
    FeatureSchema,
    FieldSpec,
    InteractionLog,
    default_features,
    write_features,
    write_interactions,
    write_schema,
)

DAY = 86_400
START = 1_650_000_000  # arbitrary epoch offset


@dataclass
class SyntheticSpec:
    n_users: int = 200
    n_items: int = 300
    n_scenarios: int = 3
    n_user_clusters: int = 2
    scenario_shift_strength: float = 2.0
    interactions_per_user: int = 40
    seed: int = 0
    n_categories: int = 20
    cluster_strength: float = 4.0
    scenario_weights: tuple | None = None
    days: int = 30
    segment_noise: float = 0.2
    popularity_exponent: float = 0.5

    def __post_init__(self):
        for name in ("n_users", "n_items", "n_scenarios", "n_user_clusters", "interactions_per_user", "n_categories", "days"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.scenario_shift_strength < 0:
            raise ValueError("scenario_shift_strength must be >= 0")

    def weights(self) -> np.ndarray:
        if self.scenario_weights is not None:
            w = np.asarray(self.scenario_weights, dtype=np.float64)
        elif self.n_scenarios == 3:
            w = np.array([0.7, 0.2, 0.1])
        else:
            w = 0.5 ** np.arange(self.n_scenarios)
        if len(w) != self.n_scenarios:
            raise ValueError("scenario_weights length must equal n_scenarios")
        return w / w.sum()


@dataclass
class SyntheticData:
    spec: SyntheticSpec
    schema: FeatureSchema
    log: InteractionLog
    user_cluster: np.ndarray
    item_category: np.ndarray
    user_features: object
    item_features: object

    @property
    def train_end(self) -> int:
        return START + int(0.6 * self.spec.days * DAY)

    @property
    def valid_end(self) -> int:
        return START + int(0.75 * self.spec.days * DAY)


def synthetic_schema(spec: SyntheticSpec) -> FeatureSchema:
    n_segments = 4 * spec.n_user_clusters
    return FeatureSchema(
        user=(
            FieldSpec("uid", "sparse", spec.n_users),
            FieldSpec("segment", "sparse", n_segments),
            FieldSpec("activity", "dense"),
        ),
        item=(
            FieldSpec("iid", "sparse", spec.n_items),
            FieldSpec("category", "sparse", spec.n_categories),
            FieldSpec("price", "dense"),
        ),
        scenario_vocab=spec.n_scenarios,
    )


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def generate_synthetic(spec: SyntheticSpec) -> SyntheticData:
    rng = rng_for(spec.seed, "synthetic")
    schema = synthetic_schema(spec)
    n_cat = spec.n_categories

    item_category = rng.permutation(np.arange(spec.n_items) % n_cat)
    # Zipf-like popularity inside each category
    item_pop = 1.0 / (1.0 + rng.permutation(spec.n_items)) ** spec.popularity_exponent
    cluster_logits = spec.cluster_strength * rng.normal(size=(spec.n_user_clusters, n_cat))
    shift_logits = spec.scenario_shift_strength * rng.normal(size=(spec.n_user_clusters, spec.n_scenarios, n_cat))
    cat_probs = _softmax(cluster_logits[:, None, :] + shift_logits)  # (K, S, C)

    user_cluster = rng.integers(0, spec.n_user_clusters, size=spec.n_users)
    scen_w = spec.weights()

    n_rows = spec.n_users * spec.interactions_per_user
    users = np.repeat(np.arange(spec.n_users), spec.interactions_per_user)
    scen = rng.choice(spec.n_scenarios, size=n_rows, p=scen_w)
    cats = np.empty(n_rows, dtype=np.int64)
    items = np.empty(n_rows, dtype=np.int64)
    by_cat = [np.flatnonzero(item_category == c) for c in range(n_cat)]
    cat_item_p = [item_pop[idx] / item_pop[idx].sum() for idx in by_cat]
    uni = rng.random(size=n_rows)
    for r in range(n_rows):
        p = cat_probs[user_cluster[users[r]], scen[r]]
        cats[r] = min(int(np.searchsorted(np.cumsum(p), uni[r], side="right")), n_cat - 1)
    for c in range(n_cat):
        rows = np.flatnonzero(cats == c)
        if rows.size and by_cat[c].size:
            items[rows] = rng.choice(by_cat[c], size=rows.size, p=cat_item_p[c])
        elif rows.size:
            items[rows] = rng.integers(0, spec.n_items, size=rows.size)
    ts = START + rng.integers(0, spec.days * DAY, size=n_rows)
    order = np.lexsort((users, ts))
    log = InteractionLog(users[order], items[order], scen[order], ts[order], np.ones(n_rows, dtype=np.int64))

    ufeat = default_features(schema.user, spec.n_users)
    noisy = rng.random(spec.n_users) < spec.segment_noise
    segment = user_cluster * 4 + rng.integers(0, 4, size=spec.n_users)
    segment[noisy] = rng.integers(0, 4 * spec.n_user_clusters, size=int(noisy.sum()))
    ufeat.values["segment"] = segment
    ufeat.values["activity"] = np.round(rng.lognormal(0.0, 0.5, size=spec.n_users), 4)
    ifeat = default_features(schema.item, spec.n_items)
    ifeat.values["category"] = item_category.astype(np.int64)
    ifeat.values["price"] = np.round(rng.lognormal(2.0, 0.7, size=spec.n_items), 2)
    return SyntheticData(spec, schema, log, user_cluster, item_category, ufeat, ifeat)


def write_synthetic(data: SyntheticData, directory, train: TrainConfig | None = None) -> RunConfig:
    """Write schema/interactions/feature files and a matching ``run.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_schema(data.schema, directory / "schema.json")
    write_interactions(data.log, directory / "interactions.csv")
    write_features(data.user_features, directory / "user_features.csv")
    write_features(data.item_features, directory / "item_features.csv")
    # paths are relative to run.json's directory
    run = RunConfig(
        workdir=".",
        schema="schema.json",
        interactions="interactions.csv",
        user_features="user_features.csv",
        item_features="item_features.csv",
        dataset="synthetic",
        train_end=data.train_end,
        valid_end=data.valid_end,
        train=train or TrainConfig(),
    )
    run.dump(directory / "run.json")
    return run


def spec_dict(spec: SyntheticSpec) -> dict:
    return asdict(spec)

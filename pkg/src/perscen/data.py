"""Prepared dataset: splits, behavior sequences and standardized feature tables."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .schema import (
    PAD,
    BehaviorSequences,
    EntityFeatures,
    FeatureSchema,
    FieldSpec,
    InteractionLog,
    Splits,
    build_behavior_sequences,
    load_features,
    load_interactions,
    parse_schema,
    standardize_dense,
    temporal_split,
)

BEHAVIOR_SLOT = "behavior_seq"


@dataclass
class PreparedData:
    schema: FeatureSchema
    users: EntityFeatures
    items: EntityFeatures
    splits: Splits
    sequences: BehaviorSequences
    dense_stats: dict

    def user_inputs(self, users) -> dict:
        users = np.asarray(users, dtype=np.int64)
        out = {name: col[users] for name, col in self.users.values.items()}
        out[BEHAVIOR_SLOT] = self.sequences.multi[users]
        return out

    def item_inputs(self, items) -> dict:
        items = np.asarray(items, dtype=np.int64)
        return {name: col[items] for name, col in self.items.values.items()}

    def scenario_sequences(self, users, scenarios) -> np.ndarray:
        return self.sequences.scen[np.asarray(users, dtype=np.int64), np.asarray(scenarios, dtype=np.int64)]

    def training_rows(self) -> InteractionLog:
        """Train-split records of users that survived the interaction filter."""
        train = self.splits.train
        return train[self.sequences.kept[train.user]]

    # -- persistence ---------------------------------------------------------
    def save(self, path: str | Path) -> None:
        arrays = {}
        for tag, log in zip(("train", "valid", "test"), self.splits):
            arrays[f"split_{tag}"] = log.as_array()
        for entity, feats in (("user", self.users), ("item", self.items)):
            for name, col in feats.values.items():
                arrays[f"{entity}__{name}"] = col
            for name, col in feats.seq_len.items():
                arrays[f"{entity}_len__{name}"] = col
        seq = self.sequences
        arrays.update(
            seq_multi=seq.multi, seq_multi_len=seq.multi_len, seq_scen=seq.scen,
            seq_scen_len=seq.scen_len, seq_kept=seq.kept,
        )
        meta = {
            "schema": self.schema.to_dict(),
            "dense_stats": self.dense_stats,
            "max_len": seq.max_len,
            "boundary": seq.boundary,
        }
        arrays["meta"] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path: str | Path) -> "PreparedData":
        with np.load(path) as z:
            meta = json.loads(bytes(z["meta"]).decode("utf-8"))
            schema = FeatureSchema.from_dict(meta["schema"])

            def log(tag):
                a = z[f"split_{tag}"]
                return InteractionLog(*(a[:, i].copy() for i in range(5))) if len(a) else InteractionLog.empty()

            def feats(entity):
                f = EntityFeatures(schema.fields(entity))
                for spec in f.fields:
                    f.values[spec.name] = z[f"{entity}__{spec.name}"]
                    if spec.kind == "sequence":
                        f.seq_len[spec.name] = z[f"{entity}_len__{spec.name}"]
                return f

            sequences = BehaviorSequences(
                max_len=meta["max_len"], multi=z["seq_multi"], multi_len=z["seq_multi_len"],
                scen=z["seq_scen"], scen_len=z["seq_scen_len"], kept=z["seq_kept"], boundary=meta["boundary"],
            )
            return cls(schema, feats("user"), feats("item"), Splits(log("train"), log("valid"), log("test")),
                       sequences, meta["dense_stats"])


def prepare(
    schema: FeatureSchema,
    log: InteractionLog,
    train_end: int,
    valid_end: int,
    user_features: EntityFeatures,
    item_features: EntityFeatures,
    max_len: int = 50,
    min_interactions: int = 2,
) -> PreparedData:
    splits = temporal_split(log, train_end, valid_end)
    sequences = build_behavior_sequences(
        splits.train, max_len=max_len, min_interactions=min_interactions,
        n_users=schema.n_users, n_scenarios=schema.n_scenarios,
    )
    train = splits.train
    stats = {
        "user": standardize_dense(user_features, np.unique(train.user)),
        "item": standardize_dense(item_features, np.unique(train.item)),
    }
    return PreparedData(schema, user_features, item_features, splits, sequences, stats)


def prepare_from_files(
    schema_path, interactions_path, train_end: int, valid_end: int,
    user_features_path=None, item_features_path=None, max_len: int = 50, min_interactions: int = 2,
) -> PreparedData:
    schema = parse_schema(schema_path)
    log = load_interactions(interactions_path, schema)
    users = load_features(user_features_path, schema, "user", max_len)
    items = load_features(item_features_path, schema, "item", max_len)
    return prepare(schema, log, train_end, valid_end, users, items, max_len, min_interactions)


def behavior_field(schema: FeatureSchema) -> FieldSpec:
    """The derived multi-scenario history field appended to every user."""
    return FieldSpec(BEHAVIOR_SLOT, "sequence", schema.n_items)


__all__ = ["PreparedData", "prepare", "prepare_from_files", "BEHAVIOR_SLOT", "PAD", "behavior_field"]

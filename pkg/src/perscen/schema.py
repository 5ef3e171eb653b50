"""Feature schema, interaction logs, temporal splits and behavior sequences."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

KINDS = ("sparse", "dense", "sequence")
INTERACTION_COLUMNS = ("user_id", "item_id", "scenario_id", "timestamp", "label")
PAD = -1


class SchemaError(ValueError):
    pass


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class FieldSpec:
    name: str
    kind: str
    vocab_size: int | None = None

    def to_dict(self) -> dict:
        d = {"name": self.name, "kind": self.kind}
        if self.vocab_size is not None:
            d["vocab_size"] = self.vocab_size
        return d


@dataclass(frozen=True)
class FeatureSchema:
    """Field layout for users and items plus the scenario vocabulary.

    The first field of each entity is its id field; it must be sparse and its
    ``vocab_size`` is the number of entities of that kind.
    """

    user: tuple[FieldSpec, ...]
    item: tuple[FieldSpec, ...]
    scenario_vocab: int

    def __post_init__(self):
        for entity in ("user", "item"):
            fields = getattr(self, entity)
            if not fields:
                raise SchemaError(f"{entity}: at least one field is required")
            seen = set()
            for f in fields:
                if f.kind not in KINDS:
                    raise SchemaError(f"{entity}.{f.name}: unknown kind {f.kind!r}")
                if f.name in seen:
                    raise SchemaError(f"{entity}: duplicate field name {f.name!r}")
                seen.add(f.name)
                if f.kind in ("sparse", "sequence"):
                    if not isinstance(f.vocab_size, int) or f.vocab_size < 1:
                        raise SchemaError(f"{entity}.{f.name}: vocab_size must be a positive integer")
            if fields[0].kind != "sparse":
                raise SchemaError(f"{entity}: first field {fields[0].name!r} is the id field and must be sparse")
        if not isinstance(self.scenario_vocab, int) or self.scenario_vocab < 1:
            raise SchemaError("scenario_vocab must be a positive integer")

    def fields(self, entity: str) -> tuple[FieldSpec, ...]:
        if entity not in ("user", "item"):
            raise KeyError(entity)
        return getattr(self, entity)

    def n_fields(self, entity: str) -> int:
        return len(self.fields(entity))

    @property
    def n_users(self) -> int:
        return self.user[0].vocab_size

    @property
    def n_items(self) -> int:
        return self.item[0].vocab_size

    @property
    def n_scenarios(self) -> int:
        return self.scenario_vocab

    def to_dict(self) -> dict:
        return {
            "user": [f.to_dict() for f in self.user],
            "item": [f.to_dict() for f in self.item],
            "scenario_vocab": self.scenario_vocab,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "FeatureSchema":
        if not isinstance(obj, dict):
            raise SchemaError("schema must be a JSON object")
        for key in ("user", "item", "scenario_vocab"):
            if key not in obj:
                raise SchemaError(f"schema is missing {key!r}")

        def specs(entity):
            out = []
            for i, raw in enumerate(obj[entity]):
                if not isinstance(raw, dict) or "name" not in raw or "kind" not in raw:
                    raise SchemaError(f"{entity}[{i}]: needs 'name' and 'kind'")
                vocab = raw.get("vocab_size")
                out.append(FieldSpec(str(raw["name"]), str(raw["kind"]), vocab))
            return tuple(out)

        return cls(specs("user"), specs("item"), obj["scenario_vocab"])


def parse_schema(path: str | Path) -> FeatureSchema:
    text = Path(path).read_text(encoding="utf-8")
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}:{exc.lineno}: {exc.msg}") from exc
    return FeatureSchema.from_dict(obj)


def write_schema(schema: FeatureSchema, path: str | Path) -> None:
    Path(path).write_text(json.dumps(schema.to_dict(), indent=2) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# interactions
# ---------------------------------------------------------------------------


class Interaction(NamedTuple):
    user_id: int
    item_id: int
    scenario_id: int
    timestamp: int
    label: int


@dataclass
class InteractionLog:
    """Columnar interaction records, kept in file order."""

    user: np.ndarray
    item: np.ndarray
    scenario: np.ndarray
    timestamp: np.ndarray
    label: np.ndarray

    def __len__(self) -> int:
        return len(self.user)

    def __iter__(self) -> Iterator[Interaction]:
        for row in zip(self.user, self.item, self.scenario, self.timestamp, self.label):
            yield Interaction(*(int(v) for v in row))

    def __getitem__(self, idx) -> "InteractionLog":
        return InteractionLog(
            self.user[idx], self.item[idx], self.scenario[idx], self.timestamp[idx], self.label[idx]
        )

    @classmethod
    def empty(cls) -> "InteractionLog":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z.copy(), z.copy(), z.copy(), z.copy())

    @classmethod
    def from_records(cls, records) -> "InteractionLog":
        rows = [tuple(r) for r in records]
        if not rows:
            return cls.empty()
        arr = np.asarray(rows, dtype=np.int64)
        return cls(*(arr[:, i].copy() for i in range(5)))

    def positives(self) -> "InteractionLog":
        return self[self.label == 1]

    def as_array(self) -> np.ndarray:
        return np.stack([self.user, self.item, self.scenario, self.timestamp, self.label], axis=1)


def load_interactions(path: str | Path, schema: FeatureSchema) -> InteractionLog:
    path = Path(path)
    with path.open(encoding="utf-8", newline="") as fh:
        header = fh.readline().strip().split(",")
        if tuple(h.strip() for h in header) != INTERACTION_COLUMNS:
            raise DataError(f"{path}:1: expected header {','.join(INTERACTION_COLUMNS)}")
        try:
            arr = np.loadtxt(fh, delimiter=",", dtype=np.int64, ndmin=2)
        except ValueError as exc:
            raise DataError(f"{path}: malformed row: {exc}") from exc
    if arr.size == 0:
        return InteractionLog.empty()
    if arr.shape[1] != 5:
        raise DataError(f"{path}: expected 5 columns, found {arr.shape[1]}")
    log = InteractionLog(*(arr[:, i].copy() for i in range(5)))
    validate_interactions(log, schema, source=str(path))
    return log


def validate_interactions(log: InteractionLog, schema: FeatureSchema, source: str = "<log>") -> None:
    checks = (
        ("user_id", log.user, schema.n_users),
        ("item_id", log.item, schema.n_items),
        ("scenario_id", log.scenario, schema.n_scenarios),
    )
    for name, col, bound in checks:
        bad = np.flatnonzero((col < 0) | (col >= bound))
        if bad.size:
            i = int(bad[0])
            # +2: one for the header line, one for 1-based numbering
            raise DataError(f"{source}: row {i + 2}: {name}={int(col[i])} out of range [0, {bound})")
    bad = np.flatnonzero((log.label != 0) & (log.label != 1))
    if bad.size:
        i = int(bad[0])
        raise DataError(f"{source}: row {i + 2}: label={int(log.label[i])} is not 0 or 1")


def write_interactions(log: InteractionLog, path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(INTERACTION_COLUMNS)
        writer.writerows(log.as_array().tolist())


class Splits(NamedTuple):
    train: InteractionLog
    valid: InteractionLog
    test: InteractionLog


def temporal_split(log: InteractionLog, train_end: int, valid_end: int) -> Splits:
    """Partition by timestamp: (-inf, train_end], (train_end, valid_end], (valid_end, inf)."""
    if not train_end < valid_end:
        raise ValueError(f"train_end ({train_end}) must be < valid_end ({valid_end})")
    t = log.timestamp
    return Splits(log[t <= train_end], log[(t > train_end) & (t <= valid_end)], log[t > valid_end])


# ---------------------------------------------------------------------------
# behavior sequences
# ---------------------------------------------------------------------------


@dataclass
class BehaviorSequences:
    """Padded, time-ascending positive item histories.

    ``multi[u]`` holds the user's most recent ``max_len`` clicked items over all
    scenarios, ``scen[u, s]`` the most recent ``max_len`` in scenario ``s``.
    Padding is ``PAD`` at the tail. Users filtered out keep empty rows and
    ``kept[u] == False``.
    """

    max_len: int
    multi: np.ndarray
    multi_len: np.ndarray
    scen: np.ndarray
    scen_len: np.ndarray
    kept: np.ndarray
    boundary: int | None = None

    @property
    def users(self) -> np.ndarray:
        return np.flatnonzero(self.kept)

    def multi_scenario_seq(self, user: int) -> list[int]:
        return self.multi[user, : self.multi_len[user]].tolist()

    def scenario_seq(self, user: int, scenario: int) -> list[int]:
        return self.scen[user, scenario, : self.scen_len[user, scenario]].tolist()

    def __contains__(self, user: int) -> bool:
        return 0 <= user < len(self.kept) and bool(self.kept[user])


def _tails(keys: np.ndarray, items: np.ndarray, n_keys: int, max_len: int):
    """Last ``max_len`` items per key, for items already sorted by (key, time)."""
    out = np.full((n_keys, max_len), PAD, dtype=np.int64)
    lengths = np.zeros(n_keys, dtype=np.int64)
    if len(keys) == 0:
        return out, lengths
    starts = np.flatnonzero(np.r_[True, keys[1:] != keys[:-1]])
    ends = np.r_[starts[1:], len(keys)]
    for s, e in zip(starts, ends):
        k = keys[s]
        s = max(s, e - max_len)
        out[k, : e - s] = items[s:e]
        lengths[k] = e - s
    return out, lengths


def build_behavior_sequences(
    train: InteractionLog,
    max_len: int = 50,
    min_interactions: int = 2,
    n_users: int | None = None,
    n_scenarios: int | None = None,
) -> BehaviorSequences:
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    pos = train.positives()
    if n_users is None:
        n_users = int(pos.user.max()) + 1 if len(pos) else 0
    if n_scenarios is None:
        n_scenarios = int(pos.scenario.max()) + 1 if len(pos) else 0
    counts = np.bincount(pos.user, minlength=n_users)
    kept = counts >= min_interactions
    pos = pos[kept[pos.user]]

    # stable sort keeps file order among equal timestamps
    order = np.lexsort((pos.timestamp, pos.user))
    u, it, sc, ts = pos.user[order], pos.item[order], pos.scenario[order], pos.timestamp[order]
    multi, multi_len = _tails(u, it, n_users, max_len)

    order_s = np.lexsort((ts, sc, u))
    key = u[order_s] * n_scenarios + sc[order_s]
    flat, flat_len = _tails(key, it[order_s], n_users * n_scenarios, max_len)
    boundary = int(train.timestamp.max()) if len(train) else None
    return BehaviorSequences(
        max_len=max_len,
        multi=multi,
        multi_len=multi_len,
        scen=flat.reshape(n_users, n_scenarios, max_len),
        scen_len=flat_len.reshape(n_users, n_scenarios),
        kept=kept,
        boundary=boundary,
    )


# ---------------------------------------------------------------------------
# entity feature tables
# ---------------------------------------------------------------------------


@dataclass
class EntityFeatures:
    """Feature matrix for one entity type, in schema field order.

    ``values[name]`` is an int array for sparse fields, a float array for dense
    fields and a PAD-padded (n, max_len) int array for sequence fields.
    """

    fields: tuple[FieldSpec, ...]
    values: dict[str, np.ndarray] = field(default_factory=dict)
    seq_len: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.values[self.fields[0].name])


def default_features(fields: tuple[FieldSpec, ...], n: int, max_len: int = 50) -> EntityFeatures:
    feats = EntityFeatures(fields)
    for i, f in enumerate(fields):
        if i == 0:
            feats.values[f.name] = np.arange(n, dtype=np.int64)
        elif f.kind == "sparse":
            feats.values[f.name] = np.zeros(n, dtype=np.int64)
        elif f.kind == "dense":
            feats.values[f.name] = np.zeros(n, dtype=np.float64)
        else:
            feats.values[f.name] = np.full((n, max_len), PAD, dtype=np.int64)
            feats.seq_len[f.name] = np.zeros(n, dtype=np.int64)
    return feats


def load_features(
    path: str | Path | None, schema: FeatureSchema, entity: str, max_len: int = 50
) -> EntityFeatures:
    """Read ``entity_id,<field>...`` rows; entities without a row get defaults."""
    fields = schema.fields(entity)
    n = fields[0].vocab_size
    feats = default_features(fields, n, max_len)
    if path is None:
        return feats
    path = Path(path)
    with path.open(encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[0] != "entity_id":
            raise DataError(f"{path}:1: header must start with entity_id")
        cols = {name: i for i, name in enumerate(header)}
        missing = [f.name for f in fields if f.name not in cols]
        if missing:
            raise DataError(f"{path}:1: missing columns {missing}")
        for lineno, row in enumerate(reader, start=2):
            try:
                eid = int(row[0])
            except (ValueError, IndexError) as exc:
                raise DataError(f"{path}:{lineno}: bad entity_id") from exc
            if not 0 <= eid < n:
                raise DataError(f"{path}:{lineno}: entity_id={eid} out of range [0, {n})")
            for f in fields:
                raw = row[cols[f.name]].strip()
                try:
                    if f.kind == "dense":
                        feats.values[f.name][eid] = float(raw)
                        continue
                    if f.kind == "sparse":
                        v = int(raw)
                        if not 0 <= v < f.vocab_size:
                            raise DataError(f"{path}:{lineno}: {f.name}={v} out of range")
                        feats.values[f.name][eid] = v
                        continue
                    ids = [int(x) for x in raw.split("|") if x != ""][-max_len:]
                except ValueError as exc:
                    raise DataError(f"{path}:{lineno}: bad value for {f.name}: {raw!r}") from exc
                if any(not 0 <= x < f.vocab_size for x in ids):
                    raise DataError(f"{path}:{lineno}: {f.name} id out of range")
                feats.values[f.name][eid, :] = PAD
                feats.values[f.name][eid, : len(ids)] = ids
                feats.seq_len[f.name][eid] = len(ids)
    return feats


def write_features(feats: EntityFeatures, path: str | Path) -> None:
    names = [f.name for f in feats.fields]
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["entity_id", *names])
        for eid in range(feats.n):
            row = [eid]
            for f in feats.fields:
                v = feats.values[f.name][eid]
                if f.kind == "dense":
                    row.append(repr(float(v)))
                elif f.kind == "sparse":
                    row.append(int(v))
                else:
                    row.append("|".join(str(x) for x in v[: feats.seq_len[f.name][eid]]))
            writer.writerow(row)


def standardize_dense(feats: EntityFeatures, ids: np.ndarray | None = None) -> dict[str, tuple[float, float]]:
    """Standardize dense columns in place using statistics over ``ids``."""
    stats = {}
    for f in feats.fields:
        if f.kind != "dense":
            continue
        col = feats.values[f.name]
        ref = col if ids is None or len(ids) == 0 else col[ids]
        mean = float(ref.mean()) if len(ref) else 0.0
        std = float(ref.std()) if len(ref) else 1.0
        if not std > 0:
            std = 1.0
        feats.values[f.name] = (col - mean) / std
        stats[f.name] = (mean, std)
    return stats

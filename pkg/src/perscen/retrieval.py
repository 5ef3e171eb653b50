"""Per-scenario item indexes, exact top-K retrieval and Recall/Hits@K."""

from __future__ import annotations

import json
import struct
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import _kernels
from .schema import InteractionLog


@dataclass
class ScenarioIndex:
    scenario_id: int
    item_ids: np.ndarray
    vectors: np.ndarray

    def __post_init__(self):
        self.item_ids = np.asarray(self.item_ids, dtype=np.int64)
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if len(self.item_ids) != len(self.vectors):
            raise ValueError("one vector per item is required")
        if len(np.unique(self.item_ids)) != len(self.item_ids):
            raise ValueError("item ids must be unique")

    def __len__(self) -> int:
        return len(self.item_ids)


def build_index(model, data, scenario_id: int, items: Iterable[int] | None = None, chunk: int = 8192) -> ScenarioIndex:
    items = np.arange(data.schema.n_items) if items is None else np.asarray(list(items), dtype=np.int64)
    parts = [
        model.items(data, items[s : s + chunk], scenario_id).embedding.data
        for s in range(0, len(items), chunk)
    ]
    vectors = np.concatenate(parts) if parts else np.zeros((0, model.config.d_match))
    return ScenarioIndex(scenario_id, items, vectors)


def inner_product_scores(queries: np.ndarray, vectors: np.ndarray) -> np.ndarray:
    """(Q, N) inner products, computed with a batch-invariant accumulation order."""
    return _kernels.matmul(np.atleast_2d(queries), np.ascontiguousarray(vectors.T))


def retrieve_topk(e_u, index: ScenarioIndex, k: int, exclude: Sequence[np.ndarray] | None = None) -> np.ndarray:
    """Item ids by descending inner product, ties by ascending item id.

    A single query returns a 1-D array, a (Q, D) batch returns a list of
    arrays. ``exclude[q]`` lists item ids removed from query q's candidates.
    """
    if len(index) == 0:
        raise ValueError("cannot retrieve from an empty index")
    if k < 1:
        raise ValueError("k must be >= 1")
    e_u = np.asarray(e_u, dtype=np.float64)
    single = e_u.ndim == 1
    scores = inner_product_scores(e_u, index.vectors)
    # kernels break ties by column, so columns must be in ascending id order
    order = np.argsort(index.item_ids, kind="stable")
    ids = index.item_ids[order]
    scores = scores[:, order]
    if exclude is None:
        top = _kernels.topk_scores(scores, k)
        out = [ids[row] for row in top]
    else:
        out = []
        for q in range(len(scores)):
            ban = np.isin(ids, exclude[q])
            keep = np.flatnonzero(~ban)
            if keep.size == 0:
                out.append(np.zeros(0, dtype=np.int64))
                continue
            top = _kernels.topk_scores(scores[q : q + 1, keep], k)[0]
            out.append(ids[keep[top]])
    return out[0] if single else out


def recall_at_k(retrieved: Sequence[int], relevant: set, k: int) -> float:
    if not relevant:
        raise ValueError("relevant set is empty")
    return len(set(list(retrieved)[:k]) & set(relevant)) / len(relevant)


def hits_at_k(retrieved: Sequence[int], relevant: set, k: int) -> float:
    if not relevant:
        raise ValueError("relevant set is empty")
    return 1.0 if set(list(retrieved)[:k]) & set(relevant) else 0.0


@dataclass
class ScenarioMetrics:
    scenario_id: int
    groups: int
    recall: dict = field(default_factory=dict)
    hits: dict = field(default_factory=dict)


@dataclass
class EvalReport:
    dataset: str
    ks: list
    scenarios: list  # ScenarioMetrics, ascending id
    notes: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def macro_recall(self, k: int) -> float:
        vals = [s.recall[k] for s in self.scenarios]
        return float(np.mean(vals)) if vals else 0.0

    def scenario(self, sid: int) -> ScenarioMetrics:
        for s in self.scenarios:
            if s.scenario_id == sid:
                return s
        raise KeyError(sid)

    def to_dict(self) -> dict:
        out = {
            "dataset": self.dataset,
            "Ks": list(self.ks),
            "scenarios": [
                {
                    "id": s.scenario_id,
                    "groups": s.groups,
                    "recall": {str(k): s.recall[k] for k in self.ks},
                    "hits": {str(k): s.hits[k] for k in self.ks},
                }
                for s in self.scenarios
            ],
        }
        if self.notes:
            out["notes"] = list(self.notes)
        out.update(self.extra)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")


def group_positives(log: InteractionLog) -> dict[int, dict[int, set]]:
    """scenario -> user -> set of positive items."""
    groups: dict[int, dict[int, set]] = defaultdict(lambda: defaultdict(set))
    pos = log.positives()
    for u, i, s in zip(pos.user.tolist(), pos.item.tolist(), pos.scenario.tolist()):
        groups[s][u].add(i)
    return groups


def evaluate_rankings(
    groups: dict[int, dict[int, set]],
    ranker: Callable[[int, np.ndarray], list],
    ks: Sequence[int],
    n_scenarios: int,
    dataset: str = "custom",
) -> EvalReport:
    """Average Recall/Hits@K per scenario; ``ranker(s, users)`` returns one ranking per user."""
    ks = sorted(int(k) for k in ks)
    report = EvalReport(dataset, ks, [])
    for s in range(n_scenarios):
        users = np.array(sorted(groups.get(s, {})), dtype=np.int64)
        if users.size == 0:
            report.notes.append(f"scenario {s} has no test groups and is omitted")
            continue
        rankings = ranker(s, users)
        rec = {k: 0.0 for k in ks}
        hit = {k: 0.0 for k in ks}
        for u, ranked in zip(users.tolist(), rankings):
            relevant = groups[s][u]
            for k in ks:
                rec[k] += recall_at_k(ranked, relevant, k)
                hit[k] += hits_at_k(ranked, relevant, k)
        n = len(users)
        report.scenarios.append(
            ScenarioMetrics(s, n, {k: rec[k] / n for k in ks}, {k: hit[k] / n for k in ks})
        )
    return report


def seen_items(log: InteractionLog) -> dict[int, np.ndarray]:
    pos = log.positives()
    out: dict[int, list] = defaultdict(list)
    for u, i in zip(pos.user.tolist(), pos.item.tolist()):
        out[u].append(i)
    return {u: np.unique(v) for u, v in out.items()}


def model_ranker(model, data, max_k: int, filter_seen: bool = False, batch: int = 1024):
    seen = seen_items(data.splits.train) if filter_seen else None
    cache: dict[int, ScenarioIndex] = {}

    def rank(s: int, users: np.ndarray):
        if s not in cache:
            cache[s] = build_index(model, data, s)
        index = cache[s]
        out = []
        for start in range(0, len(users), batch):
            chunk = users[start : start + batch]
            e_u = model.users(data, chunk, s).embedding.data
            exclude = None
            if seen is not None:
                exclude = [seen.get(int(u), np.zeros(0, dtype=np.int64)) for u in chunk]
            out.extend(retrieve_topk(e_u, index, max_k, exclude=exclude))
        return out

    return rank


def evaluate(model, data, log: InteractionLog, ks: Sequence[int], filter_seen: bool = False,
             dataset: str = "custom") -> EvalReport:
    groups = group_positives(log)
    report = evaluate_rankings(groups, model_ranker(model, data, max(ks), filter_seen), ks,
                               data.schema.n_scenarios, dataset)
    report.extra["param_count"] = model.parameter_count()
    return report


def validation_recall(model, data, k: int) -> float:
    report = evaluate(model, data, data.splits.valid, [k])
    return report.macro_recall(k)


def popularity_baseline(train: InteractionLog, n_items: int, n_scenarios: int) -> dict[int, np.ndarray]:
    """Per-scenario ranking by train-split positive count, ties by ascending id."""
    pos = train.positives()
    out = {}
    for s in range(n_scenarios):
        counts = np.bincount(pos.item[pos.scenario == s], minlength=n_items)
        out[s] = np.lexsort((np.arange(n_items), -counts))
    return out


def evaluate_popularity(data, log: InteractionLog, ks: Sequence[int], dataset: str = "custom") -> EvalReport:
    ranking = popularity_baseline(data.splits.train, data.schema.n_items, data.schema.n_scenarios)
    groups = group_positives(log)
    max_k = max(ks)
    return evaluate_rankings(
        groups, lambda s, users: [ranking[s][:max_k]] * len(users), ks, data.schema.n_scenarios, dataset
    )


# -- index files -------------------------------------------------------------------


def save_index(index: ScenarioIndex, directory) -> None:
    """``vectors.bin`` (little-endian f32, row-major) plus ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    vecs = index.vectors.astype("<f4")
    (directory / "vectors.bin").write_bytes(vecs.tobytes())
    manifest = {
        "scenario_id": index.scenario_id,
        "dtype": "float32-le",
        "rows": int(vecs.shape[0]),
        "dim": int(vecs.shape[1]) if vecs.ndim == 2 else 0,
        "item_ids": index.item_ids.tolist(),
        "offsets": {"vectors": 0, "row_stride_bytes": int(vecs.shape[1]) * struct.calcsize("<f")},
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")


def load_index(directory) -> ScenarioIndex:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text(encoding="utf-8"))
    raw = np.frombuffer((directory / "vectors.bin").read_bytes(), dtype="<f4")
    vecs = raw.reshape(manifest["rows"], manifest["dim"]).astype(np.float64)
    return ScenarioIndex(manifest["scenario_id"], np.array(manifest["item_ids"], dtype=np.int64), vecs)

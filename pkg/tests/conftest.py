import sys

import numpy as np
import pytest

from perscen.config import TrainConfig
from perscen.data import prepare
from perscen.schema import FeatureSchema, FieldSpec, InteractionLog, PAD, default_features


def numeric_grad(f, arr, h=1e-6, idx=None):
    """Central differences of scalar ``f()`` w.r.t. entries of ``arr`` (mutated in place)."""
    flat = arr.reshape(-1)
    out = np.zeros_like(flat)
    positions = range(flat.size) if idx is None else idx
    for i in positions:
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        out[i] = (up - down) / (2 * h)
    return out.reshape(arr.shape)


def rel_error(analytic, numeric):
    a, n = np.ravel(analytic), np.ravel(numeric)
    denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return np.linalg.norm(a - n) / denom


TOY_SCHEMA = FeatureSchema(
    user=(
        FieldSpec("uid", "sparse", 6),
        FieldSpec("age", "dense"),
        FieldSpec("tags", "sequence", 5),
    ),
    item=(
        FieldSpec("iid", "sparse", 8),
        FieldSpec("cat", "sparse", 3),
        FieldSpec("price", "dense"),
    ),
    scenario_vocab=2,
)


def toy_config(**kw):
    base = dict(layers=2, d=3, d_z=2, d_glu=4, d_match=4, codebook_size=2, hidden_gen=4,
                hidden_pref=4, max_len=4, min_interactions=1, batch_size=8, epochs=1, eval_ks=(2, 4))
    base.update(kw)
    return TrainConfig(**base)


def toy_data(seed=0, schema=TOY_SCHEMA, rows=60, max_len=4):
    rng = np.random.default_rng(seed)
    n_u, n_i, n_s = schema.n_users, schema.n_items, schema.n_scenarios
    log = InteractionLog(
        rng.integers(0, n_u, rows), rng.integers(0, n_i, rows), rng.integers(0, n_s, rows),
        np.sort(rng.integers(0, 100, rows)), (rng.random(rows) < 0.8).astype(np.int64),
    )
    users = default_features(schema.user, n_u, max_len)
    users.values["age"] = rng.normal(30, 5, n_u)
    tags = users.values["tags"]
    for u in range(n_u):
        k = int(rng.integers(0, 4))
        tags[u, :k] = rng.integers(0, 5, k)
        users.seq_len["tags"][u] = k
    items = default_features(schema.item, n_i, max_len)
    items.values["cat"] = rng.integers(0, 3, n_i)
    items.values["price"] = rng.lognormal(1, 0.5, n_i)
    return prepare(schema, log, 60, 80, users, items, max_len=max_len, min_interactions=1)


@pytest.fixture
def toy():
    return toy_data()


@pytest.fixture
def schema():
    return TOY_SCHEMA


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is None or not acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for label in sorted(acceptance.RESULTS, key=lambda s: (int(s.rstrip("ab")), s)):
        terminalreporter.write_line(acceptance.RESULTS[label])


__all__ = ["numeric_grad", "rel_error", "toy_config", "toy_data", "TOY_SCHEMA", "PAD"]

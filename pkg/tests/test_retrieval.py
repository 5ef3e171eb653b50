import json
from collections import Counter
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from perscen.autograd import Tensor
from perscen.model import Perscen
from perscen.retrieval import (
    ScenarioIndex,
    build_index,
    evaluate,
    evaluate_popularity,
    evaluate_rankings,
    hits_at_k,
    inner_product_scores,
    load_index,
    popularity_baseline,
    recall_at_k,
    retrieve_topk,
    save_index,
)
from perscen.schema import InteractionLog

from conftest import TOY_SCHEMA, toy_config


def brute_force(q, vectors, ids, k):
    scores = [(-float(np.dot(q, v)), int(i)) for v, i in zip(vectors, ids)]
    return [i for _, i in sorted(scores)[:k]]


class TestRetrieveTopk:
    def test_large_corpus_matches_full_sort(self):
        rng = np.random.default_rng(0)
        vectors = rng.normal(size=(10_000, 8))
        vectors[[5000, 9000]] = vectors[17]  # three items share one vector
        ids = rng.permutation(10_000)
        index = ScenarioIndex(0, ids, vectors)
        queries = rng.normal(size=(100, 8))
        queries[0] = vectors[17]
        exact = inner_product_scores(queries, vectors)
        np.testing.assert_allclose(exact, queries @ vectors.T, rtol=1e-10, atol=1e-10)
        for k in (1, 10, 100, 10_000):
            got = retrieve_topk(queries, index, k)
            for q in range(100):
                np.testing.assert_array_equal(got[q], ids[np.lexsort((ids, -exact[q]))][:k])
        # plain python sort on a few queries as a second oracle
        for q in range(3):
            ref = sorted(range(10_000), key=lambda j: (-exact[q, j], ids[j]))[:100]
            assert got[q][:100].tolist() == ids[ref].tolist()

    def test_small_reference(self):
        rng = np.random.default_rng(1)
        vectors, ids = np.round(rng.normal(size=(30, 3)), 1), np.arange(30)
        for _ in range(20):
            q = np.round(rng.normal(size=3), 1)
            assert retrieve_topk(q, ScenarioIndex(0, ids, vectors), 7).tolist() == brute_force(q, vectors, ids, 7)

    def test_tie_lower_id_first(self):
        index = ScenarioIndex(0, [9, 4], np.ones((2, 2)))
        assert retrieve_topk(np.array([1.0, 1.0]), index, 2).tolist() == [4, 9]

    def test_k_beyond_corpus(self):
        index = ScenarioIndex(0, [0, 1, 2], np.eye(3))
        assert retrieve_topk(np.array([0.0, 1.0, 0.5]), index, 50).tolist() == [1, 2, 0]

    def test_errors(self):
        with pytest.raises(ValueError):
            retrieve_topk(np.zeros(2), ScenarioIndex(0, [], np.zeros((0, 2))), 1)
        with pytest.raises(ValueError):
            retrieve_topk(np.zeros(2), ScenarioIndex(0, [0], np.zeros((1, 2))), 0)
        with pytest.raises(ValueError):
            ScenarioIndex(0, [1, 1], np.zeros((2, 2)))

    def test_exclusion(self):
        index = ScenarioIndex(0, [0, 1, 2, 3], np.array([[4.0], [3.0], [2.0], [1.0]]))
        got = retrieve_topk(np.array([[1.0]]), index, 2, exclude=[np.array([0, 2])])
        assert got[0].tolist() == [1, 3]

    def test_sigmoid_rank_invariance(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            s = rng.normal(scale=3, size=200)
            by_raw = np.lexsort((np.arange(200), -s))
            by_sig = np.lexsort((np.arange(200), -1 / (1 + np.exp(-s))))
            np.testing.assert_array_equal(by_raw, by_sig)


def ref_recall(ranking, relevant, k):
    top = ranking[:k]
    return sum(1 for r in relevant if r in top) / len(relevant)


def ref_hits(ranking, relevant, k):
    return float(any(r in ranking[:k] for r in relevant))


class TestMetrics:
    def test_examples(self):
        assert recall_at_k(["a", "x"], {"a", "b", "c"}, 2) == pytest.approx(1 / 3)
        assert hits_at_k(["a", "x"], {"a", "b", "c"}, 2) == 1.0
        assert hits_at_k(["x", "y"], {"a"}, 2) == 0.0
        assert recall_at_k([3, 1, 2], {1, 2}, 10) == 1.0

    def test_empty_relevant(self):
        with pytest.raises(ValueError):
            recall_at_k([1], set(), 1)

    def test_thousand_random_cases(self):
        rng = np.random.default_rng(3)
        for _ in range(1000):
            n = int(rng.integers(1, 50))
            ranking = rng.permutation(n).tolist()
            relevant = set(rng.choice(n + 5, int(rng.integers(1, min(8, n + 5))), replace=False).tolist())
            prev_r = prev_h = 0.0
            for k in (1, 5, 10, 50):
                r, h = recall_at_k(ranking, relevant, k), hits_at_k(ranking, relevant, k)
                assert r == ref_recall(ranking, relevant, k)
                assert h == ref_hits(ranking, relevant, k)
                assert 0.0 <= r <= h <= 1.0
                assert r >= prev_r and h >= prev_h
                prev_r, prev_h = r, h

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(0, 30), min_size=1, max_size=30, unique=True),
           st.sets(st.integers(0, 30), min_size=1, max_size=10))
    def test_monotone_in_k(self, ranking, relevant):
        recalls = [recall_at_k(ranking, relevant, k) for k in range(1, 32)]
        assert recalls == sorted(recalls)


class _ConstantModel:
    """Every item scores the same for every user."""

    config = SimpleNamespace(d_match=2)

    def items(self, data, items, scenario):
        return SimpleNamespace(embedding=Tensor(np.ones((len(items), 2))))

    def users(self, data, users, scenario):
        return SimpleNamespace(embedding=Tensor(np.ones((len(users), 2))))

    def parameter_count(self):
        return 0


class TestEvaluate:
    def test_constant_scores_rank_by_id(self):
        log = InteractionLog.from_records([(0, 1, 0, 9, 1), (0, 5, 0, 9, 1), (1, 7, 0, 9, 1), (2, 0, 1, 9, 1)])
        data = SimpleNamespace(schema=SimpleNamespace(n_items=8, n_scenarios=2),
                               splits=SimpleNamespace(train=InteractionLog.empty()))
        report = evaluate(_ConstantModel(), data, log, [2, 6])
        # ranking is [0, 1, 2, ...]: user 0 finds {1} at K=2 and {1, 5} at K=6
        assert report.scenario(0).recall == {2: (0.5 + 0) / 2, 6: (1.0 + 0) / 2}
        assert report.scenario(1).recall == {2: 1.0, 6: 1.0}

    def test_single_group_forced(self):
        report = evaluate_rankings({0: {3: {7}}}, lambda s, users: [[7, 1, 2]], [1], 1)
        assert report.scenario(0).recall[1] == report.scenario(0).hits[1] == 1.0

    def test_missing_scenario_noted(self):
        report = evaluate_rankings({0: {3: {7}}}, lambda s, users: [[7]], [1], 2)
        assert [s.scenario_id for s in report.scenarios] == [0]
        assert report.notes and "scenario 1" in report.notes[0]

    def test_report_keys(self, toy):
        model = Perscen(TOY_SCHEMA, toy_config())
        report = evaluate(model, toy, toy.splits.test, [4, 2], dataset="toy").to_dict()
        assert report["Ks"] == [2, 4]
        for s in report["scenarios"]:
            assert set(s) == {"id", "groups", "recall", "hits"}
            assert list(s["recall"]) == ["2", "4"] and list(s["hits"]) == ["2", "4"]
            for k in ("2", "4"):
                assert 0.0 <= s["recall"][k] <= s["hits"][k] <= 1.0
        json.dumps(report)


class TestIndex:
    def test_one_index_per_scenario_matches_tower(self, toy):
        model = Perscen(TOY_SCHEMA, toy_config())
        for s in range(TOY_SCHEMA.n_scenarios):
            index = build_index(model, toy, s)
            assert index.scenario_id == s and len(index) == TOY_SCHEMA.n_items
            for i in range(TOY_SCHEMA.n_items):
                np.testing.assert_array_equal(index.vectors[i], model.items(toy, [i], s).embedding.data[0])
            np.testing.assert_array_equal(build_index(model, toy, s).vectors, index.vectors)

    def test_save_load(self, tmp_path):
        vecs = np.random.default_rng(4).normal(size=(5, 3)).astype(np.float32).astype(np.float64)
        index = ScenarioIndex(2, [4, 0, 3, 1, 2], vecs)
        save_index(index, tmp_path)
        back = load_index(tmp_path)
        assert back.scenario_id == 2
        np.testing.assert_array_equal(back.item_ids, index.item_ids)
        np.testing.assert_array_equal(back.vectors, vecs)
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert (tmp_path / "vectors.bin").stat().st_size == 5 * manifest["offsets"]["row_stride_bytes"]


class TestPopularity:
    def test_forced_order(self):
        log = InteractionLog.from_records([(0, 0, 0, 1, 1)] * 3 + [(1, 1, 0, 1, 1)])
        assert popularity_baseline(log, 2, 1)[0].tolist() == [0, 1]

    def test_unseen_appended_by_id(self):
        log = InteractionLog.from_records([(0, 3, 0, 1, 1), (0, 3, 0, 2, 1), (0, 1, 0, 3, 1)])
        assert popularity_baseline(log, 5, 1)[0].tolist() == [3, 1, 0, 2, 4]

    def test_matches_counter(self):
        rng = np.random.default_rng(5)
        n = 500
        log = InteractionLog(rng.integers(0, 9, n), rng.integers(0, 40, n), rng.integers(0, 3, n),
                             np.arange(n), rng.integers(0, 2, n))
        ranks = popularity_baseline(log, 40, 3)
        for s in range(3):
            c = Counter(int(i) for i, ss, y in zip(log.item, log.scenario, log.label) if ss == s and y == 1)
            expected = sorted(range(40), key=lambda i: (-c.get(i, 0), i))
            assert ranks[s].tolist() == expected

    def test_evaluate_popularity(self, toy):
        report = evaluate_popularity(toy, toy.splits.test, [2, 4])
        for s in report.scenarios:
            assert s.recall[2] <= s.recall[4]

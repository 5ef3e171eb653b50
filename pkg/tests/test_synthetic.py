import numpy as np
import pytest
from scipy.stats import chi2_contingency

from perscen.config import RunConfig
from perscen.synthetic import SyntheticSpec, generate_synthetic, write_synthetic


def category_table(data, cluster):
    """scenario x category click counts for users of one cluster."""
    log = data.log
    mask = data.user_cluster[log.user] == cluster
    table = np.zeros((data.spec.n_scenarios, data.spec.n_categories))
    np.add.at(table, (log.scenario[mask], data.item_category[log.item[mask]]), 1)
    return table[:, table.sum(axis=0) > 0]


class TestGenerate:
    def test_row_count(self):
        data = generate_synthetic(SyntheticSpec(n_users=200, n_items=300, n_scenarios=3))
        assert len(data.log) == 200 * 40
        assert (data.log.label == 1).all()

    def test_ids_in_range_and_sorted(self):
        data = generate_synthetic(SyntheticSpec(n_users=20, n_items=30, interactions_per_user=5, seed=3))
        log = data.log
        assert log.item.max() < 30 and log.scenario.max() < 3
        assert (np.diff(log.timestamp) >= 0).all()
        assert data.train_end < data.valid_end

    def test_scenario_skew(self):
        data = generate_synthetic(SyntheticSpec(seed=1))
        share = np.bincount(data.log.scenario, minlength=3) / len(data.log)
        np.testing.assert_allclose(share, [0.7, 0.2, 0.1], atol=0.03)

    def test_zero_shift_scenarios_indistinguishable(self):
        for seed in range(10):
            data = generate_synthetic(SyntheticSpec(scenario_shift_strength=0.0, seed=seed))
            for k in range(2):
                assert chi2_contingency(category_table(data, k))[1] > 0.01

    def test_shift_is_detectable(self):
        data = generate_synthetic(SyntheticSpec(scenario_shift_strength=2.0, seed=0))
        assert chi2_contingency(category_table(data, 0))[1] < 1e-6

    def test_invalid_spec(self):
        with pytest.raises(ValueError):
            SyntheticSpec(n_users=0)
        with pytest.raises(ValueError):
            SyntheticSpec(scenario_shift_strength=-1.0)
        with pytest.raises(ValueError):
            SyntheticSpec(n_scenarios=2, scenario_weights=(1.0, 1.0, 1.0)).weights()


class TestWrite:
    def test_same_seed_same_bytes(self, tmp_path):
        spec = SyntheticSpec(n_users=30, n_items=40, interactions_per_user=6, seed=7)
        write_synthetic(generate_synthetic(spec), tmp_path / "a")
        write_synthetic(generate_synthetic(spec), tmp_path / "b")
        names = sorted(p.name for p in (tmp_path / "a").iterdir())
        assert names == sorted(p.name for p in (tmp_path / "b").iterdir())
        for name in names:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_different_seed_differs(self, tmp_path):
        for seed, sub in ((0, "a"), (1, "b")):
            write_synthetic(generate_synthetic(SyntheticSpec(n_users=10, n_items=20, seed=seed)), tmp_path / sub)
        assert (tmp_path / "a/interactions.csv").read_bytes() != (tmp_path / "b/interactions.csv").read_bytes()

    def test_run_config_is_relative(self, tmp_path):
        data = generate_synthetic(SyntheticSpec(n_users=10, n_items=20, seed=2))
        write_synthetic(data, tmp_path)
        run = RunConfig.load(tmp_path / "run.json")
        assert run.schema == "schema.json" and run.workdir == "."
        assert (run.train_end, run.valid_end) == (data.train_end, data.valid_end)

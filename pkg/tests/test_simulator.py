"""Network simulator tests: geometry, path loss, covariance, objective."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from mftbo import simulator as sim
from mftbo.acquisition import CostModel
from mftbo.grid import build_grid, make_point

COST = CostModel(costs=(10.0, 20.0, 50.0, 100.0), budget=2000.0)


def small_config(**kw):
    defaults = dict(n_cells=3, n_ues_per_cell=2, n_tx=2, n_rx=4)
    defaults.update(kw)
    return sim.TopologyConfig(**defaults)


@pytest.fixture(scope="module")
def small_task():
    return sim.generate_task(7, small_config(), s_max=20)


class TestGeneration:
    def test_deterministic(self):
        cfg = small_config()
        a = sim.generate_task(3, cfg, s_max=10)
        b = sim.generate_task(3, cfg, s_max=10)
        assert np.array_equal(a.pathloss_db, b.pathloss_db)
        assert np.array_equal(a.los_flags, b.los_flags)
        assert np.array_equal(a.slow_fading, b.slow_fading)
        assert np.array_equal(a.channel_pool, b.channel_pool)

    def test_ue_distances_in_annulus(self):
        cfg = sim.TopologyConfig(n_ues_per_cell=100)
        task = sim.generate_task(4, cfg, s_max=1)
        d = np.linalg.norm(task.ue_positions - task.bs_positions[:, None, :],
                           axis=-1)
        assert d.min() >= cfg.ue_min_dist_m
        assert d.max() <= cfg.cell_radius_m

    def test_serving_pathloss_smaller_in_median(self):
        cfg = sim.TopologyConfig(n_ues_per_cell=100)
        task = sim.generate_task(5, cfg, s_max=1)
        pl = task.pathloss_db
        serving = sim.serving_pathloss(task)
        others = []
        for c in range(cfg.n_cells):
            for c2 in range(cfg.n_cells):
                if c2 != c:
                    others.append(pl[c, :, c2] - serving[c])
        assert np.median(np.concatenate(others)) > 0

    def test_pool_shape(self, small_task):
        cfg = small_task.config
        assert small_task.channel_pool.shape == (
            20, cfg.n_cells, cfg.n_ues_per_cell, cfg.n_cells, cfg.n_rx, cfg.n_tx)
        # unit-variance complex entries
        assert abs(np.var(small_task.channel_pool) - 1.0) < 0.02


class TestPathloss:
    def test_los_reference_value(self):
        cfg = sim.TopologyConfig(carrier_ghz=3.5)
        val = sim.pathloss_db(1.0, True, cfg)
        assert_allclose(val, 32.4 + 20.0 * np.log10(3.5), rtol=1e-12)

    def test_nlos_at_least_los(self):
        cfg = sim.TopologyConfig()
        d = np.linspace(1.0, 500.0, 50)
        assert np.all(sim.pathloss_db(d, False, cfg) >= sim.pathloss_db(d, True, cfg))

    def test_monotone_in_distance(self):
        cfg = sim.TopologyConfig()
        d = np.linspace(1.0, 500.0, 200)
        for los in (True, False):
            pl = sim.pathloss_db(d, los, cfg)
            assert np.all(np.diff(pl) >= 0)

    def test_los_probability_limits(self):
        assert_allclose(sim.los_probability(1.0), 1.0)
        assert sim.los_probability(5000.0) < 0.01


class TestTransmitPower:
    def test_clamped_at_max(self):
        x = make_point(24.0, 1.0)
        assert sim.transmit_power_dbm(x, 100.0, 24.0) == 24.0

    def test_no_compensation(self):
        x = make_point(-40.0, 0.0)
        assert sim.transmit_power_dbm(x, 87.3, 24.0) == -40.0

    def test_partial_compensation(self):
        x = make_point(-100.0, 0.7)
        assert_allclose(sim.transmit_power_dbm(x, 120.0, 24.0), -16.0)

    def test_power_map_never_exceeds_max(self, small_task):
        for p0, alpha in [(-202.0, 0.0), (24.0, 1.0), (0.0, 0.8)]:
            pm = sim.power_map(small_task, make_point(p0, alpha))
            assert np.all(pm.p_tx_dbm <= small_task.config.p_max_dbm)


class TestInterferenceCovariance:
    def test_hermitian(self, small_task):
        pm = sim.power_map(small_task, make_point(-60.0, 0.8))
        g = sim.interference_covariance(small_task, pm, 0, 1, 1)
        assert np.linalg.norm(g - g.conj().T) <= 1e-12 * np.linalg.norm(g)

    def test_min_eigenvalue_at_noise_floor(self, small_task):
        pm = sim.power_map(small_task, make_point(-40.0, 0.9))
        noise = 10.0 ** (small_task.config.noise_power_db / 10.0)
        for c in range(3):
            g = sim.interference_covariance(small_task, pm, 1, c, 0)
            assert np.linalg.eigvalsh(g).min() >= noise - 1e-9 * noise

    def test_noise_only_limit(self, small_task):
        cfg = small_task.config
        p = np.full((cfg.n_cells, cfg.n_ues_per_cell), -202.0)
        p[1, 0] = 10.0  # the observed user's own power is not in Gamma
        pm = sim.PowerMap(p)
        g = sim.interference_covariance(small_task, pm, 0, 1, 0)
        noise = 10.0 ** (cfg.noise_power_db / 10.0)
        assert np.linalg.norm(g - noise * np.eye(cfg.n_rx)) <= 1e-6 * noise


class TestSSE:
    def test_isolated_link_matches_capacity_formula(self):
        # 1 cell, 1 user: no interference; oracle via eigenvalues of H H^H
        cfg = sim.TopologyConfig(n_cells=1, n_ues_per_cell=1, n_tx=2, n_rx=4)
        task = sim.generate_task(11, cfg, s_max=5)
        x = make_point(-30.0, 0.5)
        pm = sim.power_map(task, x)
        noise = 10.0 ** (cfg.noise_power_db / 10.0)
        for s in range(5):
            h = task.channel_matrix(s, 0, 0, 0)
            eig = np.linalg.eigvalsh(h @ h.conj().T)
            snr = pm.linear_mw()[0, 0] / noise
            expected = np.sum(np.log2(1.0 + snr * np.clip(eig, 0, None)))
            assert_allclose(sim.sse_sample(task, x, s), expected, rtol=1e-6)

    def test_scalar_shannon_capacity(self):
        cfg = sim.TopologyConfig(n_cells=1, n_ues_per_cell=1, n_tx=1, n_rx=1)
        task = sim.generate_task(12, cfg, s_max=2)
        x = make_point(0.0, 0.3)
        pm = sim.power_map(task, x)
        h = task.channel_matrix(0, 0, 0, 0)
        noise = 10.0 ** (cfg.noise_power_db / 10.0)
        expected = np.log2(1.0 + pm.linear_mw()[0, 0] * abs(h[0, 0]) ** 2 / noise)
        assert_allclose(sim.sse_sample(task, x, 0), expected, rtol=1e-9)

    def test_vanishing_power_limit(self, small_task):
        assert sim.sse_sample(small_task, make_point(-202.0, 0.0), 0) < 1e-3

    def test_non_negative(self, small_task):
        rng = np.random.default_rng(13)
        grid = build_grid()
        for _ in range(50):
            x = grid[rng.integers(len(grid))]
            assert sim.sse_sample(small_task, x, int(rng.integers(20))) >= 0.0

    def test_monotone_in_power_single_link(self):
        cfg = sim.TopologyConfig(n_cells=1, n_ues_per_cell=1, n_tx=2, n_rx=2)
        task = sim.generate_task(14, cfg, s_max=1)
        values = [sim.sse_sample(task, make_point(p0, 0.0), 0)
                  for p0 in np.arange(-202.0, 26.0, 2.0)]
        assert np.all(np.diff(values) >= 0)

    def test_matches_dense_covariance_evaluation(self, small_task):
        # oracle: per-user log det with explicitly assembled covariance
        x = make_point(-70.0, 0.7)
        pm = sim.power_map(small_task, x)
        lin = pm.linear_mw()
        cfg = small_task.config
        total = 0.0
        for c in range(cfg.n_cells):
            for u in range(cfg.n_ues_per_cell):
                g = sim.interference_covariance(small_task, pm, 2, c, u)
                h = small_task.channel_matrix(2, c, u, c)
                m = np.eye(cfg.n_rx) + lin[c, u] * np.linalg.solve(g, h @ h.conj().T)
                total += np.linalg.slogdet(m)[1] / np.log(2.0)
        assert_allclose(sim.sse_sample(small_task, x, 2), total, rtol=1e-9)


class TestFidelities:
    def test_highest_fidelity_is_full_pool_mean(self, small_task):
        cost = CostModel(costs=(2.0, 5.0, 20.0), budget=100.0)
        x = make_point(-50.0, 0.6)
        f = sim.evaluate_fidelity(small_task, x, 3, cost)
        direct = np.mean([sim.sse_sample(small_task, x, s) for s in range(20)])
        assert_allclose(f, direct, rtol=1e-12)

    def test_deterministic(self, small_task):
        cost = CostModel(costs=(2.0, 5.0, 20.0), budget=100.0)
        x = make_point(-48.0, 0.4)
        a = sim.evaluate_fidelity(small_task, x, 2, cost)
        b = sim.evaluate_fidelity(small_task, x, 2, cost)
        assert a == b

    def test_prefix_nesting_identity(self, small_task):
        # f at the top level is the sample-count weighted mean of the prefix
        # blocks; exact arithmetic identity on the per-sample table
        grid = build_grid(p0_values=[-60.0, -40.0], alpha_values=[0.5, 0.9])
        table = sim.per_sample_sse_table(small_task, grid)
        cost = CostModel(costs=(5.0, 10.0, 20.0), budget=100.0)
        for i in range(len(grid)):
            f3 = table[i, :20].mean()
            blocks = (table[i, :5].mean() * 5 + table[i, 5:10].mean() * 5
                      + table[i, 10:20].mean() * 10) / 20.0
            assert_allclose(f3, blocks, atol=1e-12)

    def test_fidelity_hierarchy_converges(self, small_task):
        rng = np.random.default_rng(15)
        grid = build_grid()
        cost = CostModel(costs=(2.0, 5.0, 10.0, 20.0), budget=100.0)
        gaps = {m: [] for m in (1, 2, 3)}
        for _ in range(20):
            x = grid[rng.integers(len(grid))]
            f_top = sim.evaluate_fidelity(small_task, x, 4, cost)
            for m in (1, 2, 3):
                gaps[m].append(abs(sim.evaluate_fidelity(small_task, x, m, cost)
                                   - f_top))
        med = [np.median(gaps[m]) for m in (1, 2, 3)]
        assert med[0] >= med[1] >= med[2]

    def test_table_lookup_matches_direct(self, small_task):
        grid = build_grid(p0_values=[-60.0, -40.0], alpha_values=[0.5, 0.9])
        cost = CostModel(costs=(5.0, 20.0), budget=100.0)
        x = grid[2]
        direct = sim.evaluate_fidelity(small_task, x, 1, cost)
        sim.per_sample_sse_table(small_task, grid)
        via_table = sim.evaluate_fidelity(small_task, x, 1, cost, grid)
        assert_allclose(via_table, direct, rtol=1e-9)

    def test_pool_size_guard(self, small_task):
        cost = CostModel(costs=(5.0, 100.0), budget=100.0)
        with pytest.raises(ValueError):
            sim.evaluate_fidelity(small_task, make_point(0.0, 0.5), 2, cost)


class TestObserve:
    def test_zero_noise_equals_fidelity(self, small_task):
        cost = CostModel(costs=(2.0, 5.0), budget=100.0)
        x = make_point(-44.0, 0.7)
        rng = np.random.default_rng(16)
        y = sim.observe(small_task, x, 1, cost, 0.0, rng)
        assert y == sim.evaluate_fidelity(small_task, x, 1, cost)

    def test_noise_variance_calibrated(self, small_task):
        cost = CostModel(costs=(2.0, 5.0), budget=100.0)
        x = make_point(-44.0, 0.7)
        f = sim.evaluate_fidelity(small_task, x, 1, cost)
        rng = np.random.default_rng(17)
        draws = np.array([sim.observe(small_task, x, 1, cost, 0.83, rng)
                          for _ in range(10 ** 4)])
        assert abs(np.var(draws - f, ddof=1) - 0.83) <= 0.05 * 0.83

    def test_different_seeds_different_noise(self, small_task):
        cost = CostModel(costs=(2.0, 5.0), budget=100.0)
        x = make_point(-44.0, 0.7)
        y1 = sim.observe(small_task, x, 1, cost, 0.83, np.random.default_rng(1))
        y2 = sim.observe(small_task, x, 1, cost, 0.83, np.random.default_rng(2))
        assert y1 != y2


class TestOracle:
    def test_argmax_dominates_grid(self, small_task):
        grid = build_grid(p0_values=[-80.0, -60.0, -40.0, -20.0],
                          alpha_values=[0.4, 0.7, 1.0])
        cost = CostModel(costs=(5.0, 20.0), budget=100.0)
        x_star, f_star = sim.oracle_optimum(small_task, grid, cost)
        for x in grid.points:
            assert f_star >= sim.evaluate_fidelity(small_task, x, 2, cost, grid)

    def test_deterministic(self, small_task):
        grid = build_grid(p0_values=[-80.0, -40.0], alpha_values=[0.4, 1.0])
        cost = CostModel(costs=(5.0, 20.0), budget=100.0)
        assert (sim.oracle_optimum(small_task, grid, cost)
                == sim.oracle_optimum(small_task, grid, cost))

    def test_single_link_prefers_max_effective_power(self):
        # without interference the rate is monotone in power, so the oracle
        # lands on the candidate with the highest clamped power
        cfg = sim.TopologyConfig(n_cells=1, n_ues_per_cell=1, n_tx=2, n_rx=2)
        task = sim.generate_task(18, cfg, s_max=10)
        grid = build_grid()
        cost = CostModel(costs=(2.0, 10.0), budget=100.0)
        x_star, _ = sim.oracle_optimum(task, grid, cost)
        serving = sim.serving_pathloss(task)[0, 0]
        powers = np.array([sim.transmit_power_dbm(x, serving, cfg.p_max_dbm)
                           for x in grid.points])
        assert sim.transmit_power_dbm(x_star, serving, cfg.p_max_dbm) == powers.max()

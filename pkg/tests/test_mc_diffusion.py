import math

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from nlbspde.dual_forward import solve_forward_dual
from nlbspde.errors import CoefficientError, DomainError
from nlbspde.mc_diffusion import (StartLaw, estimate_exit_bound,
                                  evaluate_nu2, feynman_kac_check,
                                  girsanov_weight, mean_estimate,
                                  simulate_paths, survival_series,
                                  wilson_interval)
from nlbspde.scenario_tree import build_tree
from nlbspde.spatial_disc import Grid, constant_profile

SURVIVAL_T1 = 0.009157
SURVIVAL_T01 = 0.7723


@pytest.fixture
def brownian():
    """dy = dw-tilde: b = 1/2, no drift, no coupling."""
    return constant_profile(0.5, 0.0, 0.0, beta=[0.0], beta_bar=[0.0])


@pytest.fixture
def killed_coupled():
    return constant_profile(0.5, 0.0, 1.0, beta=[0.0], beta_bar=[0.5])


class TestSurvivalSeries:
    def test_unit_horizon(self):
        value = survival_series(0.5, 0.0, 1.0, 1.0, 0.5)
        assert value == pytest.approx(SURVIVAL_T1, rel=1e-3)
        leading = 4.0 / np.pi * np.exp(-np.pi ** 2 / 2.0)
        assert value == pytest.approx(leading, rel=1e-6)

    def test_short_horizon(self):
        assert survival_series(0.5, 0.0, 1.0, 0.1, 0.5) == \
            pytest.approx(SURVIVAL_T01, rel=1e-3)

    def test_outside_start(self):
        assert survival_series(0.5, 0.0, 1.0, 0.1, 1.5) == 0.0

    def test_uniform_start_exits_earlier(self):
        center = survival_series(0.5, 0.0, 1.0, 0.05, 0.5)
        uniform = survival_series(0.5, 0.0, 1.0, 0.05, StartLaw('uniform'))
        assert uniform < center

    def test_decreasing_in_horizon(self):
        values = [survival_series(0.5, 0.0, 1.0, T, 0.5)
                  for T in (0.1, 0.5, 1.0, 2.0, 4.0)]
        assert np.all(np.diff(values) < 0.0)
        assert values[-1] < 1e-8


class TestSimulatePaths:
    def test_increment_variance(self, brownian):
        n, dt = 20000, 1e-3
        ens = simulate_paths(brownian, -100.0, 100.0, 0.5, n, dt, dt,
                             seed=1, bridge=False)
        increments = ens.y_T - 0.5
        ratio = np.var(increments, ddof=1) / dt
        assert abs(ratio - 1.0) < 3.0 * math.sqrt(2.0 / n)

    def test_start_outside(self, brownian):
        ens = simulate_paths(brownian, 0.0, 1.0, 2.0, 100, 1e-2, 0.1)
        assert_array_equal(ens.tau, 0.0)
        assert not ens.alive.any()

    def test_seeded(self, brownian):
        args = (brownian, 0.0, 1.0, 0.5, 3000, 1e-2, 0.5)
        one = simulate_paths(*args, seed=4, block_size=1000)
        two = simulate_paths(*args, seed=4, block_size=1000)
        assert_array_equal(one.records(), two.records())

    def test_thread_count_does_not_matter(self, brownian):
        args = (brownian, 0.0, 1.0, StartLaw('uniform'), 3000, 1e-2, 0.5)
        one = simulate_paths(*args, seed=5, block_size=700, threads=1)
        three = simulate_paths(*args, seed=5, block_size=700, threads=3)
        assert_array_equal(one.records(), three.records())
        assert_array_equal(one.start, three.start)

    def test_grid_start_stays_in_cells(self, brownian):
        grid = Grid(0.0, 1.0, 7)
        density = np.zeros(7)
        density[2] = 1.0
        ens = simulate_paths(brownian, 0.0, 1.0,
                             StartLaw('grid', density, grid), 500, 1e-2, 0.1)
        assert np.all(np.abs(ens.start - grid.x[2]) <= grid.h / 2.0)

    def test_random_coefficients_rejected(self, brownian):
        brownian.node_amplitude = 0.2
        with pytest.raises(ValueError):
            simulate_paths(brownian, 0.0, 1.0, 0.5, 10, 1e-2, 0.1)

    def test_degenerate_diffusion(self):
        profile = constant_profile(0.5, 0.0, 0.0, beta=[1.0], beta_bar=[0.0])
        with pytest.raises(CoefficientError):
            simulate_paths(profile, 0.0, 1.0, 0.5, 10, 1e-2, 0.1)


class TestWeights:
    def test_no_beta_bar(self, brownian):
        ens = simulate_paths(brownian, 0.0, 1.0, 0.5, 500, 1e-2, 0.2)
        gamma_m, gamma = girsanov_weight(ens)
        assert_array_equal(gamma_m, 1.0)
        assert_array_equal(gamma, gamma_m)

    def test_martingale_mean(self, killed_coupled):
        ens = simulate_paths(killed_coupled, -50.0, 50.0, 0.0, 20000, 1e-2,
                             1.0, seed=2)
        gamma_m, gamma = girsanov_weight(ens)
        est = mean_estimate(gamma_m)
        assert abs(est.estimate - 1.0) < 3.0 * est.se
        assert_array_equal(gamma, np.exp(-1.0 * ens.int_lambda) * gamma_m)

    def test_mean_estimate(self):
        est = mean_estimate([1.0, 2.0, 3.0, 4.0])
        assert est.estimate == pytest.approx(2.5)
        assert est.se == pytest.approx(math.sqrt(5.0 / 3.0 / 4.0))
        assert est.ci_low < 2.5 < est.ci_high
        assert est.n_effective == 4.0
        weighted = mean_estimate([1.0, 1.0], weights=[1.0, 0.0])
        assert weighted.n_effective == pytest.approx(1.0)

    def test_wilson_interval(self):
        low, high = wilson_interval(0, 100)
        assert low == pytest.approx(0.0, abs=1e-12)
        assert 0.0 < high < 0.05
        low, high = wilson_interval(50, 100)
        assert low < 0.5 < high


class TestExitBound:
    def test_short_horizon(self, brownian):
        est = estimate_exit_bound(brownian, 0.0, 1.0, 0.5, 20000, 1e-3, 0.1,
                                  seed=3)
        assert abs(est.estimate - SURVIVAL_T01) < 3.0 * est.se + 2e-3
        assert est.detail['below_one']

    @pytest.mark.slow
    def test_unit_horizon(self, brownian):
        est = estimate_exit_bound(brownian, 0.0, 1.0, 0.5, 10 ** 6, 1e-3, 1.0,
                                  seed=7, threads=4)
        assert abs(est.estimate - SURVIVAL_T1) < 3.0 * est.se


class TestFeynmanKac:
    @pytest.fixture
    def setup(self, killed_coupled):
        tree = build_tree(64, 1, 0.1, collapsed=True)
        grid = Grid(0.0, 1.0, 31)
        rho = np.zeros(grid.J)
        rho[15] = 1.0 / grid.h
        coeffs = killed_coupled.sample(tree, grid)
        return tree, grid, solve_forward_dual(tree, grid, coeffs, 0, rho)

    def test_zero_payoff(self, killed_coupled, setup):
        _, _, dual = setup
        report = feynman_kac_check(killed_coupled, 0.0, 1.0, 0.5,
                                   np.zeros_like, dual, n_paths=1000,
                                   dt_mc=1e-3)
        assert report.mc == 0.0
        assert report.tree == 0.0
        assert report.passed

    def test_killed_survival(self, killed_coupled, setup):
        tree, grid, dual = setup
        oracle = math.exp(-0.1) * SURVIVAL_T01
        report = feynman_kac_check(killed_coupled, 0.0, 1.0, 0.5,
                                   np.ones_like, dual, n_paths=20000,
                                   dt_mc=1e-3, seed=9, oracle=oracle)
        assert report.passed
        assert report.tree == pytest.approx(oracle, rel=0.02)
        assert report.oracle == oracle


class TestNu2:
    def test_satisfiable_case(self):
        report = evaluate_nu2(2.0, 0.5, 0.2)
        assert report.nu2 == pytest.approx(0.5525, abs=1e-4)
        assert report.smallb < 0.0
        assert report.satisfiable
        assert report.nu2_min < 1.0

    def test_large_beta_bar(self):
        report = evaluate_nu2(2.0, 0.5, 2.0)
        assert report.smallb == pytest.approx(1.0 - math.log(2.0))
        assert not report.satisfiable
        assert report.nu2_min >= 1.0

    def test_zero_beta_bar(self):
        for q in (1.5, 2.0, 10.0):
            report = evaluate_nu2(q, 0.3, 0.0)
            assert report.nu2 == pytest.approx(0.3 ** (2.0 * (1.0 - 1.0 / q)))
            assert report.nu2 < 1.0

    def test_domain(self):
        with pytest.raises(DomainError):
            evaluate_nu2(1.0, 0.5, 0.2)
        with pytest.raises(DomainError):
            evaluate_nu2(2.0, 1.0, 0.2)

import numpy as np
import pytest
from numpy.testing import assert_allclose

from nlbspde.dual_forward import (duality_check, fixed_point_exclusion,
                                  gamma_adjoint, lambda_floor,
                                  mass_contraction_check, solve_forward_dual)
from nlbspde.errors import DomainError, ShapeError
from nlbspde.nonlocal_solver import FT, PointTimes, ScaledInitial, TimeKernel
from nlbspde.scenario_tree import build_tree
from nlbspde.spatial_disc import Grid, constant_profile

DUALITY_TOL = 1e-10


@pytest.fixture
def random_problem(coupled_profile, unit_grid):
    """Node-dependent coefficients on a full tree with M=6."""
    coupled_profile.node_amplitude = 0.3
    coupled_profile.node_seed = 11
    tree = build_tree(6, 1, 1.0)
    return tree, unit_grid, coupled_profile.sample(tree, unit_grid)


@pytest.fixture
def killed(unit_grid):
    """Killing rate 2 on T=1, no coupling."""
    grid = Grid(0.0, 1.0, 32)
    tree = build_tree(8, 1, 1.0)
    coeffs = constant_profile(0.5, 0.0, 2.0, beta=[0.0],
                              beta_bar=[0.0]).sample(tree, grid)
    return tree, grid, coeffs


class TestDuality:
    def test_random_data(self, random_problem):
        tree, grid, coeffs = random_problem
        rng = np.random.default_rng(3)
        rho = rng.standard_normal(grid.J)
        Phi = rng.standard_normal((tree.n_nodes(6), grid.J))
        report = duality_check(tree, grid, coeffs, ScaledInitial(kappa=0.7),
                               rho, Phi)
        assert report.gap <= DUALITY_TOL
        assert abs(report.lhs) > 0.0

    def test_multi_level_condition(self, random_problem):
        tree, grid, coeffs = random_problem
        rng = np.random.default_rng(4)
        rho = rng.standard_normal(grid.J)
        Phi = rng.standard_normal((tree.n_nodes(6), grid.J))
        K = rng.standard_normal((grid.J, grid.J)) / grid.J
        cond = PointTimes(points=[(0.0, 0.5), (0.5, K)], scale=1.2)
        assert duality_check(tree, grid, coeffs, cond, rho, Phi).gap <= \
            DUALITY_TOL
        kernel = TimeKernel(k0=lambda t: 1.0 - t)
        assert duality_check(tree, grid, coeffs, kernel, rho, Phi).gap <= \
            DUALITY_TOL

    @pytest.mark.parametrize('kappa, rho_scale, Phi_scale',
                             [(0.0, 1.0, 1.0), (0.7, 0.0, 1.0),
                              (0.7, 1.0, 0.0)])
    def test_vanishing_sides(self, random_problem, kappa, rho_scale,
                             Phi_scale):
        tree, grid, coeffs = random_problem
        rho = rho_scale * grid.mode(1)
        Phi = Phi_scale * np.ones((tree.n_nodes(6), grid.J))
        report = duality_check(tree, grid, coeffs, ScaledInitial(kappa=kappa),
                               rho, Phi)
        assert report.lhs == 0.0
        assert report.rhs == 0.0

    def test_node_dependent_without_coupling(self, unit_grid):
        profile = constant_profile(0.5, 0.0, 2.0, beta=[0.0], beta_bar=[0.0])
        profile.node_amplitude = 0.3
        profile.node_seed = 5
        tree = build_tree(4, 1, 1.0)
        coeffs = profile.sample(tree, unit_grid)
        rng = np.random.default_rng(8)
        rho = rng.standard_normal(unit_grid.J)
        Phi = rng.standard_normal((tree.n_nodes(4), unit_grid.J))
        dual = solve_forward_dual(tree, unit_grid, coeffs, 0, rho)
        assert dual.final().shape == (tree.n_nodes(4), unit_grid.J)
        report = duality_check(tree, unit_grid, coeffs,
                               ScaledInitial(kappa=0.7), rho, Phi)
        assert report.gap <= DUALITY_TOL
        mass = mass_contraction_check(tree, unit_grid, coeffs,
                                      np.ones(unit_grid.J))
        assert mass.passed

    def test_leaf_target_rejected(self, random_problem):
        tree, grid, coeffs = random_problem
        with pytest.raises(ValueError):
            gamma_adjoint(ScaledInitial(target=FT), tree, grid, coeffs,
                          grid.mode(1))


class TestForwardDual:
    def test_zero_density(self, random_problem):
        tree, grid, coeffs = random_problem
        dual = solve_forward_dual(tree, grid, coeffs, 0, np.zeros(grid.J))
        for t in range(tree.depth + 1):
            assert_allclose(dual.p.level(t), 0.0)

    def test_eigen_decay(self, unit_grid):
        b, c = 0.5, 0.3
        tree = build_tree(5, 1, 1.0)
        coeffs = constant_profile(b, 0.0, c, beta=[0.0],
                                  beta_bar=[0.0]).sample(tree, unit_grid)
        rho = unit_grid.mode(1)
        dual = solve_forward_dual(tree, unit_grid, coeffs, 0, rho)
        lam_h = 4.0 / unit_grid.h ** 2 * \
            np.sin(np.pi * unit_grid.h / 2.0) ** 2
        factor = 1.0 / (1.0 + tree.dt * (b * lam_h + c))
        assert_allclose(dual.mass / dual.mass[0],
                        factor ** np.arange(tree.depth + 1), rtol=1e-10)

    def test_mass_non_increasing(self, unit_grid):
        tree = build_tree(6, 1, 1.0)
        coeffs = constant_profile(0.5, 0.2, 0.0, beta=[0.0],
                                  beta_bar=[0.0]).sample(tree, unit_grid)
        rho = np.exp(-50.0 * (unit_grid.x - 0.5) ** 2)
        dual = solve_forward_dual(tree, unit_grid, coeffs, 0, rho)
        assert np.all(np.diff(dual.mass) <= 1e-14)
        assert dual.diagnostics['positive']

    def test_coupled_density_branches(self, coupled):
        tree, grid, coeffs = coupled
        dual = solve_forward_dual(tree, grid, coeffs, 1, grid.mode(1))
        assert dual.p.start == 1
        assert dual.final().shape == (tree.n_nodes(4), grid.J)
        assert dual.mass.size == tree.depth

    def test_bad_arguments(self, coupled):
        tree, grid, coeffs = coupled
        with pytest.raises(ShapeError):
            solve_forward_dual(tree, grid, coeffs, 0, np.ones(grid.J + 1))
        with pytest.raises(ValueError):
            solve_forward_dual(tree, grid, coeffs, 5, np.ones(grid.J))


class TestMassContraction:
    def test_killing_rate(self, killed):
        tree, grid, coeffs = killed
        rho = np.exp(-20.0 * (grid.x - 0.5) ** 2)
        report = mass_contraction_check(tree, grid, coeffs, rho)
        assert report.bound == pytest.approx(1.25 ** -8)
        assert report.passed
        assert report.final_mass <= 1.25 ** -8 + 1e-6
        assert report.final_mass <= np.exp(-2.0)
        assert report.detail['continuum_bound'] == pytest.approx(np.exp(-2.0))

    def test_weak_diffusion_meets_discrete_bound(self):
        # little boundary killing: the scheme keeps more than exp(-c T)
        grid = Grid(0.0, 1.0, 32)
        tree = build_tree(8, 1, 1.0)
        coeffs = constant_profile(0.01, 0.0, 2.0, beta=[0.0],
                                  beta_bar=[0.0]).sample(tree, grid)
        report = mass_contraction_check(tree, grid, coeffs, np.ones(grid.J))
        assert report.passed
        assert report.final_mass == pytest.approx(0.13837, abs=1e-4)
        assert report.final_mass > report.detail['continuum_bound']
        assert report.bound == pytest.approx(1.25 ** -8)

    def test_small_kappa(self, unit_grid):
        tree = build_tree(8, 1, 1.0)
        coeffs = constant_profile(0.5, 0.0, 0.0, beta=[0.0],
                                  beta_bar=[0.0]).sample(tree, unit_grid)
        report = mass_contraction_check(tree, unit_grid, coeffs,
                                        np.ones(unit_grid.J), condition='ii',
                                        kappa=0.5)
        q = np.log(0.5)
        assert report.bound == pytest.approx((1.0 - q / 8) ** -8)
        assert report.detail['continuum_bound'] == pytest.approx(0.5)
        assert report.passed
        assert report.detail['q'] == pytest.approx(q)
        assert report.final_mass < report.detail['unshifted_mass']
        assert report.detail['transform_mass'] == pytest.approx(
            0.5 * report.detail['unshifted_mass'], rel=1e-10)

    def test_transform_mass_converges_to_shifted_mass(self, unit_grid):
        profile = constant_profile(0.5, 0.0, 0.0, beta=[0.0], beta_bar=[0.0])
        gaps = []
        for depth in (8, 32):
            tree = build_tree(depth, 1, 1.0, collapsed=True)
            report = mass_contraction_check(
                tree, unit_grid, profile.sample(tree, unit_grid),
                np.ones(unit_grid.J), condition='ii', kappa=0.5)
            gap = report.detail['transform_gap']
            assert gap == pytest.approx(
                abs(report.final_mass - report.detail['transform_mass'])
                / report.detail['transform_mass'])
            gaps.append(gap)
        assert gaps[1] < 0.5 * gaps[0]
        assert gaps[1] < 0.15

    def test_given_nu2(self, killed):
        tree, grid, coeffs = killed
        report = mass_contraction_check(tree, grid, coeffs,
                                        np.ones(grid.J), condition='iii',
                                        nu2=0.5)
        assert report.passed
        assert report.bound == 0.5

    def test_zero_density(self, killed):
        tree, grid, coeffs = killed
        report = mass_contraction_check(tree, grid, coeffs, np.zeros(grid.J))
        assert report.final_mass == 0.0
        assert report.passed

    def test_domain_errors(self, killed, unit_grid):
        tree, grid, coeffs = killed
        with pytest.raises(DomainError):
            mass_contraction_check(tree, grid, coeffs, -np.ones(grid.J))
        with pytest.raises(DomainError):
            mass_contraction_check(tree, grid, coeffs, np.ones(grid.J),
                                   condition='ii', kappa=1.5)
        with pytest.raises(DomainError):
            mass_contraction_check(tree, grid, coeffs, np.ones(grid.J),
                                   condition='iii', nu2=1.0)
        flat = constant_profile(0.5, 0.0, 0.0, beta=[0.0],
                                beta_bar=[0.0]).sample(tree, grid)
        with pytest.raises(DomainError):
            mass_contraction_check(tree, grid, flat, np.ones(grid.J))

    def test_lambda_floor(self, coupled):
        tree, _, coeffs = coupled
        assert lambda_floor(coeffs, tree) == pytest.approx(1.0)


class TestFixedPointExclusion:
    def test_killing_rate(self, killed):
        tree, grid, coeffs = killed
        result = fixed_point_exclusion(tree, grid, coeffs, np.exp(-2.0))
        assert result['kappa_bar'] > 1.0
        assert result['kappa_bar'] * np.exp(-2.0) < 1.0
        assert result['passed']

    def test_nu_star_range(self, killed):
        tree, grid, coeffs = killed
        with pytest.raises(DomainError):
            fixed_point_exclusion(tree, grid, coeffs, 1.0)

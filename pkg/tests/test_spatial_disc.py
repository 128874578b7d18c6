import numpy as np
import pytest
import scipy.linalg
from numpy.testing import assert_allclose

from nlbspde.errors import (CoefficientError, ConditionError,
                            ConsistencyError, ShapeError)
from nlbspde.scenario_tree import build_tree
from nlbspde.spatial_disc import (DIVERGENCE, Grid, TridiagonalOperator,
                                  adjoint_gap, analytic_A_star,
                                  analytic_B_star, assemble_A,
                                  assemble_A_star, assemble_B,
                                  assemble_B_star, beta_tilde,
                                  check_adjoint, check_boundary_beta,
                                  check_coercivity, coefficient_bounds,
                                  constant_profile, f_tilde, peclet_number,
                                  smooth_profile, sup_beta_bar_squared,
                                  to_divergence, to_nondivergence)

ADJOINT_TOL = 1e-11


def _constant(tree, grid, b=1.0, drift=0.0, lam=0.0, beta=(0.0,),
              beta_bar=None, form='nondivergence'):
    beta = list(beta)
    beta_bar = [0.0] * len(beta) if beta_bar is None else list(beta_bar)
    return constant_profile(b, drift, lam, beta, beta_bar,
                            form=form).sample(tree, grid)


class TestGrid:
    def test_spacing(self):
        grid = Grid(0.0, 1.0, 3)
        assert grid.h == pytest.approx(0.25)
        assert_allclose(grid.x, [0.25, 0.5, 0.75])
        assert grid.x_full.size == 5

    def test_too_few_points(self):
        with pytest.raises(ValueError):
            Grid(0.0, 1.0, 2)

    def test_inner_and_integral(self):
        grid = Grid(0.0, 2.0, 7)
        ones = np.ones(7)
        assert grid.integral(ones) == pytest.approx(7 * 0.25)
        assert grid.inner(ones, 2.0 * ones) == pytest.approx(3.5)


class TestAssembleA:
    def test_heat_eigenvalue(self):
        tree = build_tree(1, 1, 1.0)
        grid = Grid(0.0, 1.0, 64)
        A = assemble_A(_constant(tree, grid), grid, 0)
        v = grid.mode(1)
        Av = A.apply(v[None])[0]
        rel = np.linalg.norm(Av + np.pi ** 2 * v) / \
            np.linalg.norm(np.pi ** 2 * v)
        assert rel < 1e-3

    def test_zero_vector(self, unit_grid):
        tree = build_tree(1, 1, 1.0)
        A = assemble_A(_constant(tree, unit_grid), unit_grid, 0)
        assert_allclose(A.apply(np.zeros((1, unit_grid.J))), 0.0)

    def test_lambda_shifts_diagonal(self, unit_grid):
        tree = build_tree(1, 1, 1.0)
        plain = assemble_A(_constant(tree, unit_grid), unit_grid, 0)
        shifted = assemble_A(_constant(tree, unit_grid, lam=3.0), unit_grid, 0)
        assert_allclose(shifted.diag - plain.diag, -3.0)
        assert_allclose(shifted.lower, plain.lower)
        assert_allclose(shifted.upper, plain.upper)

    def test_divergence_form_constant_b(self, unit_grid):
        tree = build_tree(1, 1, 1.0)
        nd = assemble_A(_constant(tree, unit_grid, drift=0.4), unit_grid, 0)
        dv = assemble_A(_constant(tree, unit_grid, drift=0.4,
                                  form=DIVERGENCE), unit_grid, 0)
        assert_allclose(nd.to_dense(), dv.to_dense())

    def test_coercivity_failure(self, unit_grid):
        tree = build_tree(1, 1, 1.0)
        coeffs = _constant(tree, unit_grid, b=0.5, beta=(1.0,))
        with pytest.raises(ConditionError) as err:
            assemble_A(coeffs, unit_grid, 0)
        assert err.value.delta == pytest.approx(0.0)


class TestAssembleB:
    def test_zeroth_order_only(self, unit_grid):
        tree = build_tree(1, 1, 1.0)
        B = assemble_B(_constant(tree, unit_grid, beta_bar=(0.7,)),
                       unit_grid, 0, 0)
        assert_allclose(B.to_dense(), 0.7 * np.eye(unit_grid.J))

    def test_derivative_of_identity(self, unit_grid):
        tree = build_tree(1, 1, 1.0)
        B = assemble_B(_constant(tree, unit_grid, b=2.0, beta=(1.0,)),
                       unit_grid, 0, 0)
        Bx = B.apply(unit_grid.x[None])[0]
        assert_allclose(Bx[1:-1], 1.0)

    def test_zero_operator(self, unit_grid):
        tree = build_tree(1, 1, 1.0)
        B = assemble_B(_constant(tree, unit_grid), unit_grid, 0, 0)
        assert_allclose(B.to_dense(), 0.0)

    def test_index_range(self, unit_grid):
        tree = build_tree(1, 1, 1.0)
        with pytest.raises(IndexError):
            assemble_B(_constant(tree, unit_grid), unit_grid, 1, 0)


class TestAdjoints:
    def test_transpose_identity(self, coupled):
        tree, grid, coeffs = coupled
        for t in (0, 2):
            assert adjoint_gap(assemble_A(coeffs, grid, t),
                               assemble_A_star(coeffs, grid, t),
                               grid) < ADJOINT_TOL
            assert adjoint_gap(assemble_B(coeffs, grid, 0, t),
                               assemble_B_star(coeffs, grid, 0, t),
                               grid) < ADJOINT_TOL

    def test_constant_beta_is_antisymmetric(self, unit_grid):
        tree = build_tree(1, 1, 1.0)
        coeffs = _constant(tree, unit_grid, b=2.0, beta=(0.8,))
        B = assemble_B(coeffs, unit_grid, 0, 0)
        assert_allclose(analytic_B_star(coeffs, unit_grid, 0, 0).to_dense(),
                        -B.to_dense())

    def test_analytic_stencil_constant_coefficients(self, unit_grid):
        tree = build_tree(1, 1, 1.0)
        coeffs = _constant(tree, unit_grid, drift=0.5, lam=2.0)
        assert_allclose(analytic_A_star(coeffs, unit_grid, 0).to_dense(),
                        assemble_A_star(coeffs, unit_grid, 0).to_dense())

    def test_analytic_stencil_smooth_coefficients(self, coupled):
        tree, grid, coeffs = coupled
        for t in (0, 3):
            assert_allclose(analytic_A_star(coeffs, grid, t).to_dense(),
                            assemble_A_star(coeffs, grid, t).to_dense(),
                            atol=1e-10)

    def test_check_adjoint_rejects(self, unit_grid):
        tree = build_tree(1, 1, 1.0)
        coeffs = _constant(tree, unit_grid, drift=1.0)
        A = assemble_A(coeffs, unit_grid, 0)
        with pytest.raises(ConsistencyError):
            check_adjoint(A, A, unit_grid)


class TestCoercivity:
    def test_pass(self, unit_grid):
        tree = build_tree(2, 1, 1.0)
        report = check_coercivity(_constant(tree, unit_grid, beta=(1.0,)),
                                  unit_grid, tree)
        assert report.delta == pytest.approx(0.5)
        assert report.passed

    def test_boundary_case(self, unit_grid):
        tree = build_tree(2, 1, 1.0)
        report = check_coercivity(_constant(tree, unit_grid, b=0.5,
                                            beta=(1.0,)), unit_grid, tree)
        assert report.delta == pytest.approx(0.0)
        assert not report.passed

    def test_two_components(self, unit_grid):
        tree = build_tree(2, 2, 1.0)
        report = check_coercivity(_constant(tree, unit_grid,
                                            beta=(1.0, 1.0)), unit_grid, tree)
        assert report.delta == pytest.approx(0.0)
        assert not report.passed


class TestCoefficients:
    def test_beta_tilde(self):
        assert_allclose(beta_tilde(np.array([1.0]), [np.array([1.0])]), 1.0)
        with pytest.raises(CoefficientError):
            beta_tilde(np.array([0.5]), [np.array([1.0])])

    def test_f_tilde(self):
        assert_allclose(f_tilde([1.0], [np.array([2.0])], [np.array([0.5])]),
                        [0.0])

    def test_form_round_trip(self, coupled_profile, unit_grid):
        tree = build_tree(1, 1, 1.0)
        coeffs = coupled_profile.sample(tree, unit_grid)
        back = to_nondivergence(to_divergence(coeffs, unit_grid), unit_grid)
        assert_allclose(back.drift.level(0), coeffs.drift.level(0),
                        atol=1e-12)

    def test_smooth_beta_vanishes_on_boundary(self, coupled):
        _, _, coeffs = coupled
        ok, worst = check_boundary_beta(coeffs)
        assert ok
        assert worst < 1e-12

    def test_bounds_and_peclet(self, coupled):
        tree, grid, coeffs = coupled
        bounds = coefficient_bounds(coeffs)
        assert bounds['b'] == pytest.approx(0.7, rel=1e-2)
        assert bounds['beta_bar_1'] == pytest.approx(0.4)
        assert peclet_number(coeffs, grid) < 1.0
        assert sup_beta_bar_squared(coeffs, tree) == pytest.approx(0.16)

    def test_node_random_sample(self, coupled_profile, unit_grid):
        coupled_profile.node_amplitude = 0.3
        coupled_profile.node_seed = 5
        tree = build_tree(3, 1, 1.0)
        coeffs = coupled_profile.sample(tree, unit_grid)
        assert coeffs.b.level(3).shape == (8, unit_grid.J + 2)
        assert not coeffs.is_deterministic
        again = coupled_profile.sample(tree, unit_grid)
        assert_allclose(again.lam.level(2), coeffs.lam.level(2))
        with pytest.raises(ShapeError):
            coupled_profile.sample(build_tree(3, 1, 1.0, collapsed=True),
                                   unit_grid)

    def test_smooth_profile_values(self):
        profile = smooth_profile(0.0, 2.0, 1.0, 1.0, b1=0.5, lam0=1.0,
                                 lam1=2.0)
        b, _, lam, _, _ = profile.evaluate(np.array([1.0]), 0.5)
        assert b[0] == pytest.approx(1.5)
        assert lam[0] == pytest.approx(2.0)


class TestTridiagonalSolve:
    def test_against_dense(self):
        rng = np.random.default_rng(2)
        J = 9
        lower = rng.uniform(-1, 0, (2, J))
        upper = rng.uniform(-1, 0, (2, J))
        diag = 3.0 + rng.uniform(0, 1, (2, J))
        op = TridiagonalOperator(lower, diag, upper)
        rhs = rng.standard_normal((2, J, 3))
        x = op.solve(rhs)
        for r in range(2):
            assert_allclose(x[r], scipy.linalg.solve(op.to_dense(r), rhs[r]),
                            atol=1e-12)
        assert_allclose(op.apply(x), rhs, atol=1e-12)

    def test_broadcast_rhs(self):
        op = TridiagonalOperator(-np.ones((3, 4)), 4.0 * np.ones((3, 4)),
                                 -np.ones((3, 4)))
        x = op.solve(np.ones((1, 4)))
        assert x.shape == (3, 4)

    def test_shape_mismatch(self):
        op = TridiagonalOperator(np.zeros((2, 4)), np.ones((2, 4)),
                                 np.zeros((2, 4)))
        with pytest.raises(ShapeError):
            op.solve(np.ones((3, 4)))

    def test_zero_pivot(self):
        op = TridiagonalOperator(np.zeros((1, 3)), np.zeros((1, 3)),
                                 np.zeros((1, 3)))
        with pytest.raises(ConditionError):
            op.solve(np.ones((1, 3)))

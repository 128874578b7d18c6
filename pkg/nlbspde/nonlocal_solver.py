"""
Non-local boundary conditions u(., T) - Gamma u = xi.

A condition reads the trajectory at a set of tree levels and combines the
read values with scalar or J x J spatial weights. Its output is either
F_0-measurable (an expectation over the nodes of every read level, so one
deterministic profile) or F_T-measurable (one profile per leaf).

With Q = Gamma Lambda_T and T_phi = Gamma L_T phi the problem reduces to
(I - Q) u(., T) = xi + T_phi, solved here by dense LU or by the Neumann
series, after which u = Lambda_T u(., T) + L_T phi.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.linalg

from nlbspde.bspde_solver import (BSPDESolution, operator_L, operator_Lambda,
                                  path_residual)
from nlbspde.errors import (ConsistencyError, DomainError,
                            FredholmAlternativeError, MethodError, ShapeError,
                            TreeSizeError)
from nlbspde.scenario_tree import AdaptedField

logger = logging.getLogger(__name__)

F0 = 'F0'
FT = 'FT'
DEFAULT_Q_BUDGET = 4096
CONDITION_THRESHOLD = 1e12
SPOT_CHECK_TOL = 1e-12
BOUNDARY_TOL = 1e-9


def _as_weight(k, J):
    k = np.asarray(k, dtype=float)
    if k.ndim == 0:
        if not np.isfinite(k):
            raise ValueError('Weights must be finite.')
        return float(k)
    if k.shape != (J, J):
        raise ShapeError('A spatial kernel must be {0} x {0}, got '
                         '{1}.'.format(J, k.shape))
    if not np.all(np.isfinite(k)):
        raise ValueError('Kernel entries must be finite.')
    return k


def _snap(t, tree):
    if not 0.0 <= t < tree.horizon:
        raise DomainError('Condition time {} outside [0, {}).'.format(
            t, tree.horizon))
    level = int(round(t / tree.dt))
    if level >= tree.depth:
        raise DomainError('Condition time {} snaps to the terminal level '
                          '{}.'.format(t, level))
    return level, abs(t - level * tree.dt)


@dataclass
class NonlocalCondition:
    """
    Base of the concrete Gamma families.

    Parameters
    ----------
    target: str
        'F0' or 'FT' measurability of the output.
    scale: float
        Overall factor, (1 + eps) in perturbed problems.
    """
    target: str = F0
    scale: float = 1.0

    def weights(self, tree, grid):
        """
        Read levels and their weights.

        Returns
        -------
        dict
            level -> scalar or (J, J) array, without `scale`.
        float
            Largest time snap distance.
        """
        raise NotImplementedError

    def scaled(self, factor):
        return replace(self, scale=self.scale * factor)

    def describe(self):
        return {'variant': type(self).__name__, 'target': self.target,
                'scale': self.scale}


@dataclass
class ScaledInitial(NonlocalCondition):
    """Gamma u = kappa u(., 0)."""
    kappa: float = 1.0

    def weights(self, tree, grid):
        return {0: _as_weight(self.kappa, grid.J)}, 0.0

    def describe(self):
        return dict(super().describe(), kappa=self.kappa)


@dataclass
class PointTimes(NonlocalCondition):
    """Gamma u = sum_i k_i u(., t_i), k_i scalar or J x J."""
    points: Sequence[Tuple[float, object]] = ()

    def weights(self, tree, grid):
        out, worst = {}, 0.0
        for t, k in self.points:
            level, gap = _snap(t, tree)
            worst = max(worst, gap)
            logger.debug('Condition time %g snapped to level %d (%.2e)',
                         t, level, gap)
            out[level] = _add(out.get(level), _as_weight(k, grid.J))
        return out, worst

    def describe(self):
        return dict(super().describe(),
                    points=[(t, np.asarray(k).tolist()) for t, k in
                            self.points])


@dataclass
class TimeKernel(NonlocalCondition):
    """
    Gamma u = sum_{t < M} dt k0(t dt) u(., t).

    k0 is a callable of time or a sequence of M values, each a scalar or a
    J x J kernel.
    """
    k0: Union[Callable, Sequence] = None

    def weights(self, tree, grid):
        out = {}
        for t in range(tree.depth):
            value = self.k0(t * tree.dt) if callable(self.k0) else self.k0[t]
            out[t] = _as_weight(np.asarray(value) * tree.dt, grid.J)
        return out, 0.0

    def describe(self):
        k0 = 'callable' if callable(self.k0) else np.asarray(self.k0).tolist()
        return dict(super().describe(), k0=k0)


@dataclass
class Mixed(NonlocalCondition):
    """Sum of conditions, each keeping its own scale."""
    parts: List[NonlocalCondition] = field(default_factory=list)

    def weights(self, tree, grid):
        out, worst = {}, 0.0
        for part in self.parts:
            if part.target != self.target:
                raise ValueError('Mixed condition parts must share the '
                                 'target {}.'.format(self.target))
            w, gap = part.weights(tree, grid)
            worst = max(worst, gap)
            for level, k in w.items():
                out[level] = _add(out.get(level), _times(part.scale, k))
        return out, worst

    def describe(self):
        return dict(super().describe(),
                    parts=[p.describe() for p in self.parts])


def _times(alpha, k):
    return alpha * k


def _add(a, b):
    if a is None:
        return b
    if np.ndim(a) == 0 and np.ndim(b) == 2:
        return a * np.eye(b.shape[0]) + b
    if np.ndim(b) == 0 and np.ndim(a) == 2:
        return a + b * np.eye(a.shape[0])
    return a + b


def _weigh(k, values):
    """Apply a weight to a level array (rows, J, *batch)."""
    if np.ndim(k) == 0:
        return k * values
    return np.einsum('ij,nj...->ni...', k, values)


def apply_gamma(cond, sol):
    """
    Evaluate Gamma on a solution.

    Parameters
    ----------
    cond: NonlocalCondition
    sol: BSPDESolution
        Solution on levels 0..M.

    Returns
    -------
    ndarray
        (1, J, *batch) for an F0 target; (rows, J, *batch) at the leaves for
        an FT target, rows being 1 when the result is deterministic.
    """
    tree, grid = sol.tree, sol.grid
    if sol.s != tree.depth:
        raise ValueError('Gamma needs the solution up to the terminal level.')
    weights, _ = cond.weights(tree, grid)
    shape = (1, grid.J) + sol.batch_shape
    if cond.target == F0:
        total = np.zeros(shape)
        for level, k in sorted(weights.items()):
            mean = tree.expectation(sol.u.level(level), level)
            total = total + _weigh(k, mean[None])
        return cond.scale * total
    if cond.target != FT:
        raise ValueError('Unknown target {}.'.format(cond.target))
    total = np.zeros(shape)
    for level, k in sorted(weights.items()):
        term = _weigh(k, sol.u.level(level))
        total = total + tree.expand(term, level, tree.depth)
    return cond.scale * total


@dataclass
class QOperator:
    """
    Dense matrix of Q = Gamma Lambda_T on the discrete terminal space.

    Column c is Gamma(Lambda_T e_c) for the basis field e_c equal to one at
    (row c // J, point c % J) and zero elsewhere.
    """
    matrix: np.ndarray
    rows: int
    J: int
    target: str
    condition: dict
    metadata: dict = field(default_factory=dict)

    @property
    def dim(self):
        return self.matrix.shape[0]

    @property
    def reduced(self):
        return self.rows == 1

    def scaled(self, factor):
        return QOperator(factor * self.matrix, self.rows, self.J, self.target,
                         dict(self.condition, scale=self.condition.get(
                             'scale', 1.0) * factor),
                         dict(self.metadata))


def _terminal_rows(cond, tree):
    return 1 if cond.target == F0 else tree.n_nodes(tree.depth)


def _basis_columns(rows, J, columns):
    """Terminal basis fields for the given flat column indices."""
    basis = np.zeros((rows, J, len(columns)))
    for c, col in enumerate(columns):
        basis[col // J, col % J, c] = 1.0
    return basis


def _q_columns(cond, tree, grid, coeffs, rows, columns):
    basis = _basis_columns(rows, grid.J, columns)
    sol = operator_Lambda(tree, grid, coeffs, basis, diagnostics=False)
    image = apply_gamma(cond, sol)
    image = np.broadcast_to(image, (rows,) + image.shape[1:])
    return image.reshape(rows * grid.J, len(columns))


def assemble_Q(cond, tree, grid, coeffs, q_budget=DEFAULT_Q_BUDGET,
               threads=1, chunk_size=None, spot_checks=3, seed=0):
    """
    Assemble Q column by column from backward solves of basis fields.

    F0 targets give the reduced J x J matrix whatever the tree. FT targets
    act on one profile per leaf; their dimension is leaves x J and must stay
    within `q_budget`.

    Parameters
    ----------
    cond: NonlocalCondition
    tree: ScenarioTree
    grid: Grid
    coeffs: CoefficientSet
    q_budget: int
        Largest admissible dimension of Q.
    threads: int
        Worker threads for column chunks.
    chunk_size: int or None
        Columns per backward solve; defaults to J.
    spot_checks: int
        Number of random columns re-solved one at a time.
    seed: int
        Seed of the spot-check column choice.

    Returns
    -------
    QOperator
    """
    rows = _terminal_rows(cond, tree)
    dim = rows * grid.J
    if dim > q_budget:
        raise TreeSizeError(
            'Q would have dimension {} above the budget {}. Use an F0 target '
            '(reduced J x J path) or a smaller M.'.format(dim, q_budget),
            limit=q_budget, requested=dim)
    chunk_size = chunk_size or grid.J
    chunks = [list(range(a, min(a + chunk_size, dim)))
              for a in range(0, dim, chunk_size)]
    logger.info('Assembling Q (%s target, dimension %d, %d chunks)',
                cond.target, dim, len(chunks))

    def work(columns):
        return _q_columns(cond, tree, grid, coeffs, rows, columns)

    matrix = np.empty((dim, dim))
    if threads and threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            blocks = list(pool.map(work, chunks))
    else:
        blocks = [work(columns) for columns in chunks]
    for columns, block in zip(chunks, blocks):
        matrix[:, columns[0]:columns[-1] + 1] = block

    _, snap = cond.weights(tree, grid)
    Q = QOperator(matrix, rows, grid.J, cond.target, cond.describe(),
                  metadata={'max_snap': snap})
    if spot_checks:
        Q.metadata['spot_gap'] = spot_check_Q(Q, cond, tree, grid, coeffs,
                                              n_columns=spot_checks,
                                              seed=seed)
    return Q


def spot_check_Q(Q, cond, tree, grid, coeffs, n_columns=3, seed=0,
                 tol=SPOT_CHECK_TOL):
    """
    Re-solve random columns of Q one at a time.

    Returns
    -------
    float
        Largest entrywise gap; ConsistencyError when above `tol`.
    """
    rng = np.random.default_rng(seed)
    columns = rng.choice(Q.dim, size=min(n_columns, Q.dim), replace=False)
    gap = 0.0
    for col in sorted(int(c) for c in columns):
        fresh = _q_columns(cond, tree, grid, coeffs, Q.rows, [col])[:, 0]
        gap = max(gap, float(np.max(np.abs(fresh - Q.matrix[:, col]))))
    if gap > tol:
        raise ConsistencyError('Q column re-solve differs by {:.3e}.'.format(
            gap))
    return gap


def apply_T(cond, tree, grid, coeffs, phi):
    """
    T phi = Gamma L_T phi.

    Returns
    -------
    ndarray
        Gamma applied to the source solution.
    BSPDESolution
        The source solution L_T phi.
    """
    sol = operator_L(tree, grid, coeffs, phi)
    return apply_gamma(cond, sol), sol


@dataclass
class SpectrumReport:
    eigenvalues: np.ndarray
    spectral_radius: float
    nearest_to_one: complex
    distance_to_one: float

    def distance_to(self, value):
        return float(np.min(np.abs(self.eigenvalues - value)))

    def eps_distances(self, eps_grid):
        """Distance of 1 / (1 + eps) to the spectrum for every eps."""
        return np.array([self.distance_to(1.0 / (1.0 + e)) for e in eps_grid])


def spectrum(Q):
    """
    Eigenvalues of Q and their position relative to 1.

    Parameters
    ----------
    Q: QOperator or ndarray

    Returns
    -------
    SpectrumReport
    """
    matrix = Q.matrix if isinstance(Q, QOperator) else np.asarray(Q)
    eigenvalues = scipy.linalg.eigvals(matrix)
    nearest = eigenvalues[np.argmin(np.abs(eigenvalues - 1.0))]
    report = SpectrumReport(eigenvalues=eigenvalues,
                            spectral_radius=float(np.max(np.abs(eigenvalues))),
                            nearest_to_one=complex(nearest),
                            distance_to_one=float(abs(nearest - 1.0)))
    logger.info('Spectrum: radius %.6g, distance to 1 %.3g',
                report.spectral_radius, report.distance_to_one)
    return report


def _as_terminal(xi, rows, J):
    xi = np.asarray(xi, dtype=float)
    if xi.ndim == 1:
        xi = xi[None]
    if xi.shape[1] != J or xi.shape[0] not in (1, rows):
        raise ShapeError('Boundary datum of shape {} does not fit the '
                         'terminal space ({} x {}).'.format(xi.shape, rows, J))
    return np.broadcast_to(xi, (rows, J))


def _neumann(matrix, rhs, tol, max_iter, radius):
    x = rhs.copy()
    term = rhs.copy()
    if not np.any(rhs):
        return x, 0
    for k in range(1, max_iter + 1):
        term = matrix @ term
        x = x + term
        increment = float(np.linalg.norm(term))
        logger.debug('Neumann iteration %d: increment %.3e', k, increment)
        if increment <= tol * float(np.linalg.norm(x)):
            return x, k
        if not np.isfinite(increment):
            break
    raise MethodError('Neumann series did not converge in {} iterations '
                      '(spectral radius {:.4g}); use method=direct.'.format(
                          max_iter, radius))


def _combine(lam_sol, l_sol, phi):
    u = lam_sol.u + l_sol.u
    chi = [a + b for a, b in zip(lam_sol.chi, l_sol.chi)]
    eta = lam_sol.eta + l_sol.eta
    return BSPDESolution(tree=lam_sol.tree, grid=lam_sol.grid,
                         coeffs=lam_sol.coeffs, s=lam_sol.s, u=u, chi=chi,
                         eta=eta, Phi=u.level(lam_sol.s), phi=phi)


def boundary_residual(cond, sol, xi):
    """
    Largest |u(., T) - Gamma u - xi| over every leaf and grid point.
    """
    tree = sol.tree
    leaves = tree.n_nodes(tree.depth)
    lhs = sol.u.level(tree.depth) - apply_gamma(cond, sol) - \
        np.asarray(xi, dtype=float).reshape((-1, sol.grid.J))
    lhs = np.broadcast_to(lhs, (leaves,) + lhs.shape[1:])
    return float(np.max(np.abs(lhs)))


def solve_nonlocal(cond, phi, xi, tree, grid, coeffs, method='direct',
                   Q=None, tol=1e-13, max_iter=10000,
                   condition_threshold=CONDITION_THRESHOLD,
                   q_budget=DEFAULT_Q_BUDGET, threads=1, source_solution=None):
    """
    Solve u(., T) - Gamma u = xi with source phi.

    Parameters
    ----------
    cond: NonlocalCondition
    phi: AdaptedField or None
        Source on levels 0..M-1.
    xi: ndarray
        Boundary datum, (J,) or one profile per terminal row.
    tree, grid, coeffs:
        Discretization.
    method: str
        'direct' (LU) or 'neumann'.
    Q: QOperator or None
        Precomputed Q for this condition.
    tol: float
        Relative increment at which the Neumann series stops.
    max_iter: int
    condition_threshold: float
        Condition number of I - Q above which the problem is singular.
    source_solution: BSPDESolution or None
        Precomputed L_T phi.

    Returns
    -------
    BSPDESolution
        With diagnostics path_residual, boundary_residual, method,
        iterations, condition_number and spectral_radius.
    """
    if method not in ('direct', 'neumann'):
        raise MethodError('Unknown method {}; use direct or '
                          'neumann.'.format(method))
    if phi is None:
        phi = AdaptedField.zeros(tree, grid.J, start=0, stop=tree.depth - 1)
    if Q is None:
        Q = assemble_Q(cond, tree, grid, coeffs, q_budget=q_budget,
                       threads=threads)
    rows = Q.rows
    xi_t = _as_terminal(xi, rows, grid.J)
    if source_solution is None:
        source_solution = operator_L(tree, grid, coeffs, phi)
    t_phi = apply_gamma(cond, source_solution)
    rhs = (xi_t + np.broadcast_to(t_phi, (rows, grid.J))).reshape(-1)

    system = np.eye(Q.dim) - Q.matrix
    condition_number = float(np.linalg.cond(system))
    diagnostics = {'method': method, 'condition_number': condition_number,
                   'iterations': 0, 'q_dimension': Q.dim}
    if method == 'direct':
        if not condition_number < condition_threshold:
            report = spectrum(Q)
            raise FredholmAlternativeError(
                'I - Q is numerically singular (condition number {:.3e}); '
                'nearest eigenvalue of Q to 1 is {:.6g}.'.format(
                    condition_number, report.nearest_to_one),
                nearest_eigenvalue=report.nearest_to_one,
                condition_number=condition_number)
        terminal = scipy.linalg.lu_solve(scipy.linalg.lu_factor(system), rhs)
    else:
        radius = spectrum(Q).spectral_radius
        if radius >= 1.0:
            raise MethodError('Spectral radius of Q is {:.4g} >= 1, the '
                              'Neumann series diverges; use '
                              'method=direct.'.format(radius))
        terminal, iterations = _neumann(Q.matrix, rhs, tol, max_iter, radius)
        diagnostics.update(iterations=iterations, spectral_radius=radius,
                           contraction=radius)
        if radius > 0.0:
            diagnostics['expected_iterations'] = \
                float(np.log(tol) / np.log(radius))

    terminal = terminal.reshape(rows, grid.J)
    lam_sol = operator_Lambda(tree, grid, coeffs, terminal,
                              diagnostics=False)
    sol = _combine(lam_sol, source_solution, phi)
    diagnostics['path_residual'] = path_residual(sol)
    diagnostics['boundary_residual'] = boundary_residual(cond, sol, xi_t)
    if diagnostics['boundary_residual'] > BOUNDARY_TOL:
        logger.warning('Boundary residual %.3e above %.0e',
                       diagnostics['boundary_residual'], BOUNDARY_TOL)
    sol.diagnostics.update(diagnostics)
    logger.info('Non-local solve (%s): cond %.3e, boundary residual %.2e',
                method, condition_number, diagnostics['boundary_residual'])
    return sol


def kappa_for_eigenvalue(tree, grid, coeffs, target, q_budget=DEFAULT_Q_BUDGET):
    """
    kappa placing the top eigenvalue of Q for Gamma u = kappa u(., 0) at
    `target`.
    """
    Q = assemble_Q(ScaledInitial(kappa=1.0), tree, grid, coeffs,
                   q_budget=q_budget, spot_checks=0)
    eigenvalues = scipy.linalg.eigvals(Q.matrix)
    top = eigenvalues[np.argmax(np.abs(eigenvalues))]
    if abs(top.imag) > 1e-12 * abs(top) or top.real == 0.0:
        raise ValueError('Top eigenvalue {} is not real and non-zero.'.format(
            top))
    return target / top.real


def sweep_epsilon(cond, eps_grid, phi, xi, tree, grid, coeffs, flag_tol=1e-6,
                  Q=None, q_budget=DEFAULT_Q_BUDGET, threads=1):
    """
    Solve with Gamma replaced by (1 + eps) Gamma over a grid of eps.

    Rows where 1 / (1 + eps) lies within `flag_tol` of an eigenvalue of Q are
    flagged and not solved.

    Returns
    -------
    list of dict
        eps, flagged, solvable, distance, condition_number,
        boundary_residual.
    """
    if Q is None:
        Q = assemble_Q(cond, tree, grid, coeffs, q_budget=q_budget,
                       threads=threads)
    report = spectrum(Q)
    if phi is None:
        phi = AdaptedField.zeros(tree, grid.J, start=0, stop=tree.depth - 1)
    source = operator_L(tree, grid, coeffs, phi)
    rows = []
    for eps in eps_grid:
        eps = float(eps)
        distance = report.distance_to(1.0 / (1.0 + eps))
        row = {'eps': eps, 'distance': distance, 'flagged': distance < flag_tol,
               'solvable': False, 'condition_number': float('inf'),
               'boundary_residual': float('nan')}
        if not row['flagged']:
            try:
                sol = solve_nonlocal(cond.scaled(1.0 + eps), phi, xi, tree,
                                     grid, coeffs, Q=Q.scaled(1.0 + eps),
                                     source_solution=source)
            except FredholmAlternativeError as err:
                row['condition_number'] = err.condition_number
            else:
                row.update(solvable=True,
                           condition_number=sol.diagnostics[
                               'condition_number'],
                           boundary_residual=sol.diagnostics[
                               'boundary_residual'])
        logger.debug('eps=%.4g flagged=%s', eps, row['flagged'])
        rows.append(row)
    logger.info('eps sweep: %d of %d rows flagged',
                sum(r['flagged'] for r in rows), len(rows))
    return rows

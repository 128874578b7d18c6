"""
One-dimensional Dirichlet discretization.

The interior grid carries the unknowns; coefficients live on the full grid
(boundary points included) so that face averages and centered differences
can read the neighbours of the first and last interior point. Operators are
tridiagonal and batched over the nodes of a tree level: row j of an operator
acts as lower[j] v[j-1] + diag[j] v[j] + upper[j] v[j+1].
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from nlbspde.errors import (CoefficientError, ConditionError,
                            ConsistencyError, ShapeError)
from nlbspde.scenario_tree import AdaptedField

logger = logging.getLogger(__name__)

DIVERGENCE = 'divergence'
NONDIVERGENCE = 'nondivergence'
ADJOINT_TOL = 1e-10


@dataclass(frozen=True)
class Grid:
    """
    Uniform grid of D = (x_min, x_max) with J interior points.

    Parameters
    ----------
    x_min: float
    x_max: float
    J: int
        Number of interior points (>= 3).
    """
    x_min: float
    x_max: float
    J: int

    def __post_init__(self):
        if self.J < 3:
            raise ValueError('Need at least 3 interior points, got '
                             '{}.'.format(self.J))
        if not self.x_max > self.x_min:
            raise ValueError('Empty domain ({}, {}).'.format(self.x_min,
                                                             self.x_max))

    @property
    def length(self):
        return self.x_max - self.x_min

    @property
    def h(self):
        return self.length / (self.J + 1)

    @property
    def x(self):
        """Interior coordinates x_1..x_J."""
        return self.x_min + self.h * np.arange(1, self.J + 1)

    @property
    def x_full(self):
        """Coordinates x_0..x_{J+1}, boundary included."""
        return self.x_min + self.h * np.arange(self.J + 2)

    def mode(self, k=1):
        """Dirichlet eigenfunction sin(k pi (x - x_min) / L) on the interior."""
        return np.sin(k * np.pi * (self.x - self.x_min) / self.length)

    def inner(self, v, p):
        """h-weighted Euclidean product over the grid axis (axis -1)."""
        return self.h * np.sum(np.asarray(v) * np.asarray(p), axis=-1)

    def integral(self, v):
        """Midpoint rule integral of interior values (axis -1)."""
        return self.h * np.sum(v, axis=-1)


@dataclass
class CoefficientSet:
    """
    Coefficients of A and B_i as fields on the full grid.

    In divergence form A v = (b v')' + f v' - lam v; in non-divergence form
    A v = b v'' + f v' - lam v, `drift` then holding f-hat and `lam` holding
    lambda-tilde. B_i v = beta_i v' + beta_bar_i v in both forms.

    Parameters
    ----------
    b, drift, lam: AdaptedField
        Fields with J + 2 points per row.
    beta, beta_bar: tuple of AdaptedField
        One field per Brownian component.
    form: str
        'divergence' or 'nondivergence'.
    """
    b: AdaptedField
    drift: AdaptedField
    lam: AdaptedField
    beta: Sequence[AdaptedField]
    beta_bar: Sequence[AdaptedField]
    form: str = NONDIVERGENCE

    def __post_init__(self):
        if self.form not in (DIVERGENCE, NONDIVERGENCE):
            raise ValueError('Unknown coefficient form {}.'.format(self.form))
        if len(self.beta) != len(self.beta_bar):
            raise ShapeError('Got {} beta and {} beta_bar fields.'.format(
                len(self.beta), len(self.beta_bar)))
        self.beta = tuple(self.beta)
        self.beta_bar = tuple(self.beta_bar)

    @property
    def n_brownian(self):
        return len(self.beta)

    def fields(self):
        return (self.b, self.drift, self.lam) + self.beta + self.beta_bar

    @property
    def is_deterministic(self):
        return all(f.is_deterministic for f in self.fields())

    @property
    def stop(self):
        return min(f.stop for f in self.fields())

    def validate(self, tree, grid):
        if self.n_brownian != tree.n_brownian:
            raise ShapeError('Coefficients carry {} Brownian components, the '
                             'tree {}.'.format(self.n_brownian,
                                               tree.n_brownian))
        for f in self.fields():
            if f.n_points != grid.J + 2:
                raise ShapeError('Coefficient fields need {} points, got '
                                 '{}.'.format(grid.J + 2, f.n_points))
            if f.start > 0 or f.stop < tree.depth:
                raise ShapeError('Coefficient fields must cover levels '
                                 '0..{}.'.format(tree.depth))
            f.validate(tree)
        return self

    def level(self, t):
        """Raw level-t arrays (rows 1 or n_nodes) of every field."""
        return (self.b.level(t), self.drift.level(t), self.lam.level(t),
                [f.level(t) for f in self.beta],
                [f.level(t) for f in self.beta_bar])

    def node_slice(self, t, node):
        """Coefficients of one node as a one-row-per-level set."""
        def pick(f):
            values = f.level(t)
            return values[[0 if values.shape[0] == 1 else node]]
        return (pick(self.b), pick(self.drift), pick(self.lam),
                [pick(f) for f in self.beta], [pick(f) for f in self.beta_bar])

    def with_lambda_shift(self, q):
        """Same coefficients with lam replaced by lam - q."""
        return CoefficientSet(self.b, self.drift,
                              self.lam.map(lambda v, t: v - q),
                              self.beta, self.beta_bar, form=self.form)


@dataclass
class CoefficientProfile:
    """
    Deterministic coefficients given as functions of (x, t).

    Every callable takes coordinate and time arrays that broadcast together
    and returns values of the broadcast shape. `drift` and `lam` follow
    `form` as in CoefficientSet.
    """
    b: Callable
    drift: Callable
    lam: Callable
    beta: Sequence[Callable] = field(default_factory=tuple)
    beta_bar: Sequence[Callable] = field(default_factory=tuple)
    form: str = NONDIVERGENCE
    node_amplitude: float = 0.0
    node_seed: Optional[int] = None

    @property
    def n_brownian(self):
        return len(self.beta)

    @property
    def is_deterministic(self):
        return self.node_amplitude == 0.0

    def evaluate(self, x, t):
        """
        Evaluate (b, drift, lam, beta list, beta_bar list) at points x, time t.
        """
        def ev(func):
            return np.broadcast_to(np.asarray(func(x, t), dtype=float),
                                   np.broadcast(x, t).shape).astype(float)
        return (ev(self.b), ev(self.drift), ev(self.lam),
                [ev(f) for f in self.beta], [ev(f) for f in self.beta_bar])

    def sample(self, tree, grid):
        """
        Coefficient fields on the full grid at every tree level.

        A non-zero `node_amplitude` multiplies b, lam and beta_bar at each
        (level, node) by independent factors uniform in
        [1 - amplitude, 1 + amplitude], drawn from a generator seeded by
        (node_seed, level).

        Returns
        -------
        CoefficientSet
        """
        x = grid.x_full
        per_level = [self.evaluate(x, t) for t in tree.times()]

        def det(values):
            return AdaptedField([v[None] for v in values],
                                measurability=AdaptedField.DETERMINISTIC)

        b = [lv[0] for lv in per_level]
        drift = [lv[1] for lv in per_level]
        lam = [lv[2] for lv in per_level]
        beta = [det([lv[3][i] for lv in per_level])
                for i in range(self.n_brownian)]
        beta_bar_levels = [[lv[4][i] for lv in per_level]
                           for i in range(self.n_brownian)]
        if self.is_deterministic:
            return CoefficientSet(det(b), det(drift), det(lam), beta,
                                  [det(v) for v in beta_bar_levels],
                                  form=self.form)

        if tree.collapsed:
            raise ShapeError('Node-dependent coefficients need a full tree.')
        if not 0.0 < self.node_amplitude < 1.0:
            raise ValueError('node_amplitude must lie in (0, 1), got '
                             '{}.'.format(self.node_amplitude))
        amp = self.node_amplitude
        b_rand, lam_rand = [], []
        bb_rand = [[] for _ in range(self.n_brownian)]
        for t in range(tree.depth + 1):
            rng = np.random.default_rng([self.node_seed or 0, t])
            factors = 1.0 + amp * (2.0 * rng.random(
                (tree.n_nodes(t), 2 + self.n_brownian, 1)) - 1.0)
            b_rand.append(factors[:, 0] * b[t])
            lam_rand.append(factors[:, 1] * lam[t])
            for i in range(self.n_brownian):
                bb_rand[i].append(factors[:, 2 + i] * beta_bar_levels[i][t])
        return CoefficientSet(AdaptedField(b_rand), det(drift),
                              AdaptedField(lam_rand), beta,
                              [AdaptedField(v) for v in bb_rand],
                              form=self.form)


def constant_profile(b, drift, lam, beta=(), beta_bar=(),
                     form=NONDIVERGENCE):
    """Profile with constant coefficients."""
    def const(c):
        return lambda x, t: np.full(np.broadcast(x, t).shape, float(c))
    beta = list(beta)
    beta_bar = list(beta_bar) or [0.0] * len(beta)
    return CoefficientProfile(const(b), const(drift), const(lam),
                              [const(v) for v in beta],
                              [const(v) for v in beta_bar], form=form)


def smooth_profile(x_min, x_max, horizon, b0, b1=0.0, f0=0.0, f1=0.0,
                   lam0=0.0, lam1=0.0, beta=(), beta_bar=(),
                   form=NONDIVERGENCE):
    """
    Smooth deterministic profile.

    With z = (x - x_min) / L:
    b = b0 + b1 sin(pi z), drift = f0 + f1 cos(pi z),
    lam = lam0 + lam1 t / T, beta_i = beta[i] sin(pi z) (zero on the
    boundary), beta_bar_i = beta_bar[i].
    """
    length = x_max - x_min

    def z(x):
        return (np.asarray(x) - x_min) / length

    def shape(x, t):
        return np.broadcast(x, t).shape

    beta = list(beta)
    beta_bar = list(beta_bar) or [0.0] * len(beta)
    return CoefficientProfile(
        b=lambda x, t: np.broadcast_to(b0 + b1 * np.sin(np.pi * z(x)),
                                       shape(x, t)),
        drift=lambda x, t: np.broadcast_to(f0 + f1 * np.cos(np.pi * z(x)),
                                           shape(x, t)),
        lam=lambda x, t: np.broadcast_to(lam0 + lam1 * np.asarray(t) / horizon,
                                         shape(x, t)),
        beta=[(lambda c: lambda x, t: np.broadcast_to(
            c * np.sin(np.pi * z(x)), shape(x, t)))(c) for c in beta],
        beta_bar=[(lambda c: lambda x, t: np.full(shape(x, t), float(c)))(c)
                  for c in beta_bar],
        form=form)


def _derivative(values, grid):
    """Second order derivative along the last axis of full-grid values."""
    return np.gradient(values, grid.h, axis=-1, edge_order=2)


def _combined_kind(coeffs):
    if coeffs.b.is_deterministic and coeffs.drift.is_deterministic:
        return AdaptedField.DETERMINISTIC
    return AdaptedField.ADAPTED


def to_nondivergence(coeffs, grid):
    """
    Divergence-form set (b, f, lam) to non-divergence (b, f + b_x, lam).
    """
    if coeffs.form == NONDIVERGENCE:
        return coeffs
    drift = AdaptedField(
        [f + _derivative(b, grid) for f, b in zip(coeffs.drift.levels,
                                                  coeffs.b.levels)],
        start=coeffs.drift.start, measurability=_combined_kind(coeffs))
    return CoefficientSet(coeffs.b, drift, coeffs.lam, coeffs.beta,
                          coeffs.beta_bar, form=NONDIVERGENCE)


def to_divergence(coeffs, grid):
    """Inverse of `to_nondivergence`: f = f-hat - b_x."""
    if coeffs.form == DIVERGENCE:
        return coeffs
    drift = AdaptedField(
        [f - _derivative(b, grid) for f, b in zip(coeffs.drift.levels,
                                                  coeffs.b.levels)],
        start=coeffs.drift.start, measurability=_combined_kind(coeffs))
    return CoefficientSet(coeffs.b, drift, coeffs.lam, coeffs.beta,
                          coeffs.beta_bar, form=DIVERGENCE)


def beta_tilde(b, beta):
    """
    sqrt(2b - sum_i beta_i^2).

    Parameters
    ----------
    b: ndarray
    beta: list of ndarray
        Arrays broadcasting with b.

    Return
    ------
    ndarray
    """
    radicand = 2.0 * np.asarray(b) - sum((np.asarray(v) ** 2 for v in beta),
                                         np.zeros_like(b, dtype=float))
    if np.any(radicand <= 0.0):
        raise CoefficientError(
            'beta-tilde needs 2b - sum beta_i^2 > 0 strictly; minimum is '
            '{:.3e}.'.format(float(np.min(radicand))))
    return np.sqrt(radicand)


def f_tilde(drift, beta, beta_bar):
    """f-tilde = f-hat - sum_i beta_bar_i beta_i."""
    out = np.array(drift, dtype=float)
    for bt, bb in zip(beta, beta_bar):
        out = out - np.asarray(bt) * np.asarray(bb)
    return out


@dataclass
class CoercivityReport:
    delta: float
    location: tuple
    passed: bool


def check_coercivity(coeffs, grid, tree):
    """
    Smallest value of b - 1/2 sum beta_i^2 over grid, levels and nodes.

    Parameters
    ----------
    coeffs: CoefficientSet
    grid: Grid
    tree: ScenarioTree

    Returns
    -------
    CoercivityReport
        delta, location (x, t, node) of the minimum and delta > 0.
    """
    best = (np.inf, None)
    for t in range(tree.depth + 1):
        b, _, _, beta, _ = coeffs.level(t)
        margin = b - 0.5 * sum((v ** 2 for v in beta), np.zeros_like(b))
        k, j = np.unravel_index(np.argmin(margin), margin.shape)
        value = float(margin[k, j])
        if value < best[0]:
            best = (value, (float(grid.x_full[j]), t * tree.dt, int(k)))
    report = CoercivityReport(delta=best[0], location=best[1],
                              passed=best[0] > 0.0)
    logger.debug('Coercivity delta=%.4g at %s', report.delta, report.location)
    return report


def check_boundary_beta(coeffs, tol=1e-12):
    """
    Whether every beta_i vanishes on the boundary points of the grid.

    Returns
    -------
    bool, float
        Verdict and the largest boundary value of |beta_i|.
    """
    worst = 0.0
    for f in coeffs.beta:
        for values in f.levels:
            worst = max(worst, float(np.max(np.abs(values[:, [0, -1]]))))
    return worst <= tol, worst


def coefficient_bounds(coeffs):
    """Supremum of |.| of every coefficient field."""
    def sup(f):
        return max(float(np.max(np.abs(v))) for v in f.levels)
    bounds = {'b': sup(coeffs.b), 'drift': sup(coeffs.drift),
              'lam': sup(coeffs.lam)}
    for i, (bt, bb) in enumerate(zip(coeffs.beta, coeffs.beta_bar)):
        bounds['beta_{}'.format(i + 1)] = sup(bt)
        bounds['beta_bar_{}'.format(i + 1)] = sup(bb)
    if not all(np.isfinite(v) for v in bounds.values()):
        raise CoefficientError('Coefficients are not bounded: {}'.format(
            bounds))
    return bounds


def sup_beta_bar_squared(coeffs, tree):
    """sum_i int_0^T sup beta_bar_i^2 dt as a left Riemann sum over levels."""
    total = 0.0
    for f in coeffs.beta_bar:
        for t in range(tree.depth):
            total += tree.dt * float(np.max(f.level(t) ** 2))
    return total


def peclet_number(coeffs, grid):
    """Largest |drift| h / (2 b) over the grid."""
    worst = 0.0
    for b, f in zip(coeffs.b.levels, coeffs.drift.levels):
        worst = max(worst, float(np.max(np.abs(f) * grid.h / (2.0 * b))))
    return worst


@dataclass
class TridiagonalOperator:
    """
    Batch of tridiagonal J x J matrices.

    Parameters
    ----------
    lower, diag, upper: ndarray
        Shape (rows, J). lower[:, 0] and upper[:, -1] are zero.
    level: int
        Tree level the operator discretizes.
    node: int or None
        Node label, None when the batch covers the whole level.
    """
    lower: np.ndarray
    diag: np.ndarray
    upper: np.ndarray
    level: Optional[int] = None
    node: Optional[int] = None

    def __post_init__(self):
        self.lower, self.diag, self.upper = np.broadcast_arrays(
            np.atleast_2d(self.lower), np.atleast_2d(self.diag),
            np.atleast_2d(self.upper))
        self.lower = self.lower.copy()
        self.upper = self.upper.copy()
        self.diag = self.diag.copy()
        self.lower[:, 0] = 0.0
        self.upper[:, -1] = 0.0

    @property
    def rows(self):
        return self.diag.shape[0]

    @property
    def size(self):
        return self.diag.shape[1]

    def _bands(self, ndim):
        extra = (slice(None), slice(None)) + (None,) * (ndim - 2)
        return self.lower[extra], self.diag[extra], self.upper[extra]

    def apply(self, v):
        """
        Matrix-vector product.

        Parameters
        ----------
        v: ndarray
            Shape (rows or 1, J, *batch).
        """
        v = np.asarray(v, dtype=float)
        lower, diag, upper = self._bands(v.ndim)
        out = diag * v
        out = np.array(out)
        out[:, 1:] += lower[:, 1:] * v[:, :-1]
        out[:, :-1] += upper[:, :-1] * v[:, 1:]
        return out

    def transpose(self):
        lower = np.zeros_like(self.lower)
        upper = np.zeros_like(self.upper)
        lower[:, 1:] = self.upper[:, :-1]
        upper[:, :-1] = self.lower[:, 1:]
        return TridiagonalOperator(lower, self.diag, upper, level=self.level,
                                   node=self.node)

    def scaled(self, alpha):
        return TridiagonalOperator(alpha * self.lower, alpha * self.diag,
                                   alpha * self.upper, level=self.level,
                                   node=self.node)

    def identity_minus(self, dt):
        """I - dt * self."""
        return TridiagonalOperator(-dt * self.lower, 1.0 - dt * self.diag,
                                   -dt * self.upper, level=self.level,
                                   node=self.node)

    def to_dense(self, row=0):
        return (np.diag(self.diag[row]) + np.diag(self.lower[row, 1:], -1)
                + np.diag(self.upper[row, :-1], 1))

    def dominance_margin(self):
        """min_j |diag_j| - |lower_j| - |upper_j| over the batch."""
        return float(np.min(np.abs(self.diag) - np.abs(self.lower)
                            - np.abs(self.upper)))

    def solve(self, rhs):
        """
        Thomas elimination for every operator of the batch at once.

        Parameters
        ----------
        rhs: ndarray
            Shape (n, J, *batch) with n equal to rows, or rows equal to 1.

        Returns
        -------
        ndarray
            Same shape as the broadcast of rhs against the batch.
        """
        rhs = np.asarray(rhs, dtype=float)
        n = max(rhs.shape[0], self.rows)
        if rhs.shape[0] not in (1, n) or self.rows not in (1, n) \
                or rhs.shape[1] != self.size:
            raise ShapeError('Cannot solve {} operators of size {} against a '
                             'right-hand side of shape {}.'.format(
                                 self.rows, self.size, rhs.shape))
        shape = (n,) + rhs.shape[1:]
        rhs = np.broadcast_to(rhs, shape)
        lower, diag, upper = self.lower, self.diag, self.upper
        J = self.size

        # Forward sweep on the matrix alone; it is shared by every rhs.
        cp = np.zeros_like(diag)
        inv = np.zeros_like(diag)
        for j in range(J):
            denom = diag[:, j] - (lower[:, j] * cp[:, j - 1] if j else 0.0)
            if np.any(denom == 0.0):
                raise ConditionError('Singular implicit step at level {} '
                                     '(zero pivot).'.format(self.level))
            inv[:, j] = 1.0 / denom
            cp[:, j] = upper[:, j] * inv[:, j]

        extra = (slice(None),) + (None,) * (rhs.ndim - 2)
        dp = np.empty(shape)
        dp[:, 0] = rhs[:, 0] * inv[:, 0][extra]
        for j in range(1, J):
            dp[:, j] = (rhs[:, j] - lower[:, j][extra] * dp[:, j - 1]) \
                * inv[:, j][extra]
        out = np.empty(shape)
        out[:, -1] = dp[:, -1]
        for j in range(J - 2, -1, -1):
            out[:, j] = dp[:, j] - cp[:, j][extra] * out[:, j + 1]
        return out


def _select(values, node):
    if node is None or values.shape[0] == 1:
        return values if node is None else values[:1]
    return values[node:node + 1]


def assemble_A(coeffs, grid, t, node=None, check=True):
    """
    Discrete A at level t.

    Divergence form uses face averages b_{j+1/2} = (b_j + b_{j+1}) / 2;
    non-divergence form uses b_j at the point. Both add a centered first
    derivative times the drift and -lam on the diagonal.

    Parameters
    ----------
    coeffs: CoefficientSet
    grid: Grid
    t: int
        Tree level.
    node: int or None
        One node, or the whole level (one row per stored coefficient row).
    check: bool
        Raise ConditionError when b - 1/2 sum beta_i^2 <= 0 at this level.

    Returns
    -------
    TridiagonalOperator
    """
    b, f, lam, beta, _ = coeffs.level(t)
    b, f, lam = _select(b, node), _select(f, node), _select(lam, node)
    beta = [_select(v, node) for v in beta]
    if check:
        margin = b - 0.5 * sum((v ** 2 for v in beta), np.zeros_like(b))
        if np.min(margin) <= 0.0:
            k, j = np.unravel_index(np.argmin(margin), margin.shape)
            location = (float(grid.x_full[j]), t, k if node is None else node)
            raise ConditionError(
                'Coercivity fails at x={:.4g}, level {}, node {}: '
                'delta={:.3e}.'.format(location[0], t, location[2],
                                       float(margin[k, j])),
                delta=float(margin[k, j]), location=location)
    h2 = grid.h ** 2
    if coeffs.form == DIVERGENCE:
        b_minus = 0.5 * (b[:, :-2] + b[:, 1:-1])
        b_plus = 0.5 * (b[:, 1:-1] + b[:, 2:])
    else:
        b_minus = b_plus = b[:, 1:-1]
    fi = f[:, 1:-1]
    lower = b_minus / h2 - fi / (2.0 * grid.h)
    upper = b_plus / h2 + fi / (2.0 * grid.h)
    diag = -(b_minus + b_plus) / h2 - lam[:, 1:-1]
    lower, diag, upper = np.broadcast_arrays(lower, diag, upper)
    return TridiagonalOperator(lower, diag, upper, level=t, node=node)


def assemble_B(coeffs, grid, i, t, node=None):
    """
    Discrete B_i v = beta_i v' + beta_bar_i v at level t (i is 0-based).
    """
    if not 0 <= i < coeffs.n_brownian:
        raise IndexError('Brownian index {} outside 0..{}.'.format(
            i, coeffs.n_brownian - 1))
    _, _, _, beta, beta_bar = coeffs.level(t)
    bt = _select(beta[i], node)[:, 1:-1]
    bb = _select(beta_bar[i], node)[:, 1:-1]
    lower, diag, upper = np.broadcast_arrays(-bt / (2.0 * grid.h), bb,
                                             bt / (2.0 * grid.h))
    return TridiagonalOperator(lower, diag, upper, level=t, node=node)


def assemble_A_star(coeffs, grid, t, node=None):
    """Transpose of `assemble_A` (adjoint for the h-weighted product)."""
    return assemble_A(coeffs, grid, t, node=node).transpose()


def assemble_B_star(coeffs, grid, i, t, node=None):
    """Transpose of `assemble_B`."""
    return assemble_B(coeffs, grid, i, t, node=node).transpose()


def analytic_A_star(coeffs, grid, t, node=None):
    """
    Stencil of (b p)'' - (f-hat p)' - lam p for non-divergence coefficients.
    """
    if coeffs.form != NONDIVERGENCE:
        coeffs = to_nondivergence(coeffs, grid)
    b, f, lam, _, _ = coeffs.level(t)
    b, f, lam = _select(b, node), _select(f, node), _select(lam, node)
    h = grid.h
    lower = b[:, :-2] / h ** 2 + f[:, :-2] / (2.0 * h)
    upper = b[:, 2:] / h ** 2 - f[:, 2:] / (2.0 * h)
    diag = -2.0 * b[:, 1:-1] / h ** 2 - lam[:, 1:-1]
    lower, diag, upper = np.broadcast_arrays(lower, diag, upper)
    return TridiagonalOperator(lower, diag, upper, level=t, node=node)


def analytic_B_star(coeffs, grid, i, t, node=None):
    """Stencil of -(beta_i p)' + beta_bar_i p."""
    _, _, _, beta, beta_bar = coeffs.level(t)
    bt = _select(beta[i], node)
    bb = _select(beta_bar[i], node)[:, 1:-1]
    lower = bt[:, :-2] / (2.0 * grid.h)
    upper = -bt[:, 2:] / (2.0 * grid.h)
    lower, diag, upper = np.broadcast_arrays(lower, bb, upper)
    return TridiagonalOperator(lower, diag, upper, level=t, node=node)


def adjoint_gap(op, op_star, grid, seed=0, n_vectors=4):
    """
    Largest |<op v, p> - <v, op_star p>| over random v, p.
    """
    rng = np.random.default_rng(seed)
    rows = max(op.rows, op_star.rows)
    v = rng.standard_normal((rows, grid.J, n_vectors))
    p = rng.standard_normal((rows, grid.J, n_vectors))
    lhs = grid.inner(np.moveaxis(op.apply(v), 1, -1), np.moveaxis(p, 1, -1))
    rhs = grid.inner(np.moveaxis(v, 1, -1),
                     np.moveaxis(op_star.apply(p), 1, -1))
    return float(np.max(np.abs(lhs - rhs)))


def check_adjoint(op, op_star, grid, tol=ADJOINT_TOL, seed=0):
    """Raise ConsistencyError when op_star is not the adjoint of op."""
    gap = adjoint_gap(op, op_star, grid, seed=seed)
    if gap > tol:
        raise ConsistencyError('Adjoint identity off by {:.3e} (tolerance '
                               '{:.1e}).'.format(gap, tol))
    return gap

"""
Forward dual equation for the density p and the identities built on it.

The backward step maps the children of a node to the node by

    u(k) = sum_c P(c) (I - dt A)^{-1} (I + sum_i dw_i^c B_i) u(c),

so its transpose in the h-weighted, probability-weighted pairing is

    p(c) = (I + sum_i dw_i^c B_i^T) (I - dt A)^{-T} p(k).

Stepping p this way makes E <p(t), u(t)> the same at every level, which is
the discrete duality identity.

On a collapsed tree only the conditional mean of p is kept; it is exact for
masses and for pairings with deterministic fields.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from nlbspde.bspde_solver import (exponential_weight_transform,
                                  operator_Lambda)
from nlbspde.errors import DomainError, ShapeError
from nlbspde.nonlocal_solver import (F0, ScaledInitial, apply_gamma,
                                     assemble_Q, spectrum)
from nlbspde.scenario_tree import AdaptedField
from nlbspde.spatial_disc import (assemble_A_star, assemble_B_star,
                                  peclet_number)

logger = logging.getLogger(__name__)

POSITIVITY_TOL = 1e-12
DUALITY_TOL = 1e-10
MASS_TOL = 1e-6


@dataclass
class DualDensity:
    """
    Parameters
    ----------
    p: AdaptedField
        Density on levels s..M.
    rho: ndarray
        Initial datum at level s.
    mass: ndarray
        E int p(x, t) dx for t = s..M.
    """
    tree: object
    grid: object
    p: AdaptedField
    rho: np.ndarray
    mass: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    def final(self):
        return self.p.level(self.p.stop)


def _has_coupling(coeffs):
    return any(np.any(v != 0.0) for f in coeffs.beta + coeffs.beta_bar
               for v in f.levels)


def forward_step(tree, grid, coeffs, t, p, coupling=True):
    """
    Transpose of the backward step from level t+1 to level t.

    Parameters
    ----------
    p: ndarray
        Level-t values, (rows, J, *batch).

    Returns
    -------
    ndarray
        Level t+1 values.
    """
    q = assemble_A_star(coeffs, grid, t).identity_minus(tree.dt).solve(p)
    if tree.collapsed:
        return q
    if not coupling:
        return tree.expand(q, t, t + 1)
    n_child = tree.n_nodes(t + 1)
    child = np.broadcast_to(tree.expand(q, t, t + 1),
                            (n_child,) + q.shape[1:]).copy()
    dw = tree.branch_increments(t + 1)
    for i in range(coeffs.n_brownian):
        bq = tree.expand(assemble_B_star(coeffs, grid, i, t).apply(q), t,
                         t + 1)
        weight = dw[:, i].reshape((n_child,) + (1,) * (q.ndim - 1))
        child += weight * bq
    return child


def _injections(rho, weights, scale):
    """Initial data added at each read level: scale * W_r^T rho."""
    out = {}
    for level, k in weights.items():
        out[level] = scale * (k * rho if np.ndim(k) == 0 else k.T @ rho)
    return out


def _sweep(tree, grid, coeffs, start, injections):
    coupling = _has_coupling(coeffs)
    levels = []
    p = np.zeros((1, grid.J))
    for t in range(start, tree.depth + 1):
        if t > start:
            p = forward_step(tree, grid, coeffs, t - 1, p, coupling=coupling)
        if t in injections:
            p = p + injections[t][None]
        levels.append(p)
    return levels


def solve_forward_dual(tree, grid, coeffs, s, rho):
    """
    Forward dual density started from rho at level s.

    Parameters
    ----------
    tree: ScenarioTree
    grid: Grid
    coeffs: CoefficientSet
    s: int
        Starting level.
    rho: ndarray
        Initial density on the interior grid, shape (J,).

    Returns
    -------
    DualDensity
    """
    rho = np.asarray(rho, dtype=float)
    if rho.shape != (grid.J,):
        raise ShapeError('rho must have {} values, got shape {}.'.format(
            grid.J, rho.shape))
    if not 0 <= s <= tree.depth:
        raise ValueError('Start level {} outside 0..{}.'.format(s, tree.depth))
    coeffs.validate(tree, grid)
    levels = _sweep(tree, grid, coeffs, s, {s: rho})
    p = AdaptedField(levels, start=s,
                     measurability=AdaptedField.DETERMINISTIC
                     if all(v.shape[0] == 1 for v in levels)
                     else AdaptedField.ADAPTED)
    mass = np.array([float(tree.expectation(grid.integral(v), t))
                     for t, v in enumerate(levels, start=s)])
    dual = DualDensity(tree=tree, grid=grid, p=p, rho=rho, mass=mass)
    lowest = min(float(np.min(v)) for v in levels)
    dual.diagnostics['min_value'] = lowest
    if np.all(rho >= 0.0):
        scale = max(float(np.max(rho)), 1.0)
        dual.diagnostics['positive'] = lowest >= -POSITIVITY_TOL * scale
        if not dual.diagnostics['positive']:
            logger.warning('Dual density went negative (%.3e); Peclet number '
                           '%.3g, the centered drift stencil is not monotone '
                           'above 1.', lowest, peclet_number(coeffs, grid))
    logger.debug('Forward dual from level %d: final mass %.6g', s, mass[-1])
    return dual


def gamma_adjoint(cond, tree, grid, coeffs, rho):
    """
    Terminal density p_T with <rho, Q Phi>_h = E <p_T, Phi>_h for all Phi.

    One forward sweep from the root, adding scale * W_r^T rho at every level
    r read by the condition.

    Returns
    -------
    ndarray
        (rows, J) at the leaves, rows 1 when deterministic.
    """
    if cond.target != F0:
        raise ValueError('The adjoint sweep needs an F0-target condition.')
    rho = np.asarray(rho, dtype=float)
    weights, _ = cond.weights(tree, grid)
    start = min(weights) if weights else tree.depth
    levels = _sweep(tree, grid, coeffs, start,
                    _injections(rho, weights, cond.scale))
    return levels[-1]


@dataclass
class DualityReport:
    lhs: float
    rhs: float
    gap: float


def _pair(tree, grid, a, b, level):
    a, b = np.broadcast_arrays(np.asarray(a, dtype=float),
                               np.asarray(b, dtype=float))
    return float(tree.expectation(grid.inner(a, b), level))


def duality_check(tree, grid, coeffs, cond, rho, Phi):
    """
    <rho, Q Phi> by the backward path against <kappa p(T), Phi> by the
    forward path.

    Parameters
    ----------
    cond: NonlocalCondition
        F0 target; ScaledInitial gives the classical kappa form.
    rho: ndarray (J,)
    Phi: ndarray
        (J,) or (leaves, J) terminal data.

    Returns
    -------
    DualityReport
    """
    Phi = np.asarray(Phi, dtype=float)
    Phi = Phi[None] if Phi.ndim == 1 else Phi
    sol = operator_Lambda(tree, grid, coeffs, Phi, diagnostics=False)
    lhs = float(grid.inner(np.asarray(rho, dtype=float),
                           apply_gamma(cond, sol)[0]))
    p_T = gamma_adjoint(cond, tree, grid, coeffs, rho)
    rhs = _pair(tree, grid, p_T, Phi, tree.depth)
    report = DualityReport(lhs=lhs, rhs=rhs, gap=abs(lhs - rhs))
    logger.debug('Duality gap %.3e (lhs %.6g)', report.gap, lhs)
    return report


@dataclass
class MassReport:
    final_mass: float
    bound: float
    passed: bool
    condition: str
    detail: dict = field(default_factory=dict)


def lambda_floor(coeffs, tree):
    """inf of lam over grid, levels 0..M-1 and nodes."""
    return min(float(np.min(coeffs.lam.level(t))) for t in range(tree.depth))


def mass_contraction_check(tree, grid, coeffs, rho, condition='i', kappa=None,
                           nu2=None, tol=MASS_TOL):
    """
    Final mass E int p(x, T) dx against the bound of the chosen condition.

    Each implicit step keeps at most a fraction (1 + c dt)^{-1} of the mass
    when lam >= c. The verdicts use these discrete factors; `detail` carries
    the continuum bounds.

    condition 'i': lam >= c > 0, bound (1 + c dt)^{-M}; continuum exp(-c T).
    condition 'ii': |kappa| < 1; lam is shifted by |q| with
    q = log|kappa| / T, bound (1 + (c + |q|) dt)^{-M} with
    c = max(inf lam, 0); continuum |kappa| exp(-c T). `transform_gap` is the
    relative distance between the shifted mass and the mass predicted by the
    exponential weight transform; it is O(dt).
    condition 'iii': bound nu2 computed by the Monte Carlo module.

    Parameters
    ----------
    rho: ndarray
        Non-negative density; it is normalized to unit mass.

    Returns
    -------
    MassReport
    """
    rho = np.asarray(rho, dtype=float)
    if np.any(rho < 0.0):
        raise DomainError('rho must be non-negative.')
    total = float(grid.integral(rho))
    detail = {'rho_mass': total}
    if total == 0.0:
        return MassReport(0.0, 0.0, True, condition, detail)
    rho = rho / total
    c = lambda_floor(coeffs, tree)
    detail['lambda_floor'] = c

    if condition == 'i':
        if c <= 0.0:
            raise DomainError('Condition (i) needs inf lam > 0, got '
                              '{}.'.format(c))
        bound = float((1.0 + c * tree.dt) ** -tree.depth)
        detail.update(discrete_factor=bound,
                      continuum_bound=float(np.exp(-c * tree.horizon)))
        mass = solve_forward_dual(tree, grid, coeffs, 0, rho).mass[-1]
    elif condition == 'ii':
        if kappa is None or not 0.0 < abs(kappa) < 1.0:
            raise DomainError('Condition (ii) needs 0 < |kappa| < 1, got '
                              '{}.'.format(kappa))
        q = float(np.log(abs(kappa)) / tree.horizon)
        floor = max(c, 0.0)
        bound = float((1.0 + (floor - q) * tree.dt) ** -tree.depth)
        detail.update(discrete_factor=bound,
                      continuum_bound=abs(kappa) * float(
                          np.exp(-floor * tree.horizon)))
        shifted = coeffs.with_lambda_shift(q)
        mass = solve_forward_dual(tree, grid, shifted, 0, rho).mass[-1]
        plain = solve_forward_dual(tree, grid, coeffs, 0, rho).mass[-1]
        # <rho, u_q(0)> with u = Lambda_T 1 predicts the shifted mass
        ones = np.ones(grid.J)
        weighted = exponential_weight_transform(
            operator_Lambda(tree, grid, coeffs, ones, diagnostics=False), q)
        predicted = float(grid.inner(rho, weighted.initial()[0]))
        detail.update(q=q, unshifted_mass=float(plain),
                      transform_mass=predicted,
                      transform_gap=abs(float(mass) - predicted)
                      / max(abs(predicted), 1e-300))
    elif condition == 'iii':
        if nu2 is None or not 0.0 < nu2 < 1.0:
            raise DomainError('Condition (iii) needs nu2 in (0, 1), got '
                              '{}.'.format(nu2))
        bound = float(nu2)
        mass = solve_forward_dual(tree, grid, coeffs, 0, rho).mass[-1]
    else:
        raise ValueError('Unknown condition {}.'.format(condition))

    report = MassReport(final_mass=float(mass), bound=bound,
                        passed=float(mass) <= bound + tol,
                        condition=condition, detail=detail)
    logger.info('Mass contraction (%s): %.6g <= %.6g: %s', condition,
                report.final_mass, bound, report.passed)
    return report


def fixed_point_exclusion(tree, grid, coeffs, nu_star, kappa_bar=None):
    """
    Spectral radius of the reduced Q for Gamma u = kappa_bar u(., 0).

    kappa_bar defaults to (1 + 1 / nu_star) / 2, which is above 1 with
    kappa_bar * nu_star < 1.

    Returns
    -------
    dict
        kappa_bar, spectral_radius, passed (radius < 1).
    """
    if not 0.0 < nu_star < 1.0:
        raise DomainError('nu_star must lie in (0, 1), got {}.'.format(
            nu_star))
    if kappa_bar is None:
        kappa_bar = 0.5 * (1.0 + 1.0 / nu_star)
    Q = assemble_Q(ScaledInitial(kappa=kappa_bar), tree, grid, coeffs,
                   spot_checks=0)
    radius = spectrum(Q).spectral_radius
    return {'kappa_bar': kappa_bar, 'spectral_radius': radius,
            'passed': radius < 1.0}

"""
Monte Carlo for the killed diffusion behind the dual density.

    dy = f-tilde dt + sum_i beta_i dw_i + beta-tilde dw-tilde,
    f-tilde = f-hat - sum_i beta_bar_i beta_i,
    beta-tilde = sqrt(2b - sum_i beta_i^2),

stopped at the first exit from D. Interior killing at rate lambda-tilde is
carried by the weight exp(-int lambda-tilde dt); the zeroth-order terms of
B_i enter through the exponential martingale gamma_M. Paths run in blocks of
fixed size with seeds spawned from one SeedSequence, so results do not depend
on the number of threads.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
import scipy.stats

from nlbspde.errors import DomainError
from nlbspde.spatial_disc import DIVERGENCE, beta_tilde, f_tilde

logger = logging.getLogger(__name__)

BLOCK_SIZE = 2 ** 14
CONFIDENCE = 0.95
DERIVATIVE_STEP = 1e-6


@dataclass
class StartLaw:
    """
    Law of the starting point a.

    kind 'point' starts every path at `value`; 'uniform' draws from the
    uniform law on D; 'grid' draws a cell with probability proportional to
    the density `value` on the interior grid points, then a point uniformly
    in that cell.
    """
    kind: str
    value: Union[float, np.ndarray, None] = None
    grid: Optional[object] = None

    def sample(self, rng, n, x_min, x_max):
        if self.kind == 'point':
            return np.full(n, float(self.value))
        if self.kind == 'uniform':
            return rng.uniform(x_min, x_max, size=n)
        if self.kind == 'grid':
            density = np.asarray(self.value, dtype=float)
            if np.any(density < 0.0) or not density.sum() > 0.0:
                raise DomainError('A start density must be non-negative with '
                                  'positive mass.')
            cells = rng.choice(density.size, size=n, p=density / density.sum())
            h = self.grid.h
            return self.grid.x[cells] + h * (rng.random(n) - 0.5)
        raise ValueError('Unknown start law {}.'.format(self.kind))


@dataclass
class PathEnsemble:
    """
    Per-path summaries of a simulation.

    tau is the exit time (inf when the path survives to T); y_T is the
    position at T (nan for killed paths). The accumulators stop at
    min(tau, T).
    """
    n_paths: int
    dt_mc: float
    horizon: float
    seed: int
    start: np.ndarray
    tau: np.ndarray
    y_T: np.ndarray
    int_lambda: np.ndarray
    int_beta_bar_dw: np.ndarray
    int_beta_bar2: np.ndarray

    @property
    def alive(self):
        return np.isinf(self.tau)

    def records(self):
        """Rows in the order of util.PATH_RECORD_FIELDS."""
        return np.column_stack([self.tau, self.y_T, self.int_lambda,
                                self.int_beta_bar_dw, self.int_beta_bar2,
                                self.alive.astype(float)])


@dataclass
class WeightedEstimate:
    estimate: float
    se: float
    ci_low: float
    ci_high: float
    n_effective: float
    detail: dict = field(default_factory=dict)


def _evaluate(profile, y, t):
    b, drift, lam, beta, beta_bar = profile.evaluate(y, t)
    if profile.form == DIVERGENCE:
        eps = DERIVATIVE_STEP
        b_x = (np.asarray(profile.b(y + eps, t), dtype=float)
               - np.asarray(profile.b(y - eps, t), dtype=float)) / (2.0 * eps)
        drift = drift + b_x
    return b, drift, lam, beta, beta_bar


def _simulate_block(profile, x_min, x_max, start, n_steps, dt, rng, bridge):
    n = start.size
    N = profile.n_brownian
    y = start.copy()
    tau = np.where((y > x_min) & (y < x_max), np.inf, 0.0)
    int_lambda = np.zeros(n)
    int_dw = np.zeros(n)
    int_b2 = np.zeros(n)
    active = np.flatnonzero(np.isinf(tau))
    sqdt = math.sqrt(dt)
    for k in range(n_steps):
        if active.size == 0:
            break
        t = k * dt
        yk = y[active]
        b, drift, lam, beta, beta_bar = _evaluate(profile, yk, t)
        diffusion = beta_tilde(b, beta)
        drift_tilde = f_tilde(drift, beta, beta_bar)
        dw = rng.standard_normal((N, active.size)) * sqdt
        dw_tilde = rng.standard_normal(active.size) * sqdt
        y_new = yk + drift_tilde * dt + diffusion * dw_tilde
        for i in range(N):
            y_new = y_new + beta[i] * dw[i]
            int_dw[active] += beta_bar[i] * dw[i]
            int_b2[active] += beta_bar[i] ** 2 * dt
        int_lambda[active] += lam * dt
        exited = (y_new <= x_min) | (y_new >= x_max)
        if bridge:
            # crossing probability of the Brownian bridge for each wall
            var = 2.0 * b * dt
            lo = np.exp(-2.0 * np.maximum(yk - x_min, 0.0)
                        * np.maximum(y_new - x_min, 0.0) / var)
            hi = np.exp(-2.0 * np.maximum(x_max - yk, 0.0)
                        * np.maximum(x_max - y_new, 0.0) / var)
            crossed = rng.random(active.size) < 1.0 - (1.0 - lo) * (1.0 - hi)
            exited = exited | crossed
        y[active] = y_new
        tau[active[exited]] = (k + 1) * dt
        active = active[~exited]
    y_T = np.where(np.isinf(tau), y, np.nan)
    return tau, y_T, int_lambda, int_dw, int_b2


def simulate_paths(profile, x_min, x_max, start, n_paths, dt_mc, horizon,
                   seed=0, threads=1, block_size=BLOCK_SIZE, bridge=True):
    """
    Simulate the killed diffusion up to `horizon`.

    Parameters
    ----------
    profile: CoefficientProfile
        Deterministic coefficients.
    x_min, x_max: float
        Domain D.
    start: StartLaw or float
        Law of the starting point; a float is a point start.
    n_paths: int
    dt_mc: float
        Euler-Maruyama step.
    horizon: float
    seed: int
    threads: int
    block_size: int
        Paths per block; fixes the random streams.
    bridge: bool
        Also kill paths whose Brownian bridge crosses a wall within a step.

    Returns
    -------
    PathEnsemble
    """
    if not profile.is_deterministic:
        raise ValueError('Monte Carlo needs deterministic coefficients.')
    if not isinstance(start, StartLaw):
        start = StartLaw('point', float(start))
    n_steps = int(round(horizon / dt_mc))
    if not math.isclose(n_steps * dt_mc, horizon, rel_tol=1e-9):
        logger.warning('T=%g is not a multiple of dt_mc=%g; simulating %d '
                       'steps.', horizon, dt_mc, n_steps)
    sizes = [min(block_size, n_paths - a) for a in range(0, n_paths,
                                                        block_size)]
    seeds = np.random.SeedSequence(seed).spawn(len(sizes))

    def work(args):
        size, child = args
        rng = np.random.default_rng(child)
        a = start.sample(rng, size, x_min, x_max)
        return (a,) + _simulate_block(profile, x_min, x_max, a, n_steps,
                                      dt_mc, rng, bridge)

    logger.info('Simulating %d paths in %d blocks (%d steps)', n_paths,
                len(sizes), n_steps)
    if threads and threads > 1 and len(sizes) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            blocks = list(pool.map(work, zip(sizes, seeds)))
    else:
        blocks = [work(args) for args in zip(sizes, seeds)]
    columns = [np.concatenate(col) if blocks else np.zeros(0)
               for col in zip(*blocks)]
    return PathEnsemble(n_paths=n_paths, dt_mc=dt_mc, horizon=horizon,
                        seed=seed, start=columns[0], tau=columns[1],
                        y_T=columns[2], int_lambda=columns[3],
                        int_beta_bar_dw=columns[4], int_beta_bar2=columns[5])


def girsanov_weight(ensemble):
    """
    gamma_M = exp(sum_i int beta_bar_i dw_i - 1/2 sum_i int beta_bar_i^2 dt)
    and gamma = exp(-int lambda-tilde dt) gamma_M, per path.
    """
    gamma_m = np.exp(ensemble.int_beta_bar_dw - 0.5 * ensemble.int_beta_bar2)
    return gamma_m, np.exp(-ensemble.int_lambda) * gamma_m


def _z():
    return float(scipy.stats.norm.ppf(0.5 + CONFIDENCE / 2.0))


def mean_estimate(values, weights=None):
    """
    Sample mean with standard error and normal confidence interval.

    `weights`, when given, only enter the effective sample size.
    """
    values = np.asarray(values, dtype=float)
    n = values.size
    mean = math.fsum(values) / n
    var = math.fsum((values - mean) ** 2) / max(n - 1, 1)
    se = math.sqrt(var / n)
    if weights is None:
        n_eff = float(n)
    else:
        weights = np.asarray(weights, dtype=float)
        sq = math.fsum(weights ** 2)
        n_eff = math.fsum(weights) ** 2 / sq if sq > 0.0 else 0.0
    z = _z()
    return WeightedEstimate(mean, se, mean - z * se, mean + z * se, n_eff)


def wilson_interval(successes, n):
    """Wilson score interval of a binomial proportion."""
    z = _z()
    p = successes / n
    denom = 1.0 + z ** 2 / n
    center = (p + z ** 2 / (2.0 * n)) / denom
    half = z * math.sqrt(p * (1.0 - p) / n + z ** 2 / (4.0 * n ** 2)) / denom
    return center - half, center + half


def estimate_exit_bound(profile, x_min, x_max, start, n_paths, dt_mc, horizon,
                        seed=0, threads=1, bridge=True, ensemble=None):
    """
    P(tau > T) with a Wilson score interval.

    Returns
    -------
    WeightedEstimate
        detail carries the ensemble size and whether the upper end of the
        interval is below 1.
    """
    if ensemble is None:
        ensemble = simulate_paths(profile, x_min, x_max, start, n_paths,
                                  dt_mc, horizon, seed=seed, threads=threads,
                                  bridge=bridge)
    survivors = int(np.count_nonzero(ensemble.alive))
    n = ensemble.n_paths
    p = survivors / n
    low, high = wilson_interval(survivors, n)
    est = WeightedEstimate(p, math.sqrt(p * (1.0 - p) / n), low, high,
                           float(n), detail={'survivors': survivors,
                                             'below_one': high < 1.0})
    logger.info('Survival P(tau > %g) = %.5g +/- %.2g', horizon, p, est.se)
    return est


def survival_series(b, x_min, x_max, horizon, start, terms=200):
    """
    Dirichlet eigen-series of P(tau > T) for dy = sqrt(2b) dw on D.

    Parameters
    ----------
    start: StartLaw or float
        Point, uniform or grid start.

    Returns
    -------
    float
    """
    if not isinstance(start, StartLaw):
        start = StartLaw('point', float(start))
    length = x_max - x_min
    k = np.arange(1, 2 * terms, 2, dtype=float)
    decay = np.exp(-b * (k * np.pi / length) ** 2 * horizon)
    if start.kind == 'point':
        z = (float(start.value) - x_min) / length
        if not 0.0 < z < 1.0:
            return 0.0
        coef = np.sin(k * np.pi * z)
    elif start.kind == 'uniform':
        coef = 2.0 / (k * np.pi)
    elif start.kind == 'grid':
        grid = start.grid
        density = np.asarray(start.value, dtype=float)
        density = density / density.sum()
        z = (grid.x - x_min) / length
        coef = np.sin(np.outer(k, np.pi * z)) @ density
    else:
        raise ValueError('Unknown start law {}.'.format(start.kind))
    return float(np.sum(4.0 / (k * np.pi) * coef * decay))


@dataclass
class FeynmanKacReport:
    mc: float
    se: float
    tree: float
    gap: float
    tolerance: float
    passed: bool
    oracle: Optional[float] = None


def tree_functional(dual, Phi_values, kappa=1.0):
    """kappa E <p(T), Phi> on the tree."""
    tree, grid = dual.tree, dual.grid
    p_T = dual.final()
    values = grid.inner(p_T, np.asarray(Phi_values, dtype=float)[None])
    return kappa * float(tree.expectation(values, tree.depth))


def feynman_kac_check(profile, x_min, x_max, start, Phi, dual, kappa=1.0,
                      n_paths=10 ** 5, dt_mc=1e-3, seed=0, threads=1,
                      rel_tol=0.02, oracle=None, ensemble=None):
    """
    kappa E[1_{tau >= T} gamma(T) Phi(y(T))] against kappa E <p(T), Phi>.

    Parameters
    ----------
    Phi: callable
        Bounded deterministic function of x.
    dual: DualDensity
        Tree density started from the grid version of the start law.
    rel_tol: float
        Discretization tolerance relative to the tree value.
    oracle: float or None
        Closed-form value, reported when known.

    Returns
    -------
    FeynmanKacReport
        Passes when the gap is within max(3 SE, rel_tol |tree|).
    """
    horizon = dual.tree.horizon
    if ensemble is None:
        ensemble = simulate_paths(profile, x_min, x_max, start, n_paths,
                                  dt_mc, horizon, seed=seed, threads=threads)
    _, gamma = girsanov_weight(ensemble)
    alive = ensemble.alive
    payoff = np.zeros(ensemble.n_paths)
    payoff[alive] = gamma[alive] * np.asarray(Phi(ensemble.y_T[alive]),
                                              dtype=float)
    est = mean_estimate(kappa * payoff)
    tree_value = tree_functional(dual, Phi(dual.grid.x), kappa=kappa)
    gap = abs(est.estimate - tree_value)
    tolerance = max(3.0 * est.se, rel_tol * abs(tree_value))
    report = FeynmanKacReport(mc=est.estimate, se=est.se, tree=tree_value,
                              gap=gap, tolerance=tolerance,
                              passed=gap <= tolerance, oracle=oracle)
    logger.info('Feynman-Kac: mc %.6g, tree %.6g, gap %.3g (tol %.3g)',
                est.estimate, tree_value, gap, tolerance)
    return report


@dataclass
class Nu2Report:
    nu2: float
    smallb: float
    satisfiable: bool
    q_min: float
    nu2_min: float


def nu2_value(q, nu, beta_bar_sq):
    """
    nu2(q) = nu^{1/p} exp((1/p) [log nu + (q/2) S]) with 1/p + 1/q = 1.
    """
    if not q > 1.0:
        raise DomainError('q must be > 1, got {}.'.format(q))
    if not 0.0 < nu < 1.0:
        raise DomainError('nu must lie in (0, 1), got {}.'.format(nu))
    inv_p = 1.0 - 1.0 / q
    return nu ** inv_p * math.exp(inv_p * (math.log(nu)
                                           + 0.5 * q * beta_bar_sq))


def evaluate_nu2(q, nu, beta_bar_sq, q_grid=None):
    """
    nu2(q), the left-hand side 1/2 S + log nu of the small-beta_bar
    condition, and the smallest nu2 over a grid of q.

    Parameters
    ----------
    q: float
        Exponent > 1.
    nu: float
        Exit bound in (0, 1).
    beta_bar_sq: float
        S = sum_i int_0^T sup beta_bar_i^2 dt.
    q_grid: array-like or None
        Search grid, by default 400 points geometrically spaced in (1, 100].

    Returns
    -------
    Nu2Report
        satisfiable is the verdict smallb < 0.
    """
    value = nu2_value(q, nu, beta_bar_sq)
    smallb = 0.5 * beta_bar_sq + math.log(nu)
    if q_grid is None:
        q_grid = 1.0 + np.geomspace(1e-3, 99.0, 400)
    values = np.array([nu2_value(qq, nu, beta_bar_sq) for qq in q_grid])
    best = int(np.argmin(values))
    return Nu2Report(nu2=value, smallb=smallb, satisfiable=smallb < 0.0,
                     q_min=float(q_grid[best]), nu2_min=float(values[best]))

"""
Named experiments behind the command line.

Each command builds its discretization from an ExperimentConfig, runs one
family of checks and returns a RunRecord. A check is a named value compared
with a tolerance; a run passes when every check passes.
"""

import logging
import math
import os
import time
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from nlbspde.bspde_solver import energy_norms, operator_Lambda
from nlbspde.dual_forward import (duality_check, fixed_point_exclusion,
                                  lambda_floor, mass_contraction_check,
                                  solve_forward_dual)
from nlbspde.errors import ConfigError
from nlbspde.mc_diffusion import (estimate_exit_bound, evaluate_nu2,
                                  feynman_kac_check, girsanov_weight,
                                  mean_estimate, simulate_paths,
                                  survival_series)
from nlbspde.nonlocal_solver import (F0, ScaledInitial, assemble_Q,
                                     kappa_for_eigenvalue, solve_nonlocal,
                                     spectrum, spot_check_Q, sweep_epsilon)
from nlbspde.spatial_disc import check_coercivity, peclet_number
from nlbspde.util import write_path_dump

logger = logging.getLogger(__name__)

CHECK_ALL = ('solve', 'spectrum', 'duality', 'periodic', 'sweep-eps',
             'convergence', 'mc-verify')


@dataclass
class CheckResult:
    name: str
    value: float
    tolerance: Optional[float]
    passed: bool
    detail: dict = field(default_factory=dict)


@dataclass
class RunRecord:
    """Checks of one command with the data identifying the run."""
    experiment_id: str
    command: str
    config_hash: str
    checks: List[CheckResult]
    wall_time: float = 0.0
    outputs: List[str] = field(default_factory=list)

    @property
    def passed(self):
        return all(c.passed for c in self.checks)

    def records(self, timestamp):
        """Rows for util.write_results."""
        return [{'timestamp': timestamp, 'experiment_id': self.experiment_id,
                 'command': self.command, 'config_hash': self.config_hash,
                 'check': c.name, 'value': c.value, 'tolerance': c.tolerance,
                 'passed': bool(c.passed), 'detail': c.detail}
                for c in self.checks]


def _at_most(name, value, tolerance, **detail):
    value = float(value)
    return CheckResult(name, value, tolerance, bool(value <= tolerance),
                       detail)


def _at_least(name, value, tolerance, **detail):
    value = float(value)
    return CheckResult(name, value, tolerance, bool(value >= tolerance),
                       detail)


def derive_seed(seed, *keys):
    """Independent integer seed for a purpose identified by `keys`."""
    state = np.random.SeedSequence([int(seed)] + [int(k) for k in keys])
    return int(state.generate_state(1)[0])


def _setup(cfg):
    tree = cfg.build_tree()
    grid = cfg.build_grid()
    coeffs = cfg.build_coefficients(tree, grid)
    return tree, grid, coeffs


def _solve(cfg, cond, phi, xi, tree, grid, coeffs, Q, threads, method=None):
    s = cfg.section('solver')
    return solve_nonlocal(cond, phi, xi, tree, grid, coeffs,
                          method=method or s['method'], Q=Q, tol=s['tol'],
                          max_iter=s['max_iter'],
                          condition_threshold=s['condition_threshold'],
                          q_budget=s['q_budget'], threads=threads)


def _instance(cfg, tree, grid, key):
    seed = derive_seed(cfg.seed, *key)
    return cfg.build_source(tree, grid, seed=seed), cfg.build_xi(grid,
                                                                 seed=seed)


def _norm_vector(report):
    return np.array([report.u_sup, report.u_X1, report.u_Y1]
                    + list(report.chi_X0)
                    + [report.eta_X0, report.phi_X0, report.data_terminal])


def _relative_scaling_error(base, scaled, alpha, floor=1e-10):
    # norms at round-off level (eta with N=1) carry no scaling information
    mask = base > floor * np.max(base, initial=0.0)
    if not np.any(mask):
        return 0.0
    return float(np.max(np.abs(scaled[mask] - alpha * base[mask])
                        / (abs(alpha) * base[mask])))


def run_solve(cfg, threads):
    """Round trip of the Fredholm formula and the linear estimate."""
    tree, grid, coeffs = _setup(cfg)
    checks = cfg.section('checks')
    cond = cfg.build_condition()
    coercivity = check_coercivity(coeffs, grid, tree)
    out = [CheckResult('coercivity_delta', coercivity.delta, 0.0,
                       coercivity.passed,
                       {'location': list(coercivity.location)})]
    Q = assemble_Q(cond, tree, grid, coeffs,
                   q_budget=cfg.section('solver')['q_budget'],
                   threads=threads, seed=cfg.seed)

    n = checks['instances']
    path_res, bound_res, ratios = [], [], []
    first = None
    for i in range(n):
        phi, xi = _instance(cfg, tree, grid, (1, i))
        sol = _solve(cfg, cond, phi, xi, tree, grid, coeffs, Q, threads)
        path_res.append(sol.diagnostics['path_residual'])
        bound_res.append(sol.diagnostics['boundary_residual'])
        ratios.append(energy_norms(sol, xi).ratio)
        if first is None:
            first = (phi, xi, sol)
    out.append(_at_most('path_residual', max(path_res),
                        checks['path_residual'], instances=n))
    out.append(_at_most('boundary_residual', max(bound_res),
                        checks['boundary_residual'], instances=n))

    alpha = float(checks['alpha'])
    phi, xi, sol = first
    scaled = _solve(cfg, cond, None if phi is None else alpha * phi,
                    alpha * xi, tree, grid, coeffs, Q, threads)
    error = _relative_scaling_error(_norm_vector(energy_norms(sol, xi)),
                                    _norm_vector(energy_norms(scaled,
                                                              alpha * xi)),
                                    alpha)
    out.append(_at_most('linearity', error, checks['linearity'], alpha=alpha))

    constant = max(ratios)
    out.append(CheckResult('estimate_constant', constant, None,
                           bool(np.isfinite(constant)),
                           {'instances': n, 'mean': float(np.mean(ratios)),
                            'min': float(np.min(ratios))}))
    return out


def run_spectrum(cfg, threads):
    """Spectrum of Q, its bound and the Neumann series against LU."""
    tree, grid, coeffs = _setup(cfg)
    checks = cfg.section('checks')
    cond = cfg.build_condition()
    Q = assemble_Q(cond, tree, grid, coeffs,
                   q_budget=cfg.section('solver')['q_budget'],
                   threads=threads, spot_checks=0)
    gap = spot_check_Q(Q, cond, tree, grid, coeffs, seed=cfg.seed,
                       tol=math.inf)
    out = [_at_most('q_spot_check', gap, checks['spot_check'],
                    dimension=Q.dim)]
    report = spectrum(Q)
    radius = report.spectral_radius
    out.append(_at_least('distance_to_one', report.distance_to_one,
                         checks['spectral_tol'], spectral_radius=radius,
                         nearest_real=report.nearest_to_one.real,
                         nearest_imag=report.nearest_to_one.imag))

    c = lambda_floor(coeffs, tree)
    if isinstance(cond, ScaledInitial) and coeffs.is_deterministic and \
            peclet_number(coeffs, grid) <= 1.0 and 1.0 + c * tree.dt > 0.0:
        kappa = abs(cond.kappa * cond.scale)
        bound = kappa * (1.0 + c * tree.dt) ** -tree.depth
        out.append(CheckResult(
            'radius_bound', radius, bound, radius <= bound * (1.0 + 1e-12),
            {'lambda_floor': c,
             'continuum_bound': kappa * math.exp(-c * tree.horizon)}))

    if radius <= checks['neumann_radius']:
        phi, xi = _instance(cfg, tree, grid, (2,))
        direct = _solve(cfg, cond, phi, xi, tree, grid, coeffs, Q, threads,
                        method='direct')
        series = _solve(cfg, cond, phi, xi, tree, grid, coeffs, Q, threads,
                        method='neumann')
        agreement = max(float(np.max(np.abs(direct.u.level(t)
                                            - series.u.level(t))))
                        for t in range(tree.depth + 1))
        out.append(_at_most('neumann_agreement', agreement,
                            checks['neumann_agreement'],
                            spectral_radius=radius))
        iterations = series.diagnostics['iterations']
        expected = series.diagnostics.get('expected_iterations')
        if expected and iterations:
            factor = checks['iteration_factor']
            ratio = iterations / expected
            out.append(CheckResult(
                'neumann_iterations', float(iterations), factor,
                1.0 / factor <= ratio <= factor,
                {'expected': expected, 'ratio': ratio}))
    else:
        logger.info('Spectral radius %.4g above %.4g; Neumann comparison '
                    'skipped.', radius, checks['neumann_radius'])
    return out


def run_duality(cfg, threads):
    """Backward and forward pairings over random (rho, Phi) pairs."""
    tree, grid, coeffs = _setup(cfg)
    checks = cfg.section('checks')
    cond = cfg.build_condition()
    if cond.target != F0:
        raise ConfigError('duality needs an F0 target',
                          field='boundary.target')
    rng = np.random.default_rng(derive_seed(cfg.seed, 3))
    leaves = tree.n_nodes(tree.depth)
    gaps, largest = [], 0.0
    for _ in range(checks['pairs']):
        rho = rng.standard_normal(grid.J)
        Phi = rng.standard_normal((leaves, grid.J))
        report = duality_check(tree, grid, coeffs, cond, rho, Phi)
        gaps.append(report.gap)
        largest = max(largest, abs(report.lhs))
    return [_at_most('duality_gap', max(gaps), checks['duality'],
                     pairs=checks['pairs'], largest_pairing=largest,
                     random_coefficients=not coeffs.is_deterministic)]


def run_periodic(cfg, threads):
    """Periodic-type problem, mass contraction and fixed-point exclusion."""
    tree, grid, coeffs = _setup(cfg)
    checks = cfg.section('checks')
    cond = cfg.build_condition()
    phi, xi = _instance(cfg, tree, grid, (4,))
    sol = _solve(cfg, cond, phi, xi, tree, grid, coeffs, None, threads)
    out = [_at_most('periodic_residual', sol.diagnostics['boundary_residual'],
                    checks['boundary_residual'],
                    leaves=tree.n_nodes(tree.depth)),
           _at_most('path_residual', sol.diagnostics['path_residual'],
                    checks['path_residual'])]

    kappa = cond.kappa * cond.scale if isinstance(cond, ScaledInitial) \
        else None
    mass = mass_contraction_check(tree, grid, coeffs, cfg.grid_density(grid),
                                  condition=checks['mass_condition'],
                                  kappa=kappa, tol=checks['mass'])
    out.append(CheckResult('mass_contraction', mass.final_mass,
                           mass.bound + checks['mass'], mass.passed,
                           dict(mass.detail, condition=mass.condition)))
    if 0.0 < mass.bound < 1.0:
        excl = fixed_point_exclusion(tree, grid, coeffs, mass.bound)
        out.append(CheckResult('fixed_point_exclusion',
                               excl['spectral_radius'], 1.0, excl['passed'],
                               {'kappa_bar': excl['kappa_bar']}))
    return out


def _brownian_constants(cfg):
    """(b, lam) when the coefficients admit the closed-form oracles."""
    c = cfg.section('coefficients')
    if c['preset'] != 'constant':
        return None
    p = c['params']
    if p['drift'] != 0.0 or any(v != 0.0 for v in p.get('beta', [])):
        return None
    return float(p['b']), float(p['lam'])


def _beta_bar_integral(profile, grid, horizon, dt_mc):
    """sum_i int_0^T sup_x beta_bar_i^2 dt on the Monte Carlo time grid."""
    n_steps = int(round(horizon / dt_mc))
    t = dt_mc * np.arange(n_steps)
    total = 0.0
    for func in profile.beta_bar:
        values = np.broadcast_to(np.asarray(func(grid.x_full[:, None],
                                                 t[None, :]), dtype=float),
                                 (grid.J + 2, n_steps))
        total += dt_mc * float(np.sum(np.max(values ** 2, axis=0)))
    return total


def _unit(y):
    return np.ones_like(y)


def run_mc_verify(cfg, threads, dump_dir=None, outputs=None):
    """Exit bound, nu2 arithmetic and the Feynman-Kac cross-check."""
    d = cfg.section('discretization')
    mc = cfg.section('monte_carlo')
    checks = cfg.section('checks')
    profile = cfg.build_profile()
    if not profile.is_deterministic:
        raise ConfigError('mc-verify needs deterministic coefficients',
                          field='coefficients.preset')
    x_min, x_max = float(d['x_min']), float(d['x_max'])
    tree = cfg.build_tree()
    grid = cfg.build_grid()
    coeffs = profile.sample(tree, grid).validate(tree, grid)
    start = cfg.start_law(grid)
    constants = _brownian_constants(cfg)
    n_se = checks['mc_se']
    out = []

    exit_T = float(mc['exit_horizon'] or d['T'])
    ensemble = simulate_paths(profile, x_min, x_max, start,
                              int(mc['exit_paths'] or mc['n_paths']),
                              mc['dt_mc'], exit_T, seed=[cfg.seed, 1],
                              threads=threads, block_size=mc['block_size'],
                              bridge=mc['bridge'])
    survival = estimate_exit_bound(profile, x_min, x_max, start,
                                   ensemble.n_paths, mc['dt_mc'], exit_T,
                                   ensemble=ensemble)
    if constants is not None:
        oracle = survival_series(constants[0], x_min, x_max, exit_T, start)
        out.append(CheckResult(
            'exit_survival', survival.estimate, n_se * survival.se,
            abs(survival.estimate - oracle) <= n_se * survival.se,
            {'oracle': oracle, 'se': survival.se, 'horizon': exit_T,
             'n_paths': ensemble.n_paths}))
    else:
        out.append(_at_most('exit_bound', survival.ci_high, 1.0 - 1e-12,
                            estimate=survival.estimate, horizon=exit_T))

    gamma_m, _ = girsanov_weight(ensemble)
    mean = mean_estimate(gamma_m)
    out.append(_at_most('gamma_martingale_mean', abs(mean.estimate - 1.0),
                        max(n_se * mean.se, 1e-12), estimate=mean.estimate,
                        se=mean.se))

    for i, case in enumerate(checks['nu2_cases']):
        report = evaluate_nu2(case['q'], case['nu'], case['S'])
        passed = report.satisfiable == bool(case['satisfiable'])
        if case.get('nu2') is not None:
            passed = passed and abs(report.nu2 - case['nu2']) <= checks['nu2']
        out.append(CheckResult('nu2_case_{}'.format(i + 1), report.nu2,
                               checks['nu2'], passed,
                               {'smallb': report.smallb,
                                'satisfiable': report.satisfiable,
                                'expected': case.get('nu2')}))

    nu = survival.estimate
    if 0.0 < nu < 1.0:
        S = _beta_bar_integral(profile, grid, exit_T, mc['dt_mc'])
        report = evaluate_nu2(mc['q'], nu, S)
        out.append(CheckResult(
            'nu2_estimated', report.nu2, None,
            (not report.satisfiable) or report.nu2_min < 1.0,
            {'nu': nu, 'S': S, 'smallb': report.smallb,
             'satisfiable': report.satisfiable, 'q_min': report.q_min,
             'nu2_min': report.nu2_min}))

    cond = cfg.build_condition()
    kappa = cond.kappa * cond.scale if isinstance(cond, ScaledInitial) \
        else 1.0
    dual = solve_forward_dual(tree, grid, coeffs, 0, cfg.grid_density(grid))
    fk = feynman_kac_check(profile, x_min, x_max, start, _unit, dual,
                           kappa=kappa, n_paths=mc['n_paths'],
                           dt_mc=mc['dt_mc'], seed=[cfg.seed, 2],
                           threads=threads, rel_tol=checks['mc_rel'])
    out.append(CheckResult('feynman_kac_mc_tree', fk.gap, fk.tolerance,
                           fk.passed, {'mc': fk.mc, 'se': fk.se,
                                       'tree': fk.tree}))
    if constants is not None:
        b, lam = constants
        oracle = kappa * math.exp(-lam * tree.horizon) * survival_series(
            b, x_min, x_max, tree.horizon, start)
        tolerance = max(n_se * fk.se, checks['mc_rel'] * abs(oracle))
        out.append(_at_most('feynman_kac_tree_oracle', abs(fk.tree - oracle),
                            tolerance, oracle=oracle, tree=fk.tree))
        out.append(_at_most('feynman_kac_mc_oracle', abs(fk.mc - oracle),
                            tolerance, oracle=oracle, mc=fk.mc))

    if dump_dir is not None:
        path = os.path.join(dump_dir, '{}_paths.bin'.format(
            cfg.experiment_id))
        write_path_dump(path, ensemble.records(), mc['dt_mc'], exit_T)
        logger.info('Wrote %d path records to %s', ensemble.n_paths, path)
        if outputs is not None:
            outputs.append(path)
    return out


def run_sweep_eps(cfg, threads):
    """Solvability of (1 + eps) Gamma over a grid of eps."""
    tree, grid, coeffs = _setup(cfg)
    checks = cfg.section('checks')
    sweep = cfg.section('sweep')
    q_budget = cfg.section('solver')['q_budget']
    eps_grid = np.linspace(sweep['eps_min'], sweep['eps_max'], sweep['n'])
    phi, xi = _instance(cfg, tree, grid, (5,))

    rows = sweep_epsilon(cfg.build_condition(), eps_grid, phi, xi, tree,
                         grid, coeffs, flag_tol=sweep['flag_tol'],
                         q_budget=q_budget, threads=threads)
    solvable = sum(r['solvable'] for r in rows)
    residuals = [r['boundary_residual'] for r in rows if r['solvable']]
    out = [CheckResult('sweep_contraction', float(solvable), float(len(rows)),
                       solvable == len(rows),
                       {'flagged': sum(r['flagged'] for r in rows)})]
    if residuals:
        out.append(_at_most('sweep_boundary_residual', max(residuals),
                            checks['boundary_residual']))

    target = sweep['engineered_eigenvalue']
    kappa = kappa_for_eigenvalue(tree, grid, coeffs, target,
                                 q_budget=q_budget)
    rows = sweep_epsilon(ScaledInitial(target=F0, kappa=kappa), eps_grid,
                         phi, xi, tree, grid, coeffs,
                         flag_tol=sweep['flag_tol'], q_budget=q_budget,
                         threads=threads)
    expected = [abs(1.0 / (1.0 + e) - target) < sweep['flag_tol']
                for e in eps_grid]
    flagged = [r['flagged'] for r in rows]
    out.append(CheckResult(
        'sweep_engineered_flags', float(sum(flagged)), float(sum(expected)),
        flagged == expected and any(expected),
        {'kappa': kappa, 'eigenvalue': target,
         'flagged_eps': [r['eps'] for r in rows if r['flagged']]}))
    return out


def _l2(v, h):
    return math.sqrt(h * float(np.sum(v ** 2)))


def run_convergence(cfg, threads):
    """Self-convergence and analytic error of the deterministic scheme."""
    conv = cfg.section('convergence')
    checks = cfg.section('checks')
    profile = cfg.build_profile()
    if not profile.is_deterministic:
        raise ConfigError('convergence needs deterministic coefficients',
                          field='coefficients.preset')
    k = int(conv['mode'])

    def solve_at(M, J):
        tree = cfg.build_tree(M=M, collapsed=True)
        grid = cfg.build_grid(J)
        coeffs = profile.sample(tree, grid)
        sol = operator_Lambda(tree, grid, coeffs, grid.mode(k)[None],
                              diagnostics=False)
        return grid, sol.initial()[0]

    out = []
    levels = conv['time_levels']
    grid = cfg.build_grid(conv['fixed_J'])
    u = [solve_at(M, conv['fixed_J'])[1] for M in levels]
    errors = [_l2(a - b, grid.h) for a, b in zip(u, u[1:])]
    order = math.log(errors[0] / errors[1]) / math.log(levels[1] / levels[0])
    out.append(_at_least('temporal_order', order, checks['order_time'],
                         differences=errors, levels=levels))

    points = conv['space_points']
    if any(fine != 2 * coarse + 1 for coarse, fine in zip(points, points[1:])):
        raise ConfigError('each entry must be 2 J + 1 of the previous one',
                          field='convergence.space_points')
    solved = [solve_at(conv['fixed_M'], J) for J in points]
    errors = [_l2(coarse - fine[1::2], g.h)
              for (g, coarse), (_, fine) in zip(solved, solved[1:])]
    order = math.log(errors[0] / errors[1]) / math.log(2.0)
    out.append(_at_least('spatial_order', order, checks['order_space'],
                         differences=errors, points=points))

    constants = _brownian_constants(cfg)
    if constants is not None:
        b, lam = constants
        grid, u = solve_at(conv['analytic_M'], conv['analytic_J'])
        horizon = float(cfg.section('discretization')['T'])
        exact = math.exp(-(b * (k * math.pi / grid.length) ** 2 + lam)
                         * horizon) * grid.mode(k)
        error = _l2(u - exact, grid.h) / _l2(exact, grid.h)
        out.append(_at_most('analytic_error', error, checks['analytic'],
                            M=conv['analytic_M'], J=conv['analytic_J']))
    return out


COMMANDS = {
    'solve': run_solve,
    'spectrum': run_spectrum,
    'duality': run_duality,
    'periodic': run_periodic,
    'sweep-eps': run_sweep_eps,
    'convergence': run_convergence,
    'mc-verify': run_mc_verify,
}


def run(config, command, threads=None, dump_dir=None):
    """
    Run one command, or every command for 'check-all'.

    Parameters
    ----------
    config: ExperimentConfig
        Base configuration; per-command overrides are applied here.
    command: string
        One of control.SUBCOMMANDS.
    threads: int or None
        Worker cap; the configured solver.threads when None.
    dump_dir: string or None
        Directory of the raw path dump written by mc-verify.

    Returns
    -------
    list of RunRecord
    """
    if command == 'check-all':
        records = []
        for name in CHECK_ALL:
            records.extend(run(config, name, threads=threads,
                               dump_dir=dump_dir))
        return records
    if command not in COMMANDS:
        raise ValueError('Unknown command {}.'.format(command))

    cfg = config.for_command(command)
    threads = threads or cfg.section('solver')['threads']
    logger.info('Running %s (%s)', command, cfg.experiment_id)
    outputs = []
    begin = time.perf_counter()
    if command == 'mc-verify':
        checks = run_mc_verify(cfg, threads, dump_dir=dump_dir,
                               outputs=outputs)
    else:
        checks = COMMANDS[command](cfg, threads)
    record = RunRecord(experiment_id=config.experiment_id, command=command,
                       config_hash=config.hash, checks=checks,
                       wall_time=time.perf_counter() - begin, outputs=outputs)
    for check in checks:
        log = logger.info if check.passed else logger.error
        log('%s %s: %.6g (tolerance %s)', command, check.name, check.value,
            check.tolerance)
    return [record]

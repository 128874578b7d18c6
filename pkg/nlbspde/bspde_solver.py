"""
Backward induction for the Cauchy problem of a linear backward SPDE.

At every level t, going from the terminal level s down to the root, the
children of each node give the conditional mean m and the diffusion terms
chi_i of u(., t+1) by martingale representation. The step is implicit in A
and explicit in the B_i chi_i coupling:

    (I - dt A) u(., t) = m + dt (phi(., t) + sum_i B_i chi_i(., t)).

With N >= 2 the 2^N children are not spanned by the constant and the N
increments; the leftover eta is orthogonal to both and is carried as an extra
martingale increment, which keeps the discrete integral identity exact on
every path.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from nlbspde.errors import RepresentationError, ShapeError
from nlbspde.scenario_tree import AdaptedField, martingale_decomposition
from nlbspde.spatial_disc import assemble_A, assemble_B

logger = logging.getLogger(__name__)


@dataclass
class BSPDESolution:
    """
    Adapted pair (u, chi) with the data that produced it.

    Parameters
    ----------
    u: AdaptedField
        Levels 0..s.
    chi: list of AdaptedField
        One field per Brownian component, levels 0..s-1.
    eta: AdaptedField
        Orthogonal remainder of the martingale representation, levels 1..s.
    Phi: ndarray
        Terminal data at level s, shape (rows, J, *batch).
    phi: AdaptedField or None
        Source.
    """
    tree: object
    grid: object
    coeffs: object
    s: int
    u: AdaptedField
    chi: List[AdaptedField]
    eta: AdaptedField
    Phi: np.ndarray
    phi: Optional[AdaptedField] = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def batch_shape(self):
        return self.u.batch_shape

    def initial(self):
        """u(., 0) as an array (1, J, *batch)."""
        return self.u.level(0)

    def terminal(self):
        return self.u.level(self.s)


def _terminal_rows(Phi, tree, s):
    if isinstance(Phi, AdaptedField):
        Phi = Phi.level(s)
    Phi = np.asarray(Phi, dtype=float)
    if Phi.ndim == 1:
        Phi = Phi[None]
    rows = Phi.shape[0]
    if rows in (1, tree.n_nodes(s)):
        return Phi
    if tree.collapsed:
        raise ShapeError('Node-dependent terminal data on a collapsed tree.')
    if rows > tree.n_nodes(s):
        raise RepresentationError(
            'Terminal data has {} rows but level {} has {} nodes: it is not '
            'F_s-measurable.'.format(rows, s, tree.n_nodes(s)))
    raise ShapeError('Terminal data has {} rows, level {} has {} '
                     'nodes.'.format(rows, s, tree.n_nodes(s)))


def _source_rows(phi, tree, t, shape):
    if phi is None:
        return None
    values = phi.level(t)
    rows = values.shape[0]
    if rows not in (1, tree.n_nodes(t)):
        if tree.collapsed:
            raise ShapeError('Node-dependent source on a collapsed tree.')
        raise RepresentationError(
            'Source has {} rows at level {} with {} nodes: it is not '
            'adapted.'.format(rows, t, tree.n_nodes(t)))
    if values.shape[1:] != shape:
        values = np.broadcast_to(values, (rows,) + shape)
    return values


def _coupling(coeffs, grid, t, chi):
    """sum_i B_i chi_i at level t; chi of shape (rows, N, J, *batch)."""
    total = None
    for i in range(coeffs.n_brownian):
        term = assemble_B(coeffs, grid, i, t).apply(chi[:, i])
        total = term if total is None else total + term
    return total


def solve_cauchy_backward(tree, grid, coeffs, s, Phi, phi=None,
                          diagnostics=True):
    """
    Solve the Cauchy problem backward from level s.

    Parameters
    ----------
    tree: ScenarioTree
    grid: Grid
    coeffs: CoefficientSet
    s: int
        Terminal level (1..M).
    Phi: ndarray or AdaptedField
        Terminal data at level s, shape (rows, J, *batch) with rows 1 or the
        node count of level s; a (J,) array is deterministic data.
    phi: AdaptedField or None
        Source covering levels 0..s-1.
    diagnostics: bool
        Compute the path residual of the integral identity.

    Returns
    -------
    BSPDESolution
    """
    if not 1 <= s <= tree.depth:
        raise ValueError('Terminal level {} outside 1..{}.'.format(
            s, tree.depth))
    coeffs.validate(tree, grid)
    Phi = _terminal_rows(Phi, tree, s)
    if Phi.shape[1] != grid.J:
        raise ShapeError('Terminal data has {} points, the grid {}.'.format(
            Phi.shape[1], grid.J))
    if phi is not None:
        phi.validate(tree)
        if phi.start > 0 or phi.stop < s - 1:
            raise ShapeError('Source must cover levels 0..{}.'.format(s - 1))
        if phi.n_points != grid.J:
            raise ShapeError('Source has {} points, the grid {}.'.format(
                phi.n_points, grid.J))
    shape = Phi.shape[1:]
    if phi is not None and phi.batch_shape and not Phi.shape[2:]:
        shape = (grid.J,) + phi.batch_shape
        Phi = np.broadcast_to(Phi, (Phi.shape[0],) + shape)

    dt = tree.dt
    N = tree.n_brownian
    has_coupling = any(np.any(v != 0.0)
                       for f in coeffs.beta + coeffs.beta_bar
                       for v in f.levels)
    if has_coupling and dt > grid.h:
        logger.warning('dt=%.3g exceeds h=%.3g; the explicit chi coupling '
                       'is only monitored stable for dt <= h.', dt, grid.h)

    u_levels = [None] * (s + 1)
    chi_levels = [None] * s
    eta_levels = [None] * s
    u_levels[s] = np.array(Phi, dtype=float)
    margin = np.inf
    for t in range(s - 1, -1, -1):
        child = u_levels[t + 1]
        if child.shape[0] == 1:
            mean = child
            chi = np.zeros((1, N) + child.shape[1:])
            eta = np.zeros_like(child)
        else:
            children = tree.split_children(child, t)
            mean, chi, remainder = martingale_decomposition(children, tree)
            eta = tree.join_children(remainder, t)
        rhs = mean
        source = _source_rows(phi, tree, t, shape)
        if source is not None:
            rhs = rhs + dt * source
        if has_coupling and np.any(chi != 0.0):
            rhs = rhs + dt * _coupling(coeffs, grid, t, chi)
        step = assemble_A(coeffs, grid, t).identity_minus(dt)
        margin = min(margin, step.dominance_margin())
        u_levels[t] = step.solve(rhs)
        chi_levels[t] = chi
        eta_levels[t] = eta
    if margin < 0.0:
        logger.warning('Implicit step is not diagonally dominant '
                       '(margin %.3g).', margin)

    u = AdaptedField(u_levels, measurability=_kind(u_levels))
    chi = [AdaptedField([c[:, i] for c in chi_levels],
                        measurability=_kind(chi_levels))
           for i in range(N)]
    eta = AdaptedField(eta_levels, start=1, measurability=_kind(eta_levels))
    sol = BSPDESolution(tree=tree, grid=grid, coeffs=coeffs, s=s, u=u,
                        chi=chi, eta=eta, Phi=u_levels[s], phi=phi)
    sol.diagnostics.update({'dominance_margin': margin,
                            'dt_over_h': dt / grid.h})
    if diagnostics:
        sol.diagnostics['path_residual'] = path_residual(sol)
        logger.debug('Backward solve s=%d: path residual %.3e', s,
                     sol.diagnostics['path_residual'])
    return sol


def _kind(levels):
    if all(v.shape[0] == 1 for v in levels):
        return AdaptedField.DETERMINISTIC
    return AdaptedField.ADAPTED


def local_residuals(sol):
    """
    One-step defect of the integral identity on every edge of the tree.

    Returns
    -------
    list of ndarray
        Entry r holds, at the nodes of level r+1,
        u(r) - u(r+1) - dt (A u(r) + phi(r) + sum_i B_i chi_i(r))
        + sum_i chi_i(r) dw_i + eta.
    """
    tree, grid, coeffs = sol.tree, sol.grid, sol.coeffs
    dt = tree.dt
    shape = sol.u.level(0).shape[1:]
    out = []
    for r in range(sol.s):
        u_r = sol.u.level(r)
        chi = np.stack([c.level(r) for c in sol.chi], axis=1)
        drift = assemble_A(coeffs, grid, r, check=False).apply(u_r)
        source = _source_rows(sol.phi, tree, r, shape)
        if source is not None:
            drift = drift + source
        coupling = _coupling(coeffs, grid, r, chi)
        if coupling is not None:
            drift = drift + coupling
        parent = u_r - dt * drift
        child = sol.u.level(r + 1)
        eta = sol.eta.level(r + 1)
        if child.shape[0] == 1 and np.shape(parent)[0] == 1:
            out.append(parent - child + eta)
            continue
        parent = tree.expand(parent, r, r + 1)
        chi_child = tree.expand(chi, r, r + 1)
        dw = tree.branch_increments(r + 1)
        dw = dw.reshape(dw.shape + (1,) * (chi_child.ndim - 2))
        martingale = np.sum(chi_child * dw, axis=1)
        out.append(parent - child + martingale + eta)
    return out


def path_residual(sol):
    """
    Largest defect of the integral identity between any level t and s,
    over every path.
    """
    tree = sol.tree
    local = local_residuals(sol)
    prefix = [np.zeros((1,) + sol.u.level(0).shape[1:])]
    for r, d in enumerate(local):
        prefix.append(tree.expand(prefix[-1], r, r + 1) + d)
    final = prefix[-1]
    worst = 0.0
    for t in range(sol.s):
        suffix = final - tree.expand(prefix[t], t, sol.s)
        worst = max(worst, float(np.max(np.abs(suffix))))
    return worst


def operator_L(tree, grid, coeffs, phi, s=None, diagnostics=True):
    """Solution map of the source with zero terminal data."""
    s = tree.depth if s is None else s
    Phi = np.zeros((1, grid.J) + phi.batch_shape)
    return solve_cauchy_backward(tree, grid, coeffs, s, Phi, phi=phi,
                                 diagnostics=diagnostics)


def operator_Lambda(tree, grid, coeffs, Phi, s=None, diagnostics=True):
    """Solution map of the terminal data with zero source."""
    s = tree.depth if s is None else s
    return solve_cauchy_backward(tree, grid, coeffs, s, Phi, phi=None,
                                 diagnostics=diagnostics)


@dataclass
class NormReport:
    """Discrete norms of a solution and of its data."""
    u_sup: float
    u_X1: float
    u_Y1: float
    chi_X0: List[float]
    eta_X0: float
    phi_X0: float
    data_terminal: float
    ratio: float


def _level_norm2(values, tree, t, h):
    sq = h * np.sum(np.reshape(values, (values.shape[0], -1)) ** 2, axis=1)
    return float(tree.expectation(sq, t))


def _gradient_norm2(values, tree, t, h):
    padded = np.zeros((values.shape[0], values.shape[1] + 2)
                      + values.shape[2:])
    padded[:, 1:-1] = values
    grad = np.diff(padded, axis=1) / h
    return _level_norm2(grad, tree, t, h)


def x0_norm(field_, tree, h, levels):
    """sqrt(sum_t dt E |v(t)|_h^2) over the given levels."""
    return float(np.sqrt(sum(tree.dt * _level_norm2(field_.level(t), tree, t,
                                                    h)
                             for t in levels)))


def energy_norms(sol, xi=None):
    """
    Discrete Y1 norm of u, X0 norms of every chi_i and of the data.

    Parameters
    ----------
    sol: BSPDESolution
    xi: ndarray or None
        Boundary datum to use in place of the terminal data in the ratio
        (non-local problems).

    Returns
    -------
    NormReport
    """
    tree, h = sol.tree, sol.grid.h
    levels = range(sol.s)
    u_sup = max(np.sqrt(_level_norm2(sol.u.level(t), tree, t, h))
                for t in range(sol.s + 1))
    u_X1 = float(np.sqrt(sum(
        tree.dt * (_level_norm2(sol.u.level(t), tree, t, h)
                   + _gradient_norm2(sol.u.level(t), tree, t, h))
        for t in levels)))
    chi_X0 = [x0_norm(c, tree, h, levels) for c in sol.chi]
    eta_X0 = float(np.sqrt(sum(
        _level_norm2(sol.eta.level(t), tree, t, h) for t in range(1, sol.s + 1))))
    phi_X0 = 0.0 if sol.phi is None else x0_norm(sol.phi, tree, h, levels)
    if xi is None:
        data_terminal = np.sqrt(_level_norm2(sol.Phi, tree, sol.s, h))
    else:
        xi = np.asarray(xi, dtype=float)
        xi = xi[None] if xi.ndim == 1 else xi
        rows = xi.shape[0]
        level = 0 if rows == 1 else sol.s
        data_terminal = np.sqrt(_level_norm2(xi, tree, level, h))
    u_Y1 = float(u_sup + u_X1)
    solution = u_Y1 + sum(chi_X0)
    data = phi_X0 + float(data_terminal)
    ratio = solution / data if data > 0.0 else 0.0
    return NormReport(u_sup=float(u_sup), u_X1=u_X1, u_Y1=u_Y1,
                      chi_X0=chi_X0, eta_X0=eta_X0, phi_X0=phi_X0,
                      data_terminal=float(data_terminal), ratio=ratio)


def exponential_weight_transform(sol, q):
    """
    u_q(t) = exp(q (T_s - t)) u(t), with T_s = s dt.

    chi and eta at the edge (t, t+1) take the weight of level t+1 so that
    they stay the martingale representation of the transformed u. The
    returned solution solves, up to O(dt) per unit time, the Cauchy problem
    with lam replaced by lam - q and source exp(q (T_s - t)) phi.

    Parameters
    ----------
    sol: BSPDESolution
    q: float

    Returns
    -------
    BSPDESolution
    """
    dt, s = sol.tree.dt, sol.s

    def weight(t):
        return float(np.exp(q * (s - t) * dt))

    u = sol.u.map(lambda v, t: weight(t) * v)
    chi = [c.map(lambda v, t: weight(t + 1) * v) for c in sol.chi]
    eta = sol.eta.map(lambda v, t: weight(t) * v)
    phi = None if sol.phi is None else sol.phi.map(lambda v, t: weight(t) * v)
    return BSPDESolution(tree=sol.tree, grid=sol.grid,
                         coeffs=sol.coeffs.with_lambda_shift(q), s=s, u=u,
                         chi=chi, eta=eta, Phi=u.level(s), phi=phi,
                         diagnostics={'weight_q': q})

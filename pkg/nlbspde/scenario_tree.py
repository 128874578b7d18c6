"""
Finite filtered probability space.

A ScenarioTree replaces the Wiener space by a non-recombining tree of depth M
in which every node has 2^N children, one per sign pattern of the N
increments (+/- sqrt(dt)). Nodes at level t are numbered 0..(2^N)^t - 1 and
the children of node k are k * 2^N + c, c = 0..2^N - 1, so a level array is
split into its parents' children by a reshape.

AdaptedField stores space-time fields level by level. A node index at level t
is the whole history up to t, which makes adaptedness structural.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from nlbspde.errors import RepresentationError, ShapeError, TreeSizeError

logger = logging.getLogger(__name__)

DEFAULT_NODE_BUDGET = 2 ** 20
MAX_BROWNIAN = 3
REPRESENTATION_TOL = 1e-10


@dataclass(frozen=True)
class ScenarioTree:
    """
    Binary-per-Brownian-motion scenario tree.

    Parameters
    ----------
    depth: int
        Number of time steps M.
    horizon: float
        Terminal time T.
    n_brownian: int
        Number N of driving Wiener components.
    node_budget: int
        Largest admissible number of leaves.
    collapsed: bool
        Keep one representative node per level. Only valid for deterministic
        inputs, for which every node of a level carries the same values.
    """
    depth: int
    horizon: float
    n_brownian: int
    node_budget: int = DEFAULT_NODE_BUDGET
    collapsed: bool = False
    increments: np.ndarray = field(init=False, repr=False, compare=False)
    probabilities: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        branching = 2 ** self.n_brownian
        sqdt = np.sqrt(self.dt)
        bits = (np.arange(branching)[:, None]
                 >> np.arange(self.n_brownian)[None, :]) & 1
        increments = sqdt * (1.0 - 2.0 * bits)
        probabilities = np.full(branching, 1.0 / branching)
        increments.setflags(write=False)
        probabilities.setflags(write=False)
        object.__setattr__(self, 'increments', increments)
        object.__setattr__(self, 'probabilities', probabilities)

    @property
    def dt(self):
        return self.horizon / self.depth

    @property
    def branching(self):
        return 2 ** self.n_brownian

    @property
    def n_leaves(self):
        """Number of leaves of the represented (full) tree."""
        return self.branching ** self.depth

    def n_nodes(self, t):
        """Number of stored nodes at level t."""
        self._check_level(t)
        return 1 if self.collapsed else self.branching ** t

    def times(self):
        return self.dt * np.arange(self.depth + 1)

    def parent(self, t, k):
        """Index at level t-1 of the parent of node k at level t."""
        if t < 1:
            raise ValueError('The root has no parent.')
        return 0 if self.collapsed else k // self.branching

    def children(self, t, k):
        """Indices at level t+1 of the children of node k at level t."""
        if self.collapsed:
            return np.zeros(self.branching, dtype=np.int64)
        return k * self.branching + np.arange(self.branching)

    def level_probabilities(self, t):
        n = self.n_nodes(t)
        return np.full(n, 1.0 / n)

    def expectation(self, values, t):
        """
        Expectation of a level-t array over the nodes of level t.

        Parameters
        ----------
        values: ndarray
            Array of shape (n_nodes(t) or 1, ...).
        t: int
            Tree level.
        """
        values = np.asarray(values)
        if values.shape[0] == 1:
            return values[0]
        if values.shape[0] != self.n_nodes(t):
            raise ShapeError('Level {} has {} nodes, got {} rows.'.format(
                t, self.n_nodes(t), values.shape[0]))
        return np.tensordot(self.level_probabilities(t), values, axes=(0, 0))

    def split_children(self, values, t):
        """
        Arrange a level-(t+1) array as (n_nodes(t), 2^N, ...).
        """
        values = np.asarray(values)
        n_child = self.n_nodes(t + 1)
        if values.shape[0] == 1 and n_child > 1:
            values = np.broadcast_to(values, (n_child,) + values.shape[1:])
        if values.shape[0] != n_child:
            raise ShapeError('Level {} has {} nodes, got {} rows.'.format(
                t + 1, n_child, values.shape[0]))
        if self.collapsed:
            return np.broadcast_to(values[:, None],
                                   (1, self.branching) + values.shape[1:])
        return values.reshape((self.n_nodes(t), self.branching)
                              + values.shape[1:])

    def join_children(self, values, t):
        """Inverse of `split_children`: (n_nodes(t), 2^N, ...) to level t+1."""
        values = np.asarray(values)
        if self.collapsed:
            return values[:, 0]
        return values.reshape((self.n_nodes(t + 1),) + values.shape[2:])

    def expand(self, values, t, level):
        """Repeat a level-t array onto the descendants at a deeper level."""
        values = np.asarray(values)
        if self.collapsed or values.shape[0] == 1:
            return values
        return np.repeat(values, self.branching ** (level - t), axis=0)

    def branch_increments(self, t):
        """Increment vector leading into each node of level t >= 1."""
        if t < 1:
            raise ValueError('Level 0 has no incoming increment.')
        if self.collapsed:
            return self.increments[:1]
        return self.increments[np.arange(self.n_nodes(t)) % self.branching]

    def _check_level(self, t):
        if not 0 <= t <= self.depth:
            raise ValueError('Level {} outside 0..{}.'.format(t, self.depth))


def build_tree(M, N, T, node_budget=DEFAULT_NODE_BUDGET, collapsed=False):
    """
    Build a scenario tree.

    Parameters
    ----------
    M: int
        Number of time steps (>= 1).
    N: int
        Number of Brownian components (1..3).
    T: float
        Horizon (> 0).
    node_budget: int
        Maximum number of leaves of a full tree.
    collapsed: bool
        Build the one-node-per-level tree for deterministic problems.

    Returns
    -------
    ScenarioTree
    """
    if M < 1 or N < 1 or not T > 0:
        raise ValueError('Need M >= 1, N >= 1 and T > 0, got M={}, N={}, '
                         'T={}.'.format(M, N, T))
    if N > MAX_BROWNIAN:
        raise ValueError('At most {} Brownian components are supported, '
                         'got {}.'.format(MAX_BROWNIAN, N))
    leaves = (2 ** N) ** M
    if not collapsed and leaves > node_budget:
        raise TreeSizeError(
            'A tree with M={} and N={} has {} leaves, above the node budget '
            'of {}.'.format(M, N, leaves, node_budget),
            limit=node_budget, requested=leaves)
    tree = ScenarioTree(depth=int(M), horizon=float(T), n_brownian=int(N),
                        node_budget=int(node_budget), collapsed=collapsed)
    logger.debug('Built tree M=%d N=%d T=%g (%s, %d leaves)', M, N, T,
                 'collapsed' if collapsed else 'full', leaves)
    return tree


def _check_children(child_values, tree):
    child_values = np.asarray(child_values, dtype=float)
    if child_values.ndim == 0 or child_values.shape[0] != tree.branching:
        raise ShapeError('Expected {} child values, got shape {}.'.format(
            tree.branching, child_values.shape))
    return child_values


def conditional_expectation(child_values, tree):
    """
    E[X | F_t] at one node from the values of X at its children.

    Parameters
    ----------
    child_values: array-like
        Values at the 2^N children (first axis), any trailing shape.
    tree: ScenarioTree

    Returns
    -------
    float or ndarray
    """
    child_values = _check_children(child_values, tree)
    mean = np.tensordot(tree.probabilities, child_values, axes=(0, 0))
    return float(mean) if np.ndim(mean) == 0 else mean


def martingale_decomposition(children, tree):
    """
    Vectorized martingale representation over many nodes.

    Parameters
    ----------
    children: ndarray
        Shape (n, 2^N, ...) as returned by `ScenarioTree.split_children`.
    tree: ScenarioTree

    Returns
    -------
    mean: ndarray (n, ...)
    chi: ndarray (n, N, ...)
    remainder: ndarray (n, 2^N, ...)
        X_c - mean - sum_i chi_i dw_i^c; identically zero for N=1, in general
        orthogonal to the constants and to every increment.
    """
    probs = tree.probabilities
    mean = np.tensordot(probs, children, axes=(0, 1))
    weighted = tree.increments * probs[:, None] / tree.dt
    chi = np.moveaxis(np.tensordot(weighted, children, axes=(0, 1)), 1, 0)
    fitted = np.tensordot(tree.increments, chi, axes=(1, 1))
    fitted = np.moveaxis(fitted, 0, 1)
    remainder = children - mean[:, None] - fitted
    return mean, chi, remainder


def martingale_representation(child_values, tree, strict=True,
                              tol=REPRESENTATION_TOL):
    """
    Split X at the children of a node into mean + sum_i chi_i dw_i.

    Parameters
    ----------
    child_values: array-like
        Values at the 2^N children (first axis).
    tree: ScenarioTree
    strict: bool
        Raise when the reconstruction residual is above `tol` (relative).
    tol: float

    Returns
    -------
    mean: float or ndarray
    chi: ndarray
        Shape (N,) + trailing shape.
    """
    child_values = _check_children(child_values, tree)
    mean, chi, remainder = martingale_decomposition(child_values[None], tree)
    scale = max(1.0, float(np.max(np.abs(child_values))))
    residual = float(np.max(np.abs(remainder))) / scale
    if strict and residual > tol:
        raise RepresentationError(
            'Child values are not spanned by the increments (relative '
            'residual {:.3e} > {:.1e}); the input is not adapted to the '
            'driving increments.'.format(residual, tol), residual=residual)
    mean = mean[0]
    return (float(mean) if np.ndim(mean) == 0 else mean), chi[0]


def sample_path(tree, seed):
    """
    Draw one root-to-leaf path.

    Returns
    -------
    ndarray of int
        Node index per level, M + 1 entries starting with the root.
    """
    rng = np.random.default_rng(seed)
    branches = rng.integers(0, tree.branching, size=tree.depth)
    if tree.collapsed:
        return np.zeros(tree.depth + 1, dtype=np.int64)
    nodes = np.zeros(tree.depth + 1, dtype=np.int64)
    for t, c in enumerate(branches):
        nodes[t + 1] = nodes[t] * tree.branching + c
    return nodes


class AdaptedField:
    """
    Space-time field indexed by (level, node, grid point).

    Levels `start..stop` are stored as arrays of shape (rows, J, *batch) where
    rows is either the node count of the level or 1 for a field that is the
    same at every node. A trailing batch shape lets one sweep carry many
    right-hand sides at once.

    Parameters
    ----------
    levels: list of ndarray
        One array per level, starting at level `start`.
    start: int
        First stored level.
    measurability: str
        'deterministic', 'F0' or 'adapted'.
    """
    DETERMINISTIC = 'deterministic'
    F0 = 'F0'
    ADAPTED = 'adapted'
    KINDS = (DETERMINISTIC, F0, ADAPTED)

    def __init__(self, levels, start=0, measurability=ADAPTED):
        if measurability not in self.KINDS:
            raise ValueError('Unknown measurability {}.'.format(measurability))
        self.levels = [np.asarray(v, dtype=float) for v in levels]
        self.start = int(start)
        self.measurability = measurability
        if measurability != self.ADAPTED and \
                any(v.shape[0] != 1 for v in self.levels):
            raise ShapeError('A {} field must store one row per '
                             'level.'.format(measurability))

    @property
    def stop(self):
        return self.start + len(self.levels) - 1

    @property
    def n_points(self):
        return self.levels[0].shape[1]

    @property
    def batch_shape(self):
        return self.levels[0].shape[2:]

    @property
    def is_deterministic(self):
        return all(v.shape[0] == 1 for v in self.levels)

    def level(self, t):
        if not self.start <= t <= self.stop:
            raise ValueError('Level {} not stored (levels {}..{}).'.format(
                t, self.start, self.stop))
        return self.levels[t - self.start]

    def at(self, t, tree):
        """Level t broadcast to one row per node."""
        values = self.level(t)
        n = tree.n_nodes(t)
        if values.shape[0] == n:
            return values
        if values.shape[0] == 1:
            return np.broadcast_to(values, (n,) + values.shape[1:])
        raise ShapeError('Level {} has {} nodes, field stores {} rows.'.format(
            t, n, values.shape[0]))

    def node(self, t, k):
        values = self.level(t)
        return values[0] if values.shape[0] == 1 else values[k]

    def validate(self, tree):
        for t in range(self.start, self.stop + 1):
            rows = self.level(t).shape[0]
            if rows not in (1, tree.n_nodes(t)):
                raise ShapeError(
                    'Level {} of the field has {} rows, the tree has {} '
                    'nodes.'.format(t, rows, tree.n_nodes(t)))
        return self

    def restrict(self, start, stop):
        return AdaptedField(self.levels[start - self.start:stop - self.start + 1],
                            start=start, measurability=self.measurability)

    def map(self, func):
        """Apply func(level_array, t) to every level."""
        levels = [func(v, self.start + i) for i, v in enumerate(self.levels)]
        kind = self.measurability
        if any(np.shape(v)[0] != 1 for v in levels):
            kind = self.ADAPTED
        return AdaptedField(levels, start=self.start, measurability=kind)

    def _combine(self, other, op):
        if self.start != other.start or self.stop != other.stop:
            raise ShapeError('Fields cover levels {}..{} and {}..{}.'.format(
                self.start, self.stop, other.start, other.stop))
        levels = [op(a, b) for a, b in zip(self.levels, other.levels)]
        kinds = (self.measurability, other.measurability)
        if self.ADAPTED in kinds or any(v.shape[0] != 1 for v in levels):
            kind = self.ADAPTED
        elif self.F0 in kinds:
            kind = self.F0
        else:
            kind = self.DETERMINISTIC
        return AdaptedField(levels, start=self.start, measurability=kind)

    def __add__(self, other):
        return self._combine(other, np.add)

    def __sub__(self, other):
        return self._combine(other, np.subtract)

    def __mul__(self, alpha):
        return AdaptedField([alpha * v for v in self.levels], start=self.start,
                            measurability=self.measurability)

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    @classmethod
    def zeros(cls, tree, n_points, start=0, stop=None, batch_shape=(),
              deterministic=True):
        stop = tree.depth if stop is None else stop
        if deterministic:
            levels = [np.zeros((1, n_points) + tuple(batch_shape))
                      for _ in range(start, stop + 1)]
            return cls(levels, start=start, measurability=cls.DETERMINISTIC)
        levels = [np.zeros((tree.n_nodes(t), n_points) + tuple(batch_shape))
                  for t in range(start, stop + 1)]
        return cls(levels, start=start)

    @classmethod
    def deterministic(cls, profiles, start=0):
        """
        Field that is the same at every node.

        Parameters
        ----------
        profiles: array-like
            Shape (n_levels, J): one spatial profile per level.
        """
        profiles = np.asarray(profiles, dtype=float)
        return cls([p[None] for p in profiles], start=start,
                   measurability=cls.DETERMINISTIC)

    @classmethod
    def terminal(cls, values, level, tree=None):
        """
        Single-level field, e.g. terminal data at level s.

        `values` of shape (J,) is broadcast to every node; shape (rows, J)
        must match the node count of the level.
        """
        values = np.asarray(values, dtype=float)
        if values.ndim == 1:
            return cls([values[None]], start=level,
                       measurability=cls.F0 if level == 0 else cls.DETERMINISTIC)
        field_ = cls([values], start=level)
        if tree is not None:
            field_.validate(tree)
        return field_

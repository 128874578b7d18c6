import numpy as np
import pytest

from nlbspde.scenario_tree import AdaptedField, build_tree
from nlbspde.spatial_disc import Grid, constant_profile, smooth_profile


def random_adapted(tree, J, seed, start=0, stop=None):
    """Field with independent normal values at every (level, node)."""
    stop = tree.depth if stop is None else stop
    rng = np.random.default_rng(seed)
    return AdaptedField([rng.standard_normal((tree.n_nodes(t), J))
                         for t in range(start, stop + 1)], start=start)


@pytest.fixture
def unit_grid():
    return Grid(0.0, 1.0, 16)


@pytest.fixture
def tree_m4():
    return build_tree(4, 1, 1.0)


@pytest.fixture
def heat_profile():
    return constant_profile(1.0, 0.0, 0.0, beta=[0.0], beta_bar=[0.0])


@pytest.fixture
def coupled_profile():
    return smooth_profile(0.0, 1.0, 1.0, 0.5, b1=0.2, f0=0.3, f1=0.2,
                          lam0=1.0, lam1=0.5, beta=[0.3], beta_bar=[0.4])


@pytest.fixture
def coupled(tree_m4, unit_grid, coupled_profile):
    """(tree, grid, coefficients) of a smooth problem with coupling."""
    return tree_m4, unit_grid, coupled_profile.sample(tree_m4, unit_grid)

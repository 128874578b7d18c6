"""
Experiment configuration.

A configuration is YAML text with the sections of ExperimentConfig. Physical
parameters (discretization, coefficients, boundary payload) have no default;
tolerances, budgets, seeds and output settings do. An `overrides` section maps
a command name to section values deep-merged over the base configuration when
that command runs, so one file can drive every check.
"""

import copy
import logging
from dataclasses import dataclass

import numpy as np
import yaml

from nlbspde.errors import ConfigError
from nlbspde.control import SUBCOMMANDS
from nlbspde.nonlocal_solver import (F0, FT, Mixed, PointTimes,
                                     ScaledInitial, TimeKernel)
from nlbspde.scenario_tree import DEFAULT_NODE_BUDGET, AdaptedField, build_tree
from nlbspde.spatial_disc import (DIVERGENCE, NONDIVERGENCE, Grid,
                                  constant_profile, smooth_profile)
from nlbspde.mc_diffusion import StartLaw
from nlbspde.util import config_hash

logger = logging.getLogger(__name__)

SECTIONS = ('experiment', 'discretization', 'coefficients', 'boundary',
            'source', 'solver', 'monte_carlo', 'sweep', 'convergence',
            'checks', 'output', 'overrides')

DEFAULTS = {
    'experiment': {'id': 'experiment', 'seed': 0},
    'discretization': {'collapsed': False, 'node_budget': DEFAULT_NODE_BUDGET},
    'source': {'preset': 'zero', 'amplitude': 1.0, 'modes': 4},
    'solver': {'method': 'direct', 'tol': 1e-13, 'max_iter': 10000,
               'condition_threshold': 1e12, 'q_budget': 4096, 'threads': 1},
    'monte_carlo': {'n_paths': 100000, 'dt_mc': 1e-3, 'bridge': True,
                    'block_size': 16384, 'exit_paths': None,
                    'exit_horizon': None, 'start': None, 'q': 2.0},
    'sweep': {'eps_min': -0.5, 'eps_max': 0.5, 'n': 21, 'flag_tol': 1e-6,
              'engineered_eigenvalue': 0.8},
    'convergence': {'time_levels': [16, 32, 64], 'space_points': [15, 31, 63],
                    'fixed_M': 64, 'fixed_J': 63, 'analytic_J': 64,
                    'analytic_M': 64, 'mode': 1},
    'checks': {'instances': 20, 'pairs': 50, 'alpha': 3.0,
               'path_residual': 1e-10, 'boundary_residual': 1e-9,
               'neumann_agreement': 1e-8, 'neumann_radius': 0.9,
               'iteration_factor': 2.0, 'duality': 1e-10, 'mass': 1e-6,
               'spot_check': 1e-12, 'linearity': 1e-12, 'nu2': 1e-4,
               'order_time': 0.9, 'order_space': 1.8, 'analytic': 2e-2,
               'mc_rel': 0.02, 'mc_se': 3.0, 'spectral_tol': 1e-8,
               'mass_condition': 'i',
               'nu2_cases': [
                   {'q': 2.0, 'nu': 0.5, 'S': 0.2, 'nu2': 0.5525,
                    'satisfiable': True},
                   {'q': 2.0, 'nu': 0.5, 'S': 2.0, 'satisfiable': False}]},
    'output': {'dir': '.', 'format': 'csv'},
    'overrides': {},
}

REQUIRED = {
    'discretization': ('M', 'N', 'J', 'T', 'x_min', 'x_max'),
    'coefficients': ('preset',),
    'boundary': ('variant',),
}

POSITIVE_TOLERANCES = ('path_residual', 'boundary_residual',
                       'neumann_agreement', 'duality', 'mass', 'spot_check',
                       'linearity', 'nu2', 'analytic', 'mc_rel', 'mc_se',
                       'spectral_tol')


def deep_merge(base, update):
    """Recursive dict merge; values of `update` win."""
    out = copy.deepcopy(base)
    for key, value in (update or {}).items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _line_of(node, path):
    """1-based line of the YAML node at a dotted path, or None."""
    for key in path:
        if not isinstance(node, yaml.MappingNode):
            return None
        for k, v in node.value:
            if k.value == key:
                node = v
                break
        else:
            return None
    return node.start_mark.line + 1


def load_config(path):
    """
    Read and validate a configuration file.

    Parameters
    ----------
    path: string
        YAML file.

    Returns
    -------
    ExperimentConfig
    """
    with open(path) as f:
        text = f.read()
    return parse_config(text)


def parse_config(text):
    """Parse YAML text into a validated ExperimentConfig."""
    try:
        raw = yaml.safe_load(text)
        node = yaml.compose(text)
    except yaml.YAMLError as err:
        mark = getattr(err, 'problem_mark', None)
        raise ConfigError(str(getattr(err, 'problem', err)),
                          line=mark.line + 1 if mark else None)
    if not isinstance(raw, dict):
        raise ConfigError('The configuration must be a mapping of sections.')
    return ExperimentConfig.from_dict(raw, node=node)


@dataclass
class ExperimentConfig:
    """Validated configuration as plain data plus builders."""
    data: dict

    @classmethod
    def from_dict(cls, raw, node=None):
        def fail(message, *path):
            raise ConfigError(message, field='.'.join(path),
                              line=_line_of(node, path) if node else None)

        for section in raw:
            if section not in SECTIONS:
                fail('unknown section', section)
        for section in SECTIONS:
            if raw.get(section) is not None and \
                    not isinstance(raw[section], dict):
                fail('must be a mapping', section)
        for command in (raw.get('overrides') or {}):
            if command not in SUBCOMMANDS:
                fail('unknown command', 'overrides', command)
        data = deep_merge(DEFAULTS, {k: v for k, v in raw.items()
                                     if v is not None})
        _validate(data, fail)
        return cls(data)

    def for_command(self, command):
        """Configuration with the overrides of `command` applied."""
        update = self.data['overrides'].get(command)
        if not update:
            return self
        merged = deep_merge(self.data, update)
        merged['overrides'] = {}
        return ExperimentConfig.from_dict(merged)

    def section(self, name):
        return self.data[name]

    @property
    def experiment_id(self):
        return str(self.data['experiment']['id'])

    @property
    def seed(self):
        return int(self.data['experiment']['seed'])

    @property
    def hash(self):
        return config_hash(self.data)

    def with_seed(self, seed):
        data = copy.deepcopy(self.data)
        data['experiment']['seed'] = int(seed)
        return ExperimentConfig(data)

    def build_tree(self, **changes):
        d = dict(self.data['discretization'], **changes)
        return build_tree(d['M'], d['N'], d['T'],
                          node_budget=d['node_budget'],
                          collapsed=d['collapsed'])

    def build_grid(self, J=None):
        d = self.data['discretization']
        return Grid(float(d['x_min']), float(d['x_max']),
                    int(J or d['J']))

    def build_profile(self):
        return _profile(self.data['coefficients'], self.data['discretization'])

    def build_coefficients(self, tree, grid):
        coeffs = self.build_profile().sample(tree, grid)
        return coeffs.validate(tree, grid)

    def build_condition(self, spec=None):
        return _condition(spec or self.data['boundary'])

    def build_xi(self, grid, seed=None):
        return _profile_data(self.data['boundary'].get('xi') or
                             {'preset': 'zero'}, grid, seed)

    def build_source(self, tree, grid, seed=None):
        return random_source(tree, grid, self.data['source'], seed)

    def start_law(self, grid):
        start = self.data['monte_carlo'].get('start') or {'kind': 'uniform'}
        if start['kind'] == 'grid':
            return StartLaw('grid', self.grid_density(grid, start), grid)
        return StartLaw(start['kind'], start.get('value'))

    def grid_density(self, grid, start=None):
        """Grid density matching the Monte Carlo start law, unit mass."""
        start = start or self.data['monte_carlo'].get('start') or \
            {'kind': 'uniform'}
        if start['kind'] == 'point':
            rho = np.zeros(grid.J)
            rho[int(np.argmin(np.abs(grid.x - float(start['value']))))] = \
                1.0 / grid.h
            return rho
        if start['kind'] == 'uniform':
            return np.full(grid.J, 1.0 / grid.length)
        density = np.asarray(start['value'], dtype=float)
        if density.shape != (grid.J,):
            raise ConfigError('start density needs {} values'.format(grid.J),
                              field='monte_carlo.start.value')
        return density / grid.integral(density)


def _validate(data, fail):
    for section, keys in REQUIRED.items():
        if not isinstance(data.get(section), dict):
            fail('required', section)
        for key in keys:
            if data[section].get(key) is None:
                fail('required', section, key)
    d = data['discretization']
    for key in ('M', 'N', 'J'):
        if not isinstance(d[key], int) or d[key] < 1:
            fail('must be a positive integer', 'discretization', key)
    if d['J'] < 3:
        fail('must be at least 3', 'discretization', 'J')
    if not d['N'] <= 3:
        fail('at most 3 Brownian components', 'discretization', 'N')
    for key in ('T', 'x_min', 'x_max'):
        if not isinstance(d[key], (int, float)):
            fail('must be a number', 'discretization', key)
    if not d['T'] > 0:
        fail('must be positive', 'discretization', 'T')
    if not d['x_max'] > d['x_min']:
        fail('must exceed x_min', 'discretization', 'x_max')
    if not d['collapsed'] and (2 ** d['N']) ** d['M'] > d['node_budget']:
        fail('tree with {} leaves exceeds node_budget {}'.format(
            (2 ** d['N']) ** d['M'], d['node_budget']), 'discretization', 'M')

    c = data['coefficients']
    _validate_coefficients(c, d, fail, ('coefficients',))

    b = data['boundary']
    _validate_boundary(b, fail, ('boundary',))

    if data['source']['preset'] not in ('zero', 'random', 'mode'):
        fail('unknown preset', 'source', 'preset')
    if data['solver']['method'] not in ('direct', 'neumann'):
        fail('must be direct or neumann', 'solver', 'method')
    for key in ('tol', 'condition_threshold'):
        if not data['solver'][key] > 0:
            fail('must be positive', 'solver', key)
    for key in POSITIVE_TOLERANCES:
        if not data['checks'][key] > 0:
            fail('tolerances must be positive', 'checks', key)
    if data['checks']['mass_condition'] not in ('i', 'ii'):
        fail('must be i or ii', 'checks', 'mass_condition')
    if data['checks']['mass_condition'] == 'ii':
        if b['variant'] != 'scaled_initial':
            fail('condition ii needs a scaled_initial boundary', 'checks',
                 'mass_condition')
        kappa = b.get('kappa', 0.0) * b.get('scale', 1.0)
        if not 0.0 < abs(kappa) < 1.0:
            fail('condition ii needs 0 < |kappa * scale| < 1', 'checks',
                 'mass_condition')
    mc = data['monte_carlo']
    if not mc['dt_mc'] > 0 or not mc['n_paths'] >= 2:
        fail('needs dt_mc > 0 and n_paths >= 2', 'monte_carlo')
    start = mc.get('start')
    if start is not None:
        if not isinstance(start, dict):
            fail('must be a mapping', 'monte_carlo', 'start')
        if start.get('kind') not in ('point', 'uniform', 'grid'):
            fail('must be point, uniform or grid', 'monte_carlo', 'start',
                 'kind')
        if start['kind'] in ('point', 'grid') and start.get('value') is None:
            fail('required', 'monte_carlo', 'start', 'value')
    if data['output']['format'] not in ('csv', 'json'):
        fail('must be csv or json', 'output', 'format')
    s = data['sweep']
    if not s['n'] >= 1 or not s['eps_max'] >= s['eps_min'] > -1.0:
        fail('needs n >= 1 and -1 < eps_min <= eps_max', 'sweep')


def _validate_coefficients(c, d, fail, path):
    preset = c['preset']
    if preset not in ('constant', 'smooth', 'node_random'):
        fail('unknown preset', *path, 'preset')
    if c.get('form', NONDIVERGENCE) not in (DIVERGENCE, NONDIVERGENCE):
        fail('must be divergence or nondivergence', *path, 'form')
    if preset == 'node_random':
        if not isinstance(c.get('base'), dict):
            fail('required', *path, 'base')
        if c['base'].get('preset') == 'node_random':
            fail('cannot nest node_random', *path, 'base', 'preset')
        if not 0.0 < float(c.get('amplitude', 0.0)) < 1.0:
            fail('must lie in (0, 1)', *path, 'amplitude')
        if d.get('collapsed'):
            fail('node_random needs a full tree', 'discretization',
                 'collapsed')
        return _validate_coefficients(c['base'], d, fail, path + ('base',))
    params = c.get('params')
    if not isinstance(params, dict):
        fail('required', *path, 'params')
    keys = ('b', 'drift', 'lam') if preset == 'constant' else ('b0',)
    for key in keys:
        if params.get(key) is None:
            fail('required', *path, 'params', key)
    for key in ('beta', 'beta_bar'):
        values = params.get(key, [0.0] * d['N'])
        if not isinstance(values, list) or len(values) != d['N']:
            fail('needs one value per Brownian component', *path, 'params',
                 key)


def _validate_boundary(b, fail, path):
    variant = b['variant']
    if variant not in ('scaled_initial', 'point_times', 'time_kernel',
                       'mixed'):
        fail('unknown variant', *path, 'variant')
    if b.get('target', F0) not in (F0, FT):
        fail('must be F0 or FT', *path, 'target')
    if variant == 'scaled_initial' and b.get('kappa') is None:
        fail('required', *path, 'kappa')
    if variant == 'point_times' and not b.get('points'):
        fail('required', *path, 'points')
    if variant == 'time_kernel' and b.get('k0') is None:
        fail('required', *path, 'k0')
    if variant == 'mixed':
        parts = b.get('parts')
        if not parts:
            fail('required', *path, 'parts')
        for i, part in enumerate(parts):
            if 'variant' not in part:
                fail('required', *path, 'parts', str(i), 'variant')
            _validate_boundary(dict(part, target=b.get('target', F0)), fail,
                               path + ('parts', str(i)))
    xi = b.get('xi')
    if xi is not None and xi.get('preset') not in ('zero', 'mode', 'random'):
        fail('unknown preset', *path, 'xi', 'preset')


def _profile(c, d):
    form = c.get('form', NONDIVERGENCE)
    if c['preset'] == 'node_random':
        profile = _profile(dict(c['base'], form=form), d)
        profile.node_amplitude = float(c['amplitude'])
        profile.node_seed = int(c.get('seed', 0))
        return profile
    p = c['params']
    beta = p.get('beta', [0.0] * d['N'])
    beta_bar = p.get('beta_bar', [0.0] * d['N'])
    if c['preset'] == 'constant':
        return constant_profile(p['b'], p['drift'], p['lam'], beta, beta_bar,
                                form=form)
    return smooth_profile(d['x_min'], d['x_max'], d['T'], p['b0'],
                          b1=p.get('b1', 0.0), f0=p.get('f0', 0.0),
                          f1=p.get('f1', 0.0), lam0=p.get('lam0', 0.0),
                          lam1=p.get('lam1', 0.0), beta=beta,
                          beta_bar=beta_bar, form=form)


def _weight(k):
    return np.asarray(k, dtype=float) if isinstance(k, list) else float(k)


def _condition(b, target=None):
    target = target or b.get('target', F0)
    scale = float(b.get('scale', 1.0))
    variant = b['variant']
    if variant == 'scaled_initial':
        return ScaledInitial(target=target, scale=scale,
                             kappa=float(b['kappa']))
    if variant == 'point_times':
        return PointTimes(target=target, scale=scale,
                          points=[(float(t), _weight(k))
                                  for t, k in b['points']])
    if variant == 'time_kernel':
        k0 = b['k0']
        if isinstance(k0, (int, float)):
            value = float(k0)
            k0 = (lambda v: lambda t: v)(value)
        else:
            k0 = [_weight(k) for k in k0]
        return TimeKernel(target=target, scale=scale, k0=k0)
    return Mixed(target=target, scale=scale,
                 parts=[_condition(part, target) for part in b['parts']])


def _smooth_random(rng, rows, grid, modes, amplitude):
    coef = rng.standard_normal((rows, modes)) / np.arange(1, modes + 1)
    basis = np.stack([grid.mode(k) for k in range(1, modes + 1)])
    return amplitude * coef @ basis


def _profile_data(spec, grid, seed=None):
    preset = spec.get('preset', 'zero')
    amplitude = float(spec.get('amplitude', 1.0))
    if preset == 'zero':
        return np.zeros(grid.J)
    if preset == 'mode':
        return amplitude * grid.mode(int(spec.get('k', 1)))
    seed = spec.get('seed', 0) if seed is None else seed
    rng = np.random.default_rng(seed)
    return _smooth_random(rng, 1, grid, int(spec.get('modes', 4)),
                          amplitude)[0]


def random_source(tree, grid, spec, seed=None, stop=None):
    """
    Source field of a preset.

    'zero' gives None, 'mode' a deterministic sin profile and 'random' a
    smooth adapted field: at each (level, node) a combination of the first
    `modes` sine modes with independent normal coefficients, drawn from a
    generator seeded by (seed, level).
    """
    preset = spec.get('preset', 'zero')
    stop = tree.depth - 1 if stop is None else stop
    if preset == 'zero':
        return None
    amplitude = float(spec.get('amplitude', 1.0))
    if preset == 'mode':
        profile = amplitude * grid.mode(int(spec.get('k', 1)))
        return AdaptedField.deterministic(np.tile(profile, (stop + 1, 1)))
    seed = spec.get('seed', 0) if seed is None else seed
    levels = []
    for t in range(stop + 1):
        rng = np.random.default_rng([int(seed), t])
        levels.append(_smooth_random(rng, tree.n_nodes(t), grid,
                                     int(spec.get('modes', 4)), amplitude))
    return AdaptedField(levels)


def random_terminal(tree, grid, seed, modes=4, amplitude=1.0, level=None):
    """Smooth random data with one profile per node of `level`."""
    level = tree.depth if level is None else level
    rng = np.random.default_rng(seed)
    return _smooth_random(rng, tree.n_nodes(level), grid, modes, amplitude)

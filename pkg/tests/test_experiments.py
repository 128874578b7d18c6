import os

import pytest

from nlbspde.config import load_config, parse_config
from nlbspde.errors import ConfigError
from nlbspde.experiments import CHECK_ALL, derive_seed, run
from nlbspde.util import PATH_RECORD_FIELDS, RESULT_COLUMNS, read_path_dump

SMALL = """
experiment: {id: small, seed: 3}
discretization: {M: 4, N: 1, J: 8, T: 1.0, x_min: 0.0, x_max: 1.0}
coefficients:
  preset: smooth
  params: {b0: 0.5, b1: 0.2, f0: 0.3, lam0: 1.0, lam1: 0.5,
           beta: [0.3], beta_bar: [0.4]}
boundary:
  variant: scaled_initial
  kappa: 0.5
  xi: {preset: random}
source: {preset: random}
checks: {instances: 3, pairs: 5}
overrides:
  duality:
    coefficients:
      preset: node_random
      amplitude: 0.3
      seed: 5
      base:
        preset: smooth
        params: {b0: 0.5, b1: 0.2, f0: 0.3, lam0: 1.0,
                 beta: [0.3], beta_bar: [0.4]}
  periodic:
    coefficients:
      preset: constant
      params: {b: 0.5, drift: 0.0, lam: 2.0, beta: [0.0], beta_bar: [0.0]}
    boundary: {kappa: 1.0}
  convergence:
    discretization: {T: 0.1, collapsed: true}
    coefficients:
      preset: constant
      params: {b: 0.5, drift: 0.0, lam: 0.0, beta: [0.0], beta_bar: [0.0]}
    convergence:
      time_levels: [8, 16, 32]
      space_points: [7, 15, 31]
      fixed_M: 16
      fixed_J: 15
      analytic_M: 32
      analytic_J: 31
  mc-verify:
    discretization: {M: 64, J: 31, T: 0.1, collapsed: true}
    coefficients:
      preset: constant
      params: {b: 0.5, drift: 0.0, lam: 1.0, beta: [0.0], beta_bar: [0.5]}
    boundary: {kappa: 1.0}
    monte_carlo:
      n_paths: 20000
      start: {kind: point, value: 0.5}
"""

DEFAULT_CONFIG = os.path.join(os.path.dirname(__file__), '..', 'configs',
                              'default.yaml')


@pytest.fixture
def small():
    return parse_config(SMALL)


def _checks(record):
    return {c.name: c for c in record.checks}


class TestCommands:
    def test_solve(self, small):
        record, = run(small, 'solve')
        checks = _checks(record)
        assert list(checks) == ['coercivity_delta', 'path_residual',
                                'boundary_residual', 'linearity',
                                'estimate_constant']
        assert record.passed
        assert checks['estimate_constant'].value > 0.0
        assert record.config_hash == small.hash

    def test_spectrum(self, small):
        record, = run(small, 'spectrum')
        checks = _checks(record)
        assert {'q_spot_check', 'distance_to_one', 'radius_bound',
                'neumann_agreement', 'neumann_iterations'} <= set(checks)
        assert record.passed
        assert checks['radius_bound'].value < 0.5

    def test_duality(self, small):
        record, = run(small, 'duality')
        gap = _checks(record)['duality_gap']
        assert gap.passed
        assert gap.detail['random_coefficients']
        assert gap.detail['pairs'] == 5

    def test_duality_needs_initial_target(self):
        cfg = parse_config(SMALL.replace('kappa: 0.5',
                                         'kappa: 0.5\n  target: FT'))
        with pytest.raises(ConfigError):
            run(cfg, 'duality')

    def test_periodic(self, small):
        record, = run(small, 'periodic')
        checks = _checks(record)
        assert {'periodic_residual', 'path_residual', 'mass_contraction',
                'fixed_point_exclusion'} <= set(checks)
        assert record.passed
        assert checks['mass_contraction'].detail['condition'] == 'i'

    def test_sweep_eps(self, small):
        record, = run(small, 'sweep-eps')
        checks = _checks(record)
        assert record.passed
        assert checks['sweep_contraction'].value == 21.0
        assert checks['sweep_engineered_flags'].value == 1.0
        flagged, = checks['sweep_engineered_flags'].detail['flagged_eps']
        assert flagged == pytest.approx(0.25)

    def test_convergence(self, small):
        record, = run(small, 'convergence')
        checks = _checks(record)
        assert record.passed
        assert checks['temporal_order'].value == pytest.approx(1.0, abs=0.1)
        assert checks['spatial_order'].value == pytest.approx(2.0, abs=0.1)
        assert 'analytic_error' in checks

    def test_convergence_needs_nested_grids(self, small):
        cfg = parse_config(SMALL.replace('space_points: [7, 15, 31]',
                                         'space_points: [7, 14, 28]'))
        with pytest.raises(ConfigError) as err:
            run(cfg, 'convergence')
        assert err.value.field == 'convergence.space_points'

    def test_convergence_needs_deterministic_coefficients(self, small):
        with pytest.raises(ConfigError):
            run(small.for_command('duality'), 'convergence')

    def test_mc_verify(self, small, tmp_path):
        record, = run(small, 'mc-verify', threads=2, dump_dir=str(tmp_path))
        checks = _checks(record)
        assert {'exit_survival', 'gamma_martingale_mean', 'nu2_case_1',
                'nu2_case_2', 'feynman_kac_mc_tree',
                'feynman_kac_tree_oracle',
                'feynman_kac_mc_oracle'} <= set(checks)
        assert checks['nu2_case_1'].passed
        assert checks['nu2_case_2'].passed
        assert checks['feynman_kac_tree_oracle'].passed

        path = str(tmp_path / 'small_paths.bin')
        assert record.outputs == [path]
        records, dt_mc, horizon = read_path_dump(path)
        assert records.shape == (20000, len(PATH_RECORD_FIELDS))
        assert dt_mc == 1e-3
        assert horizon == pytest.approx(0.1)

    def test_unknown_command(self, small):
        with pytest.raises(ValueError):
            run(small, 'plot')


class TestRecords:
    def test_rows(self, small):
        record, = run(small, 'duality')
        rows = record.records('2026-01-01T00:00:00')
        assert len(rows) == 1
        assert set(rows[0]) == set(RESULT_COLUMNS)
        assert rows[0]['experiment_id'] == 'small'
        assert rows[0]['passed'] is True

    def test_repeatable(self, small):
        one, = run(small, 'solve')
        two, = run(small, 'solve', threads=2)
        assert [c.value for c in one.checks] == [c.value for c in two.checks]

    def test_derive_seed(self):
        assert derive_seed(3, 1, 0) == derive_seed(3, 1, 0)
        assert derive_seed(3, 1, 0) != derive_seed(3, 1, 1)
        assert derive_seed(3, 1) != derive_seed(4, 1)


@pytest.mark.slow
def test_default_configuration_passes(tmp_path):
    records = run(load_config(DEFAULT_CONFIG), 'check-all', threads=4,
                  dump_dir=str(tmp_path))
    assert [r.command for r in records] == list(CHECK_ALL)
    failed = [(r.command, c.name) for r in records for c in r.checks
              if not c.passed]
    assert failed == []

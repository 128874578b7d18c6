#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
    Run the checks of a non-local backward SPDE experiment.\n

    The configuration (YAML) fixes the discretization, the coefficients, the
    non-local condition and the tolerances of every check. Each command runs
    one family of checks:\n

    - solve: formula round trip and linear estimate
    - spectrum: spectrum of Q, spot check, Neumann series against LU
    - duality: backward against forward pairing
    - mc-verify: exit bound, nu2 and Feynman-Kac cross-check
    - sweep-eps: solvability of the (1 + eps) perturbed problem
    - periodic: periodic-type problem and mass contraction
    - convergence: self-convergence and analytic error of the scheme
    - check-all: every command above\n

    One result file <id>_<command>.csv (or .json) is written to the output
    directory. The exit status is 0 when every check passes and 1 otherwise;
    configuration errors exit with 2 and write nothing.\n

    Examples:
    ---------

    >>> nlbspde_run.py check-all --config configs/default.yaml --out results

    >>> nlbspde_run.py mc-verify --config configs/default.yaml --seed 3
        --threads 4 --format json --dump-paths
"""

import argparse
import json
import logging
import os
import sys
from datetime import datetime, timezone

from nlbspde.config import load_config
from nlbspde.control import (add_command_arg,
                             add_config_arg,
                             add_dump_paths_arg,
                             add_format_arg,
                             add_output_dir_arg,
                             add_overwrite_arg,
                             add_seed_arg,
                             add_threads_arg,
                             add_verbose_arg,
                             check_file_exists,
                             check_input_file,
                             configure_logging)
from nlbspde.errors import ConfigError, NlbspdeError
from nlbspde.experiments import run
from nlbspde.util import write_results
from nlbspde.version import __version__

EPILOG = """
Results columns: timestamp, experiment_id, command, config_hash, check,
value, tolerance, passed, detail.
"""


def _build_arg_parser():
    p = argparse.ArgumentParser(formatter_class=argparse.RawTextHelpFormatter,
                                epilog=EPILOG, description=__doc__)
    add_command_arg(p)
    add_config_arg(p)
    add_output_dir_arg(p)
    add_seed_arg(p)
    add_threads_arg(p)
    add_format_arg(p)
    add_dump_paths_arg(p)
    add_overwrite_arg(p)
    add_verbose_arg(p)
    return p


def main():
    parser = _build_arg_parser()
    args = parser.parse_args()
    configure_logging(args.verbose)
    logger = logging.getLogger('nlbspde_run')

    check_input_file(parser, args.config)
    try:
        config = load_config(args.config)
    except ConfigError as err:
        parser.error('{}: {}'.format(args.config, err))
    if args.seed is not None:
        config = config.with_seed(args.seed)
    if args.threads is not None and args.threads < 1:
        parser.error('--threads must be at least 1.')

    out_dir = args.out or config.section('output')['dir']
    fmt = args.fmt or config.section('output')['format']
    result_file = os.path.join(out_dir, '{}_{}.{}'.format(
        config.experiment_id, args.command, fmt))
    check_file_exists(parser, args, result_file)
    os.makedirs(out_dir, exist_ok=True)

    timestamp = datetime.now(timezone.utc).strftime('%Y-%m-%dT%H:%M:%SZ')
    try:
        records = run(config, args.command, threads=args.threads,
                      dump_dir=out_dir if args.dump_paths else None)
    except ConfigError as err:
        parser.error('{}: {}'.format(args.config, err))
    except NlbspdeError as err:
        logger.error('%s failed: %s', args.command, err)
        sys.exit(1)

    rows = [row for record in records for row in record.records(timestamp)]
    meta = {'version': __version__, 'config': os.path.abspath(args.config),
            'config_hash': config.hash, 'timestamp': timestamp,
            'wall_time': {r.command: r.wall_time for r in records},
            'outputs': [p for r in records for p in r.outputs]}
    write_results(rows, result_file, fmt=fmt, meta=meta)

    failed = [(r.command, c.name) for r in records for c in r.checks
              if not c.passed]
    summary = {'checks': len(rows), 'failed': len(failed),
               'results': result_file}
    print(json.dumps(summary, sort_keys=True))
    if failed:
        for command, name in failed:
            logger.error('Check failed: %s %s', command, name)
        sys.exit(1)


if __name__ == "__main__":
    main()

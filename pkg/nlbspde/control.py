import logging
import os

SUBCOMMANDS = ('solve', 'spectrum', 'duality', 'mc-verify', 'sweep-eps',
               'periodic', 'convergence', 'check-all')


def add_command_arg(parser):
    parser.add_argument('command', choices=SUBCOMMANDS,
                        help='Experiment to run. check-all runs every '
                             'check in sequence.')


def add_config_arg(parser):
    parser.add_argument('--config', required=True,
                        help='Path to the experiment configuration (.yaml).')


def add_overwrite_arg(parser):
    parser.add_argument(
        '-f', dest='overwrite', action='store_true',
        help='Force overwriting of the output files.')


def add_output_dir_arg(parser):
    parser.add_argument('--out', default=None,
                        help='Path of the output directory. Defaults to '
                             'output.dir of the configuration, or . '
                             'when absent.\n'
                             'The directory is created if it does not '
                             'exist.')


def add_seed_arg(parser):
    parser.add_argument('--seed', type=int, default=None,
                        help='Replace experiment.seed, from which the '
                             'random draws of a run derive. '
                             'coefficients.seed of node_random is kept.')


def add_threads_arg(parser):
    parser.add_argument('--threads', type=int, default=None,
                        help='Maximum number of worker threads. Results do '
                             'not depend on this value.')


def add_format_arg(parser):
    parser.add_argument('--format', dest='fmt', choices=['csv', 'json'],
                        default=None,
                        help='Result file format [csv].')


def add_dump_paths_arg(parser):
    parser.add_argument('--dump-paths', action='store_true',
                        help='Also write the raw Monte Carlo path records '
                             '(binary) of mc-verify.')


def add_verbose_arg(parser):
    parser.add_argument('-v', dest='verbose', action='count', default=0,
                        help='Log INFO messages; repeat for DEBUG.')


def configure_logging(verbose):
    """
    Configure the root logger from the count of -v flags.

    Parameters
    ----------
    verbose: int
        0 for WARNING, 1 for INFO, 2 or more for DEBUG.
    """
    level = {0: logging.WARNING, 1: logging.INFO}.get(verbose, logging.DEBUG)
    logging.basicConfig(level=level,
                        format='%(asctime)s %(levelname)s %(name)s: '
                               '%(message)s')


def check_file_exists(parser, args, path):
    """
    Verify that output does not exist or that if it exists, -f should be used.
    If not used, print parser's usage and exit.

    Parameters
    ----------
    parser: argparse.ArgumentParser object
        Parser.
    args: argparse namespace
        Argument list.
    path: string or path to file
        Required path to be checked.
    """
    if os.path.isfile(path) and not args.overwrite:
        parser.error('Output file {} exists. Use -f to force '
                     'overwriting'.format(path))

    path_dir = os.path.dirname(path)
    if path_dir and os.path.exists(path_dir) and not os.path.isdir(path_dir):
        parser.error('{} exists and is not a directory.'.format(path_dir))


def check_input_file(parser, path):
    """
    Assert that all inputs exist. If not, print parser's usage and exit.

    Parameters
    ----------
    parser: argparse.ArgumentParser object
        Parser.
    path: string or path to file
        Required path to be checked.
    """
    if not os.path.isfile(path):
        parser.error('Input file {} does not exist'.format(path))

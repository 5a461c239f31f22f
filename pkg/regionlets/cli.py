"""Command line interface: ``regionlets <subcommand> ...``

Exit codes: 0 success, 1 failed gradient check or ablation ordering,
2 invalid configuration, 3 non-finite values during training.
"""
import argparse
import logging
import sys

from . import __version__, commands
from .bench import export_dataset, train_val_split
from .conf import (ConfigKeyError, ConfigValueError, ExperimentConfig,
                   runtime_config)
from .core import NonFiniteError
from .gradcheck import CHECKS


logger = logging.getLogger(__name__)


EXIT_FAILED_CHECK = 1
EXIT_CONFIG = 2
EXIT_NON_FINITE = 3


def _train(args):
    commands.cmd_train(args.config, args.output_dir)
    return 0


def _eval(args):
    report = commands.cmd_eval(args.checkpoint, args.dataset_seed,
                               args.config)
    print('mAP@0.5 {:.4f}\nmAP@0.7 {:.4f}\nmmAP@[.5:.95] {:.4f}'.format(
        report['map_50'], report['map_70'], report['mmap']))
    return 0


def _ablate(args):
    summary = commands.cmd_ablate(args.config, args.output_dir, args.seeds)
    for name, value in summary['means'].items():
        print('{:<12} {:.4f}'.format(name, value))
    print('ordering', 'ok' if summary['ordering_ok'] else 'VIOLATED')
    return 0 if summary['ordering_ok'] else EXIT_FAILED_CHECK


def _sweep(args):
    commands.cmd_sweep(args.config, args.output_dir)
    return 0


def _gradcheck(args):
    results = commands.cmd_gradcheck(args.module, args.seeds, args.tol,
                                     args.corrupt, args.csv)
    return 0 if all(r['passed'] for r in results) else EXIT_FAILED_CHECK


def _demo_warp(args):
    commands.cmd_demo_warp(args.image, args.theta, args.height, args.width,
                           args.output, args.roi)
    return 0


def _regions(args):
    commands.cmd_regions(args.checkpoint, args.output, args.index,
                         args.proposal, args.dataset_seed)
    return 0


def _export(args):
    cfg = ExperimentConfig.load(args.config)
    train, val = train_val_split(cfg.bench)
    export_dataset(val if args.split == 'val' else train, args.directory,
                   cfg.bench.classes)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog='regionlets',
        description='Deep regionlet detection head on a synthetic benchmark')
    parser.add_argument('--version', action='version',
                        version='%(prog)s ' + __version__)
    parser.add_argument('-v', '--verbose', action='store_true',
                        help='log at DEBUG level')
    sub = parser.add_subparsers(dest='command', metavar='command')
    sub.required = True

    p = sub.add_parser('train', help='train on the synthetic benchmark')
    p.add_argument('config')
    p.add_argument('--output-dir')
    p.set_defaults(func=_train)

    p = sub.add_parser('eval', help='mAP of a checkpoint on validation data')
    p.add_argument('checkpoint')
    p.add_argument('--dataset-seed', type=int)
    p.add_argument('--config', help='defaults to experiment.cfg beside the '
                   'checkpoint')
    p.set_defaults(func=_eval)

    p = sub.add_parser('ablate', help='global / offset-only / non-gating / '
                       'full comparison')
    p.add_argument('config')
    p.add_argument('--output-dir')
    p.add_argument('--seeds', type=int, nargs='+', default=[0, 1, 2])
    p.set_defaults(func=_ablate)

    p = sub.add_parser('sweep', help='regions x density grid (resumable)')
    p.add_argument('config')
    p.add_argument('--output-dir')
    p.set_defaults(func=_sweep)

    p = sub.add_parser('gradcheck', help='finite-difference gradient checks')
    p.add_argument('--module', default='all',
                   choices=['all'] + list(CHECKS))
    p.add_argument('--seeds', type=int, default=20)
    p.add_argument('--tol', type=float)
    p.add_argument('--csv', help='also write the reports to this CSV file')
    p.add_argument('--corrupt', action='store_const', const=1.01,
                   help='scale analytic gradients by 1.01 (must fail)')
    p.set_defaults(func=_gradcheck)

    p = sub.add_parser('demo-warp', help='warp a PPM with one affine theta')
    p.add_argument('image')
    p.add_argument('output')
    p.add_argument('--theta', type=float, nargs=6, required=True,
                   metavar='T')
    p.add_argument('--height', type=int, default=32)
    p.add_argument('--width', type=int, default=32)
    p.add_argument('--roi', type=float, nargs=4,
                   metavar=('W0', 'H0', 'W', 'H'))
    p.set_defaults(func=_demo_warp)

    p = sub.add_parser('regions', help='draw learned regions of a proposal')
    p.add_argument('checkpoint')
    p.add_argument('output')
    p.add_argument('--index', type=int, default=0)
    p.add_argument('--proposal', type=int, default=0)
    p.add_argument('--dataset-seed', type=int)
    p.set_defaults(func=_regions)

    p = sub.add_parser('export', help='write benchmark images as PPM')
    p.add_argument('config')
    p.add_argument('directory')
    p.add_argument('--split', choices=['train', 'val'], default='val')
    p.set_defaults(func=_export)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = 'DEBUG' if args.verbose else runtime_config['log_level']
    logging.basicConfig(level=getattr(logging, str(level).upper(),
                                      logging.INFO),
                        format='%(asctime)s %(name)s %(levelname)s '
                        '%(message)s')
    try:
        return args.func(args)
    except ConfigKeyError as err:
        logger.error("Unknown config key: %s", err.args[0])
        return EXIT_CONFIG
    except ConfigValueError as err:
        logger.error("Invalid config: %s", err)
        return EXIT_CONFIG
    except NonFiniteError as err:
        logger.error("%s", err)
        return EXIT_NON_FINITE


if __name__ == '__main__':
    sys.exit(main())

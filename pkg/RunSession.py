import argparse
import logging
import sys

import yaml

from src.session import cmd_run, cmd_sweep, cmd_verify, load_metaparams



def parse_values(text):
    """'0.1,0.5,0.9' -> [0.1, 0.5, 0.9]; each item is read as a YAML scalar."""
    return [yaml.safe_load(item) for item in text.split(',') if item.strip()]


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--set', dest='overrides', action='append', default=[], metavar='PATH=VALUE',
                        help="Override a manifest field, e.g. --set federation.eta=0.01")
    common.add_argument('--metaparams', default='cfg/metaparams.yaml', help="Session settings file")

    parser = argparse.ArgumentParser(description="Federated learning simulator with gradient consensus")
    sub = parser.add_subparsers(dest='command', required=True)

    run = sub.add_parser('run', parents=[common], help="Run one experiment")
    run.add_argument('manifest', help="Experiment manifest (YAML or JSON)")

    ver = sub.add_parser('verify', parents=[common], help="Run a property suite")
    ver.add_argument('suite', help="qp, consensus, descent or sampler")

    sweep = sub.add_parser('sweep', parents=[common], help="Run one experiment per parameter value")
    sweep.add_argument('manifest', help="Experiment manifest (YAML or JSON)")
    sweep.add_argument('--param', required=True,
                       help="alpha, mu, participation_ratio, classes_per_client, method or sampler")
    sweep.add_argument('--values', required=True, type=parse_values, help="Comma-separated values")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    metaparams = load_metaparams(args.metaparams)
    logging.basicConfig(level=getattr(logging, str(metaparams['log_level']).upper(), logging.INFO),
                        format='%(asctime)s %(levelname)s %(name)s: %(message)s')
    if args.command == 'run':
        return cmd_run(args.manifest, args.overrides, metaparams)
    if args.command == 'sweep':
        return cmd_sweep(args.manifest, args.param, args.values, args.overrides, metaparams)
    return cmd_verify(args.suite)


if __name__ == '__main__':
    sys.exit(main())

import argparse
import logging
import os
import sys

from config import Config
from dispatcher import CommandDispatcher, EXIT_USAGE
from handlers import (
    train_handler, evaluate_handler, predict_handler,
    analyze_nmi_handler, analyze_macs_handler, analyze_sweep_handler, analyze_ablate_handler)
from service.analysis_service import ABLATION_VARIANTS, SWEEP_KEYS, AnalysisService
from service.training_service import TrainingService

DEFAULT_APP_CONFIG = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), 'config.json')


def _add_run_config_args(parser):
    parser.add_argument('--config', required=True, help="run config file (key=value lines)")
    parser.add_argument('--override', action='append', default=[], metavar='KEY=VALUE',
                        help="override a config key; may be repeated")


def build_parser():
    """
    Builds the argument parser for every command.

    Returns:
        argparse.ArgumentParser: The parser.
    """
    parser = argparse.ArgumentParser(prog='patchmixer', description="PatchMixer forecasting and analysis")
    parser.add_argument('--app-config', default=DEFAULT_APP_CONFIG, help="application settings (JSON)")
    commands = parser.add_subparsers(dest='command', required=True)

    train = commands.add_parser('train', help="train a model and write a run directory")
    _add_run_config_args(train)
    train.add_argument('--dataset')
    train.add_argument('--profile', choices=['auto', 'etth', 'ettm', 'generic'])
    train.add_argument('--patch-len', dest='patch_len', type=int)
    train.add_argument('--stride', type=int)
    train.add_argument('--dim', type=int)
    train.add_argument('--kernel', type=int)
    train.add_argument('--dropout', type=float)
    train.add_argument('--heads', choices=['dual', 'linear', 'mlp'])

    evaluate = commands.add_parser('evaluate', help="score a checkpoint on a split")
    evaluate.add_argument('--checkpoint', required=True)
    evaluate.add_argument('--split', choices=['val', 'test'], default='test')

    predict = commands.add_parser('predict', help="forecast from an input window")
    predict.add_argument('--checkpoint', required=True)
    predict.add_argument('--input', required=True, help="CSV with a timestamp column and exactly L rows")
    predict.add_argument('--output', help="forecast CSV; printed as a table when omitted")

    analyze = commands.add_parser('analyze', help="measurement tools")
    actions = analyze.add_subparsers(dest='action', required=True)

    nmi = actions.add_parser('nmi', help="channel vs patch NMI matrices")
    nmi.add_argument('--dataset', required=True)
    nmi.add_argument('--profile', choices=['auto', 'etth', 'ettm', 'generic'], default='auto')
    nmi.add_argument('--variable', type=int, default=0)
    nmi.add_argument('--P', type=int, default=16)
    nmi.add_argument('--S', type=int, default=8)
    nmi.add_argument('--L', type=int, default=336)
    nmi.add_argument('--max-steps', dest='max_steps', type=int)
    nmi.add_argument('--output-dir', dest='output_dir')

    macs = actions.add_parser('macs', help="MAC counts per stage")
    _add_run_config_args(macs)
    macs.add_argument('--M', type=int, help="number of variables (default: read from the dataset header)")
    macs.add_argument('--output')

    sweep = actions.add_parser('sweep', help="one training run per axis value")
    _add_run_config_args(sweep)
    sweep.add_argument('--axis', required=True, choices=list(SWEEP_KEYS))
    sweep.add_argument('--values', required=True, help="comma-separated values, or 'preset'")
    sweep.add_argument('--output')

    ablate = actions.add_parser('ablate', help="train one ablation variant")
    _add_run_config_args(ablate)
    ablate.add_argument('--variant', required=True, choices=list(ABLATION_VARIANTS))
    ablate.add_argument('--output')
    return parser


def main(argv=None):
    """
    The main entry point for the application.
    Parses the command line, loads settings, wires services and dispatches the command.

    Returns:
        int: Process exit code.
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE

    # Initialize Configs
    try:
        config = Config(args.app_config)
    except Exception as e:
        print(f"error: loading config: {e}", file=sys.stderr)
        return EXIT_USAGE

    logging.basicConfig(
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        level=getattr(logging, str(config.log_level).upper(), logging.INFO)
    )

    # Initialize Services
    training_service = TrainingService(config)
    analysis_service = AnalysisService(config, training_service)

    context = {
        'config': config,
        'training_service': training_service,
        'analysis_service': analysis_service,
    }
    dispatcher = CommandDispatcher(context=context)

    # Register Handlers
    dispatcher.register_command_handler('train', train_handler)
    dispatcher.register_command_handler('evaluate', evaluate_handler)
    dispatcher.register_command_handler('predict', predict_handler)
    dispatcher.register_command_handler('analyze nmi', analyze_nmi_handler)
    dispatcher.register_command_handler('analyze macs', analyze_macs_handler)
    dispatcher.register_command_handler('analyze sweep', analyze_sweep_handler)
    dispatcher.register_command_handler('analyze ablate', analyze_ablate_handler)

    return dispatcher.dispatch(args)


if __name__ == '__main__':
    sys.exit(main())

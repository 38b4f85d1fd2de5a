import logging
import os
import time

import numpy as np
from tabulate import tabulate

from config import RunConfig
from dispatcher import UsageError
from repository.dataset_repository import load_csv, make_splits
from repository.report_repository import write_csv
from service.analysis_service import parse_sweep_values
from service.training_service import evaluate, load_model, predict_windows

logger = logging.getLogger(__name__)

# Shorthand train flags and the config keys they override.
TRAIN_SHORTHANDS = {
    'dataset': 'dataset',
    'profile': 'profile',
    'patch_len': 'P',
    'stride': 'S',
    'dim': 'D',
    'kernel': 'K',
    'dropout': 'dropout',
    'heads': 'heads',
}


def _run_config(args):
    """
    Builds the RunConfig for a command: config file, then --override pairs, then shorthand flags.

    Args:
        args (argparse.Namespace): Parsed arguments.

    Returns:
        RunConfig: The merged configuration (not yet validated).
    """
    overrides = list(getattr(args, 'override', None) or [])
    for attribute, key in TRAIN_SHORTHANDS.items():
        value = getattr(args, attribute, None)
        if value is not None:
            overrides.append(f"{key}={value}")
    return RunConfig.from_file(args.config, overrides)


def _analysis_dir(ctx, name):
    return os.path.join(ctx['config'].output_root, 'analysis', name)


def train_handler(command, ctx):
    """
    Handles `train`: trains a model and writes the run directory.

    Args:
        command: The parsed command.
        ctx (dict): The context dictionary.
    """
    service = ctx['training_service']
    run_cfg = _run_config(command.args).validate()
    report = service.train(run_cfg)
    print(report.to_text())
    print(f"checkpoint: {report.checkpoint_path}")


def evaluate_handler(command, ctx):
    """
    Handles `evaluate`: scores a checkpoint on the val or test split of its dataset.

    Args:
        command: The parsed command.
        ctx (dict): The context dictionary.
    """
    config = ctx['config']
    args = command.args
    model, run_cfg = load_model(args.checkpoint)
    dataset = make_splits(load_csv(run_cfg.dataset, max_steps=run_cfg.max_steps), run_cfg.profile,
                          run_cfg.ratios, run_cfg.lookback, run_cfg.horizon)

    start_time = time.perf_counter()
    mse, mae = evaluate(model, dataset, args.split, run_cfg.lookback, run_cfg.horizon, config.eval_workers)
    duration = time.perf_counter() - start_time
    logger.info(f"Evaluated {args.split} split in {duration:.6f}s")

    print(tabulate([[args.split, f"{mse:.6f}", f"{mae:.6f}"]], headers=['split', 'mse', 'mae']))


def predict_handler(command, ctx):
    """
    Handles `predict`: forecasts T steps for every variable of an input window CSV.

    The input has the dataset layout (timestamp column, one column per variable)
    and exactly L rows. Forecasts are on the input's scale.

    Args:
        command: The parsed command.
        ctx (dict): The context dictionary.
    """
    args = command.args
    model, run_cfg = load_model(args.checkpoint)
    window = load_csv(args.input)
    if window.total_steps != run_cfg.lookback:
        raise UsageError(f"input has {window.total_steps} rows, the checkpoint expects L={run_cfg.lookback}")

    forecast = predict_windows(model, window.values)
    if not np.all(np.isfinite(forecast)):
        logger.warning("Forecast contains non-finite values")

    header = ['step'] + list(window.names)
    rows = [[step + 1] + [float(v) for v in forecast[:, step]] for step in range(run_cfg.horizon)]
    if args.output:
        write_csv(args.output, header, rows, meta={'checkpoint': args.checkpoint, 'input': args.input,
                                                   'config': run_cfg.to_text()})
        print(f"forecast written to {args.output}")
    else:
        print(tabulate(rows, headers=header, floatfmt='.6f'))


def analyze_nmi_handler(command, ctx):
    """
    Handles `analyze nmi`: channel and patch NMI matrices for a dataset.

    Args:
        command: The parsed command.
        ctx (dict): The context dictionary.
    """
    args = command.args
    service = ctx['analysis_service']
    output_dir = args.output_dir or _analysis_dir(ctx, 'nmi')
    channels, patches, paths = service.nmi_report(args.dataset, output_dir, profile=args.profile,
                                                  variable=args.variable, patch_len=args.P, stride=args.S,
                                                  lookback=args.L, max_steps=args.max_steps)
    print(tabulate([['channels', len(channels.labels), f"{channels.mean_off_diagonal():.4f}", channels.bin_count],
                    ['patches', len(patches.labels), f"{patches.mean_off_diagonal():.4f}", patches.bin_count]],
                   headers=['matrix', 'size', 'mean_off_diagonal', 'bins']))
    for path in paths:
        print(f"written: {path}")


def analyze_macs_handler(command, ctx):
    """
    Handles `analyze macs`: MAC counts for a config.

    Args:
        command: The parsed command.
        ctx (dict): The context dictionary.
    """
    args = command.args
    service = ctx['analysis_service']
    run_cfg = _run_config(args)
    output_path = args.output or os.path.join(_analysis_dir(ctx, 'macs'), f"{run_cfg.run_name()}_macs.csv")
    report = service.mac_report(run_cfg, output_path, num_variables=args.M)
    print(tabulate(report.rows(), headers=['stage', 'macs']))
    print(f"written: {output_path}")


def analyze_sweep_handler(command, ctx):
    """
    Handles `analyze sweep`: one training run per axis value.

    Args:
        command: The parsed command.
        ctx (dict): The context dictionary.
    """
    args = command.args
    service = ctx['analysis_service']
    run_cfg = _run_config(args).validate()
    values = parse_sweep_values(args.axis, args.values)
    output_path = args.output or os.path.join(_analysis_dir(ctx, 'sweep'), f"{run_cfg.run_name()}_{args.axis}.csv")
    rows = service.sweep(args.axis, values, run_cfg, output_path=output_path)
    print(tabulate([row.as_list() for row in rows],
                   headers=['axis_value', 'test_mse', 'test_mae', 'epochs', 'seconds_per_epoch']))
    print(f"written: {output_path}")


def analyze_ablate_handler(command, ctx):
    """
    Handles `analyze ablate`: trains one ablation variant.

    Args:
        command: The parsed command.
        ctx (dict): The context dictionary.
    """
    args = command.args
    service = ctx['analysis_service']
    run_cfg = _run_config(args).validate()
    output_path = args.output or os.path.join(_analysis_dir(ctx, 'ablate'),
                                              f"{run_cfg.run_name()}_{args.variant}.csv")
    result = service.ablate(args.variant, run_cfg, output_path=output_path)
    print(tabulate([[result.variant, result.num_patches, f"{result.test_mse:.6f}", f"{result.test_mae:.6f}",
                     result.epochs]], headers=['variant', 'N', 'test_mse', 'test_mae', 'epochs']))
    print(f"written: {output_path}")

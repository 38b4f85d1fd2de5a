import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from tabulate import tabulate

from config import RunConfig
from numerics.tensor import backward, no_grad
from repository.checkpoint_repository import save_checkpoint, load_checkpoint
from repository.dataset_repository import DatasetError, load_csv, make_splits
from repository.report_repository import write_csv, write_kv, write_text
from repository.window_repository import iter_windows, window_count
from service.losses import loss
from service.model import ModelConfigError, PatchMixerModel
from service.optimizer import Adam

logger = logging.getLogger(__name__)

EVAL_BATCH_SIZE = 256


class TrainingError(RuntimeError):
    """Raised when training cannot continue (for example a non-finite loss)."""


def named_generators(seed):
    """
    Independent generators derived from one seed, so each source of randomness is reproducible on its own.

    Args:
        seed (int): The run seed.

    Returns:
        dict: 'init', 'dropout' and 'shuffle' -> np.random.Generator.
    """
    init_seq, dropout_seq, shuffle_seq = np.random.SeedSequence(seed).spawn(3)
    return {
        'init': np.random.default_rng(init_seq),
        'dropout': np.random.default_rng(dropout_seq),
        'shuffle': np.random.default_rng(shuffle_seq),
    }


def build_model(run_cfg):
    """
    Creates a freshly initialized model and the run's generators.

    Returns:
        tuple: (PatchMixerModel, dict of generators)
    """
    generators = named_generators(run_cfg.seed)
    model = PatchMixerModel(run_cfg.model_config(), generators['init'], generators['dropout'])
    return model, generators


def prepare_dataset(run_cfg):
    """
    Loads the run's dataset and standardizes it with train-split statistics.
    """
    dataset = load_csv(run_cfg.dataset, max_steps=run_cfg.max_steps)
    return make_splits(dataset, run_cfg.profile, run_cfg.ratios, run_cfg.lookback, run_cfg.horizon)


def load_model(checkpoint_path):
    """
    Rebuilds a model from a checkpoint, in eval mode.

    Returns:
        tuple: (PatchMixerModel, RunConfig)
    """
    state, config_text = load_checkpoint(checkpoint_path)
    run_cfg = RunConfig(**RunConfig.parse_assignments(config_text.splitlines(), source=checkpoint_path))
    model, _ = build_model(run_cfg)
    model.load_state_dict(state)
    return model.eval(), run_cfg


def predict_windows(model, windows):
    """
    Eval-mode forecasts for a batch of windows without recording a graph.

    Args:
        model (PatchMixerModel): The model.
        windows (np.ndarray): Shape [B, L].

    Returns:
        np.ndarray: Shape [B, T].
    """
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            return model(windows).value
    finally:
        model.training = was_training


def _batch_sums(model, batch, spec):
    with no_grad():
        pred = model(batch.inputs)
        residual = pred.value.astype(np.float64) - batch.targets.astype(np.float64)
        sums = {
            'sq': float(np.sum(residual * residual)),
            'abs': float(np.sum(np.abs(residual))),
            'count': residual.size,
        }
        if spec is not None:
            sums['loss'] = loss(pred, batch.targets.astype(pred.dtype), spec).item() * residual.size
    return sums


def _merge_sums(model, dataset, split, lookback, horizon, spec, workers):
    if window_count(dataset, split, lookback, horizon) == 0:
        raise DatasetError(f"empty split '{split}': no windows of length L+T={lookback + horizon}")
    cfg = model.cfg
    if cfg.lookback != lookback or cfg.horizon != horizon:
        raise ModelConfigError(f"model was built for L={cfg.lookback}, T={cfg.horizon}; "
                               f"evaluation asked for L={lookback}, T={horizon}")

    was_training = model.training
    model.eval()
    try:
        batches = iter_windows(dataset, split, lookback, horizon, EVAL_BATCH_SIZE, dtype=model.dtype)
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as executor:
                partials = list(executor.map(lambda b: _batch_sums(model, b, spec), batches))
        else:
            partials = [_batch_sums(model, b, spec) for b in batches]
    finally:
        model.training = was_training

    totals = {'sq': 0.0, 'abs': 0.0, 'count': 0, 'loss': 0.0}
    for part in partials:
        for key, value in part.items():
            totals[key] += value
    return totals


def evaluate(model, dataset, split, lookback, horizon, workers=1):
    """
    MSE and MAE over every window and variable of a split, in standardized space.

    Args:
        model (PatchMixerModel): Model to score (evaluated in eval mode).
        dataset (SeriesDataset): Standardized dataset with borders.
        split (str): 'train', 'val' or 'test'.
        lookback (int): L, must match the model.
        horizon (int): T, must match the model.
        workers (int): Threads sharing the batches; results do not depend on it.

    Returns:
        tuple: (mse, mae)
    """
    totals = _merge_sums(model, dataset, split, lookback, horizon, None, workers)
    return totals['sq'] / totals['count'], totals['abs'] / totals['count']


def validation_loss(model, dataset, lookback, horizon, spec, workers=1):
    """
    Mean training-objective value over the validation windows.
    """
    totals = _merge_sums(model, dataset, 'val', lookback, horizon, spec, workers)
    return totals['loss'] / totals['count']


@dataclass
class TrainReport:
    """
    Outcome of one training run.
    """
    run_config: RunConfig
    train_losses: list = field(default_factory=list)
    val_losses: list = field(default_factory=list)
    epoch_seconds: list = field(default_factory=list, compare=False)
    best_epoch: int = 0
    test_mse: float = float('nan')
    test_mae: float = float('nan')
    stopped_early: bool = False
    parameter_count: int = 0
    checkpoint_path: str = field(default=None, compare=False)
    model: PatchMixerModel = field(default=None, repr=False, compare=False)

    @property
    def seed(self):
        return self.run_config.seed

    @property
    def best_val_loss(self):
        return min(self.val_losses) if self.val_losses else float('nan')

    @property
    def epochs_run(self):
        return len(self.train_losses)

    @property
    def seconds_per_epoch(self):
        return sum(self.epoch_seconds) / len(self.epoch_seconds) if self.epoch_seconds else 0.0

    def records(self):
        """
        Machine-readable key/value records. Wall-clock timings are excluded so
        repeated runs produce identical records.
        """
        records = [
            ('seed', self.seed),
            ('epochs_run', self.epochs_run),
            ('best_epoch', self.best_epoch),
            ('best_val_loss', self.best_val_loss),
            ('test_mse', self.test_mse),
            ('test_mae', self.test_mae),
            ('stopped_early', self.stopped_early),
            ('parameter_count', self.parameter_count),
        ]
        for epoch, (tr, va) in enumerate(zip(self.train_losses, self.val_losses), start=1):
            records.append((f"train_loss.{epoch}", tr))
            records.append((f"val_loss.{epoch}", va))
        for line in self.run_config.to_text().strip().split('\n'):
            key, _, value = line.partition('=')
            records.append((f"config.{key}", value))
        return records

    def to_text(self, assumptions=()):
        """
        Human-readable report: assumptions header, config echo, epoch table and test metrics.
        """
        lines = ["# PatchMixer training report"]
        for note in assumptions:
            lines.append(f"# assumption: {note}")
        lines.append("")
        lines.append(self.run_config.to_text().rstrip())
        lines.append("")
        rows = [[epoch, f"{tr:.6f}", f"{va:.6f}", '*' if epoch == self.best_epoch else '']
                for epoch, (tr, va) in enumerate(zip(self.train_losses, self.val_losses), start=1)]
        lines.append(tabulate(rows, headers=['epoch', 'train_loss', 'val_loss', 'best'], tablefmt='simple'))
        lines.append("")
        lines.append(tabulate([
            ['best epoch', self.best_epoch],
            ['early stop', 'yes' if self.stopped_early else 'no'],
            ['test MSE', f"{self.test_mse:.6f}"],
            ['test MAE', f"{self.test_mae:.6f}"],
            ['parameters', self.parameter_count],
        ], tablefmt='plain'))
        return "\n".join(lines) + "\n"


class TrainingService:
    """
    Runs training, early stopping, checkpointing and evaluation for a RunConfig.
    """
    def __init__(self, config):
        """
        Initializes the TrainingService.

        Args:
            config (Config): Application settings (output root, workers, prefetch).
        """
        self.config = config

    def train(self, run_cfg, output_dir=None, write_outputs=True):
        """
        Trains a model, keeping the parameters with the lowest validation loss.

        Args:
            run_cfg (RunConfig): The experiment.
            output_dir (str, optional): Run directory; defaults to the config's resolved output dir.
            write_outputs (bool): Write report, metrics and checkpoint files.

        Returns:
            TrainReport: Losses per epoch, test metrics and the trained model.
        """
        run_cfg.validate()
        output_dir = output_dir or run_cfg.resolve_output_dir(self.config.output_root)
        dataset = prepare_dataset(run_cfg)
        model, generators = build_model(run_cfg)
        spec = run_cfg.loss_spec()
        optimizer = Adam(model.parameters(), lr=run_cfg.lr, betas=(run_cfg.beta1, run_cfg.beta2), eps=run_cfg.eps)
        lookback, horizon = run_cfg.lookback, run_cfg.horizon

        report = TrainReport(run_config=run_cfg, parameter_count=model.parameter_count())
        logger.info(f"Training {run_cfg.run_name()}: {model.parameter_count()} parameters, "
                    f"{window_count(dataset, 'train', lookback, horizon)} train windows")

        best_state = model.state_dict()
        best_val = math.inf
        waited = 0
        for epoch in range(1, run_cfg.max_epochs + 1):
            start_time = time.perf_counter()
            model.train()
            shuffle_seed = int(generators['shuffle'].integers(2 ** 31))
            batches = iter_windows(dataset, 'train', lookback, horizon, run_cfg.batch_size,
                                   shuffle_seed=shuffle_seed, prefetch=self.config.prefetch_batches,
                                   dtype=model.dtype)
            total, count = 0.0, 0
            for batch_index, batch in enumerate(batches):
                objective = loss(model(batch.inputs), batch.targets, spec)
                value = objective.item()
                if not math.isfinite(value):
                    raise TrainingError(f"non-finite loss {value} at epoch {epoch}, batch {batch_index} "
                                        f"(lr={run_cfg.lr})")
                backward(objective)
                optimizer.step()
                total += value * len(batch)
                count += len(batch)

            train_loss = total / count
            val_loss = validation_loss(model, dataset, lookback, horizon, spec, self.config.eval_workers)
            seconds = time.perf_counter() - start_time
            report.train_losses.append(train_loss)
            report.val_losses.append(val_loss)
            report.epoch_seconds.append(seconds)
            logger.info(f"Epoch {epoch}: train {train_loss:.6f} val {val_loss:.6f} ({seconds:.2f}s)")

            if val_loss < best_val:
                best_val = val_loss
                best_state = model.state_dict()
                report.best_epoch = epoch
                waited = 0
            else:
                waited += 1
                if waited >= run_cfg.patience:
                    logger.info(f"Early stopping at epoch {epoch}; best epoch {report.best_epoch}")
                    report.stopped_early = True
                    break

        model.load_state_dict(best_state)
        model.eval()
        report.test_mse, report.test_mae = evaluate(model, dataset, 'test', lookback, horizon,
                                                    self.config.eval_workers)
        report.model = model
        logger.info(f"Test MSE {report.test_mse:.6f}, MAE {report.test_mae:.6f}")

        if write_outputs:
            self.write_outputs(report, output_dir)
        return report

    def write_outputs(self, report, output_dir):
        """
        Writes config echo, checkpoint, report text/records, metrics and timings into `output_dir`.
        """
        os.makedirs(output_dir, exist_ok=True)
        config_text = report.run_config.to_text()
        checkpoint_path = os.path.join(output_dir, self.config.checkpoint_name)
        save_checkpoint(checkpoint_path, report.model.state_dict(), config_text)
        report.checkpoint_path = checkpoint_path

        write_text(os.path.join(output_dir, 'config.cfg'), config_text)
        write_text(os.path.join(output_dir, 'report.txt'), report.to_text(self.config.report_assumptions))
        write_kv(os.path.join(output_dir, 'report.kv'),
                 report.records() + [('checkpoint', self.config.checkpoint_name)])
        write_csv(os.path.join(output_dir, 'metrics.csv'), ['epoch', 'train_loss', 'val_loss'],
                  [[e, tr, va] for e, (tr, va) in enumerate(zip(report.train_losses, report.val_losses), start=1)],
                  meta={'seed': report.seed, 'config': config_text})
        write_csv(os.path.join(output_dir, 'timings.csv'), ['epoch', 'seconds'],
                  [[e, s] for e, s in enumerate(report.epoch_seconds, start=1)])
        logger.info(f"Run outputs written to {output_dir}")

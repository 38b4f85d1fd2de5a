import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.stats import entropy

from config import ConfigError
from repository.dataset_repository import DatasetError, load_csv, make_splits, read_variable_names
from repository.report_repository import write_csv
from service.model import ModelConfigError
from service.patching import PatchingError, patch_count
from service.training_service import TrainingService

logger = logging.getLogger(__name__)

DEFAULT_MAX_BINS = 64

SWEEP_KEYS = {
    'lookback': 'L',
    'patch_len': 'P',
    'stride': 'S',
    'loss': 'loss',
}

SWEEP_PRESETS = {
    'lookback': [24, 48, 96, 192, 336, 720],
    'patch_len': [1, 2, 4, 8, 12, 16, 24, 32, 40],
    'stride': list(range(1, 17)),
    'loss': ['mse_plus_mae', 'mse', 'mae', 'smooth_l1'],
}

ABLATION_VARIANTS = {
    'full': [],
    'no_patch': ['P=1', 'S=1'],
    'linear_head': ['block=false', 'heads=linear'],
    'mlp_head': ['block=false', 'heads=mlp'],
    'dual_head': ['block=false', 'heads=dual'],
}

SWEEP_COLUMNS = ['axis_value', 'test_mse', 'test_mae', 'epochs', 'seconds_per_epoch']


class AnalysisError(ValueError):
    """Raised for analysis requests that cannot be computed."""


def histogram_bins(n, max_bins=DEFAULT_MAX_BINS):
    """
    Equal-width bin count for `n` samples: ceil(sqrt(n)), capped at `max_bins`.
    """
    return max(1, min(math.ceil(math.sqrt(n)), max_bins))


def nmi(x, y, bins=None, max_bins=DEFAULT_MAX_BINS):
    """
    Normalized mutual information 2*I(X;Y) / (H(X) + H(Y)) from an equal-width joint histogram.

    Identical series score 1. Any other pair involving a constant series scores 0.

    Args:
        x (array-like): First series.
        y (array-like): Second series, same length.
        bins (int, optional): Bins per axis; defaults to `histogram_bins(len(x))`.
        max_bins (int): Cap for the default bin count.

    Returns:
        float: Value in [0, 1].
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.shape != y.shape:
        raise AnalysisError(f"nmi needs series of equal length, got {x.size} and {y.size}")
    bins = bins or histogram_bins(x.size, max_bins)
    if x.size < bins:
        raise AnalysisError(f"nmi needs at least {bins} samples for {bins} bins, got {x.size}")

    if np.array_equal(x, y):
        return 1.0
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        return 0.0

    joint, _, _ = np.histogram2d(x, y, bins=bins)
    h_x = entropy(joint.sum(axis=1))
    h_y = entropy(joint.sum(axis=0))
    h_xy = entropy(joint.reshape(-1))
    mutual = h_x + h_y - h_xy
    return float(np.clip(2.0 * mutual / (h_x + h_y), 0.0, 1.0))


@dataclass(frozen=True)
class NmiMatrix:
    """
    Pairwise NMI between a set of series.

    Attributes:
        labels (tuple): Variable names or patch labels.
        values (np.ndarray): Symmetric [n, n] matrix with a unit diagonal.
        bin_count (int): Histogram bins per axis.
    """
    labels: tuple
    values: np.ndarray
    bin_count: int

    def mean_off_diagonal(self):
        n = len(self.labels)
        if n < 2:
            return float('nan')
        mask = ~np.eye(n, dtype=bool)
        return float(self.values[mask].mean())

    def rows(self):
        return [[label] + [float(v) for v in row] for label, row in zip(self.labels, self.values)]


def nmi_matrix(series, labels, max_bins=DEFAULT_MAX_BINS):
    """
    Pairwise NMI over rows of `series`.

    Args:
        series (np.ndarray): Shape [n, samples].
        labels (list): One label per row.
        max_bins (int): Bin cap.

    Returns:
        NmiMatrix: The symmetric matrix.
    """
    series = np.asarray(series, dtype=np.float64)
    n = series.shape[0]
    bins = histogram_bins(series.shape[1], max_bins)
    values = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            values[i, j] = values[j, i] = nmi(series[i], series[j], bins=bins)
    return NmiMatrix(tuple(labels), values, bins)


def patch_samples(series, patch_len, stride, lookback, window_step=None):
    """
    Gathers, for each patch position, its values across every look-back window of a series.

    Each window is padded with `stride` copies of its last value and unfolded
    into N patches, as the model does.

    Args:
        series (np.ndarray): One variable, shape [steps].
        patch_len (int): P.
        stride (int): S.
        lookback (int): L.
        window_step (int, optional): Distance between window starts; defaults to P.

    Returns:
        np.ndarray: Shape [N, windows * P].
    """
    series = np.asarray(series, dtype=np.float64)
    if series.size < lookback:
        raise AnalysisError(f"series of {series.size} steps is shorter than L={lookback}")
    if not 1 <= patch_len <= lookback or stride < 1:
        raise PatchingError(f"invalid patching P={patch_len}, S={stride} for L={lookback}")
    step = window_step or patch_len
    windows = sliding_window_view(series, lookback)[::step]
    padded = np.concatenate([windows, np.repeat(windows[:, -1:], stride, axis=1)], axis=1)
    patches = sliding_window_view(padded, patch_len, axis=1)[:, ::stride]
    assert patches.shape[1] == patch_count(lookback, patch_len, stride)
    # [W, N, P] -> [N, W * P]
    return np.ascontiguousarray(patches.transpose(1, 0, 2)).reshape(patches.shape[1], -1)


def channel_vs_patch_nmi(dataset, patch_len, stride, lookback, variable=0, window_step=None,
                         max_bins=DEFAULT_MAX_BINS):
    """
    NMI across variables and across one variable's patch sequence.

    Args:
        dataset (SeriesDataset): Loaded dataset.
        patch_len (int): P.
        stride (int): S.
        lookback (int): L.
        variable (int): Index of the variable whose patches are compared.
        window_step (int, optional): Distance between windows used for patch samples.
        max_bins (int): Bin cap.

    Returns:
        tuple: (channel NmiMatrix, patch NmiMatrix)
    """
    if dataset.num_variables < 2:
        raise AnalysisError(f"channel NMI needs at least 2 variables, dataset has {dataset.num_variables}")
    if not 0 <= variable < dataset.num_variables:
        raise AnalysisError(f"variable index {variable} out of range for {dataset.num_variables} variables")

    channels = nmi_matrix(dataset.values, dataset.names, max_bins)
    samples = patch_samples(dataset.values[variable], patch_len, stride, lookback, window_step)
    patches = nmi_matrix(samples, [f"patch_{i}" for i in range(samples.shape[0])], max_bins)
    logger.info(f"Channel NMI mean {channels.mean_off_diagonal():.4f}, "
                f"patch NMI mean {patches.mean_off_diagonal():.4f} ({dataset.names[variable]})")
    return channels, patches


@dataclass(frozen=True)
class MacReport:
    """
    Multiply-accumulate counts per stage for one forecast of one variable.

    Only affine and convolution stages are counted; activations and normalization are free.
    """
    num_patches: int
    patch_len: int
    dim: int
    kernel: int
    horizon: int
    num_variables: int
    embedding: int
    depthwise: int
    pointwise: int
    linear_head: int
    mlp_head: int

    @property
    def per_variable(self):
        return self.embedding + self.depthwise + self.pointwise + self.linear_head + self.mlp_head

    @property
    def per_forecast(self):
        return self.per_variable * self.num_variables

    @property
    def standard_conv_reference(self):
        return self.num_patches ** 2 * self.dim * self.kernel

    @property
    def attention_reference(self):
        return self.num_patches * self.dim ** 2 + self.num_patches ** 2 * self.dim

    def rows(self):
        return [
            ['embedding', self.embedding],
            ['depthwise', self.depthwise],
            ['pointwise', self.pointwise],
            ['linear_head', self.linear_head],
            ['mlp_head', self.mlp_head],
            ['total_per_variable', self.per_variable],
            ['total_per_forecast', self.per_forecast],
            ['reference_standard_conv', self.standard_conv_reference],
            ['reference_attention', self.attention_reference],
        ]

    def echo(self):
        return {'N': self.num_patches, 'P': self.patch_len, 'D': self.dim, 'K': self.kernel,
                'T': self.horizon, 'M': self.num_variables}


def count_macs(model_cfg, num_variables=1):
    """
    Closed-form MAC counts for a model configuration.

    embedding N*P*D, depthwise N*D_b*K, pointwise N^2*D_b, linear head N*D*T,
    MLP head F*2T + 2T*T with F = N*D_b (or N*D without the block).
    Stages that the configuration does not build count 0.

    Args:
        model_cfg (ModelConfig): The model.
        num_variables (int): M, multiplies the per-variable total.

    Returns:
        MacReport: Per-stage counts.
    """
    n = model_cfg.num_patches
    d = model_cfg.dim
    k = model_cfg.kernel
    t = model_cfg.horizon
    d_b = model_cfg.block_dim
    uses_block = model_cfg.uses_block

    return MacReport(
        num_patches=n,
        patch_len=model_cfg.patch_len,
        dim=d,
        kernel=k,
        horizon=t,
        num_variables=num_variables,
        embedding=n * model_cfg.patch_len * d,
        depthwise=n * d_b * k if uses_block else 0,
        pointwise=n * n * d_b if uses_block else 0,
        linear_head=n * d * t if model_cfg.heads in ('dual', 'linear') else 0,
        mlp_head=model_cfg.mlp_in_features * 2 * t + 2 * t * t if model_cfg.heads in ('dual', 'mlp') else 0,
    )


@dataclass(frozen=True)
class SweepRow:
    axis_value: object
    test_mse: float
    test_mae: float
    epochs: int
    seconds_per_epoch: float

    def as_list(self):
        return [self.axis_value, self.test_mse, self.test_mae, self.epochs, self.seconds_per_epoch]


@dataclass(frozen=True)
class AblationResult:
    variant: str
    num_patches: int
    test_mse: float
    test_mae: float
    epochs: int


def parse_sweep_values(axis, text):
    """
    Parses a comma-separated value list for an axis; 'preset' yields the published grid.
    """
    if axis not in SWEEP_KEYS:
        raise ConfigError('axis', f"expected one of {list(SWEEP_KEYS)}, got '{axis}'")
    if text.strip() == 'preset':
        return list(SWEEP_PRESETS[axis])
    parts = [part.strip() for part in text.split(',') if part.strip()]
    if not parts:
        raise ConfigError('values', "no sweep values given")
    if axis == 'loss':
        return parts
    try:
        return [int(part) for part in parts]
    except ValueError:
        raise ConfigError('values', f"{axis} values must be integers, got '{text}'") from None


class AnalysisService:
    """
    Runs the measurement tools and writes their CSV outputs.
    """
    def __init__(self, config, training_service=None):
        """
        Initializes the AnalysisService.

        Args:
            config (Config): Application settings.
            training_service (TrainingService, optional): Used by sweeps and ablations.
        """
        self.config = config
        self.training_service = training_service or TrainingService(config)

    def nmi_report(self, dataset_path, output_dir, profile='auto', variable=0,
                   patch_len=16, stride=8, lookback=336, max_steps=None):
        """
        Computes channel and patch NMI matrices and writes them as CSV.

        Returns:
            tuple: (channel NmiMatrix, patch NmiMatrix, list of written paths)
        """
        dataset = make_splits(load_csv(dataset_path, max_steps=max_steps), profile)
        channels, patches = channel_vs_patch_nmi(dataset, patch_len, stride, lookback, variable,
                                                 self.config.nmi_window_step, self.config.nmi_max_bins)
        meta = {'dataset': dataset_path, 'variable': dataset.names[variable], 'P': patch_len,
                'S': stride, 'L': lookback}
        paths = []
        for name, matrix in (('nmi_channels.csv', channels), ('nmi_patches.csv', patches)):
            path = os.path.join(output_dir, name)
            write_csv(path, ['label'] + list(matrix.labels), matrix.rows(),
                      meta=dict(meta, bin_count=matrix.bin_count))
            paths.append(path)
        return channels, patches, paths

    def mac_report(self, run_cfg, output_path, num_variables=None):
        """
        Counts MACs for a run config and writes a stage/macs CSV.

        Args:
            run_cfg (RunConfig): Supplies the model shape.
            output_path (str): CSV destination.
            num_variables (int, optional): M; defaults to the variable count of the config's
                dataset, or 1 when the config names no existing dataset.

        Returns:
            MacReport: The counts.
        """
        if num_variables is None:
            num_variables = self._dataset_variables(run_cfg)
        report = count_macs(run_cfg.model_config(), num_variables)
        meta = dict(report.echo(), config=run_cfg.to_text(), seed=run_cfg.seed,
                    accounting='multiply-accumulates of affine and convolution stages only')
        write_csv(output_path, ['stage', 'macs'], report.rows(), meta=meta)
        logger.info(f"MACs per variable {report.per_variable}, per forecast {report.per_forecast}")
        return report

    @staticmethod
    def _dataset_variables(run_cfg):
        if not run_cfg.dataset or not os.path.exists(run_cfg.dataset):
            logger.info("No dataset to read M from, counting MACs for M=1")
            return 1
        return len(read_variable_names(run_cfg.dataset))

    def _checked_config(self, base_cfg, axis, value):
        cfg = base_cfg.with_overrides([f"{SWEEP_KEYS[axis]}={value}"])
        try:
            cfg.validate()
            cfg.model_config()
        except (ConfigError, ModelConfigError, PatchingError) as e:
            logger.warning(f"Skipping {axis}={value}: {e}")
            return None
        return cfg

    def _run(self, axis, value, cfg):
        try:
            report = self.training_service.train(cfg, write_outputs=False)
        except DatasetError as e:
            logger.warning(f"Skipping {axis}={value}: {e}")
            return None
        row = SweepRow(value, report.test_mse, report.test_mae, report.epochs_run, report.seconds_per_epoch)
        logger.info(f"Sweep {axis}={value}: test MSE {row.test_mse:.6f}, MAE {row.test_mae:.6f}")
        return row

    def sweep(self, axis, values, base_cfg, output_path=None, workers=None):
        """
        Trains one model per axis value with the base config's seed.

        Invalid values are skipped with a warning naming the reason. Rows come
        back in axis order whatever the number of workers.

        Args:
            axis (str): 'lookback', 'patch_len', 'stride' or 'loss'.
            values (list): Axis values.
            base_cfg (RunConfig): Shared settings.
            output_path (str, optional): CSV destination.
            workers (int, optional): Threads; defaults to `sweep_workers`.

        Returns:
            list: SweepRow per valid value.
        """
        if axis not in SWEEP_KEYS:
            raise AnalysisError(f"Unknown sweep axis '{axis}', expected one of {list(SWEEP_KEYS)}")
        planned = []
        for value in values:
            cfg = self._checked_config(base_cfg, axis, value)
            if cfg is not None:
                planned.append((value, cfg))

        workers = workers or self.config.sweep_workers
        if workers > 1 and len(planned) > 1:
            with ThreadPoolExecutor(max_workers=workers) as executor:
                results = list(executor.map(lambda item: self._run(axis, *item), planned))
        else:
            results = [self._run(axis, value, cfg) for value, cfg in planned]
        rows = [row for row in results if row is not None]

        if output_path:
            write_csv(output_path, SWEEP_COLUMNS, [row.as_list() for row in rows],
                      meta={'axis': axis, 'values': ','.join(str(v) for v in values),
                            'seed': base_cfg.seed, 'config': base_cfg.to_text()})
        return rows

    def ablate(self, variant, base_cfg, output_path=None):
        """
        Trains one architectural variant.

        Args:
            variant (str): 'full', 'no_patch', 'linear_head', 'mlp_head' or 'dual_head'.
            base_cfg (RunConfig): Settings the variant starts from.
            output_path (str, optional): CSV destination.

        Returns:
            AblationResult: Test metrics of the variant.
        """
        if variant not in ABLATION_VARIANTS:
            raise AnalysisError(f"Unknown ablation variant '{variant}', expected one of {list(ABLATION_VARIANTS)}")
        cfg = base_cfg.with_overrides(ABLATION_VARIANTS[variant]).validate()
        report = self.training_service.train(cfg, write_outputs=False)
        result = AblationResult(variant, cfg.model_config().num_patches, report.test_mse, report.test_mae,
                                report.epochs_run)
        logger.info(f"Ablation {variant}: N={result.num_patches}, test MSE {result.test_mse:.6f}")

        if output_path:
            write_csv(output_path, ['variant', 'num_patches', 'test_mse', 'test_mae', 'epochs'],
                      [[result.variant, result.num_patches, result.test_mse, result.test_mae, result.epochs]],
                      meta={'variant': variant, 'seed': cfg.seed, 'config': cfg.to_text()})
        return result

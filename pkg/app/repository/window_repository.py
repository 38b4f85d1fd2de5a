import logging
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from repository.dataset_repository import SplitError, window_segment
from utils.prefetch_queue import PrefetchQueue

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class WindowSample:
    """
    One variable's look-back window and the horizon that follows it.

    Attributes:
        input (np.ndarray): Shape [1, L].
        target (np.ndarray): Shape [1, T]; starts at start_index + L.
        variable_index (int): Row of the variable in the dataset.
        start_index (int): Absolute index of the first input step.
    """
    input: np.ndarray
    target: np.ndarray
    variable_index: int
    start_index: int


@dataclass(frozen=True)
class WindowBatch:
    """
    Windows stacked along a leading batch axis.

    Attributes:
        inputs (np.ndarray): Shape [B, L].
        targets (np.ndarray): Shape [B, T].
        variable_index (np.ndarray): Shape [B].
        start_index (np.ndarray): Shape [B].
    """
    inputs: np.ndarray
    targets: np.ndarray
    variable_index: np.ndarray
    start_index: np.ndarray

    def __len__(self):
        return self.inputs.shape[0]

    def samples(self):
        for i in range(len(self)):
            yield WindowSample(
                self.inputs[i:i + 1],
                self.targets[i:i + 1],
                int(self.variable_index[i]),
                int(self.start_index[i]),
            )


def starts_per_variable(dataset, split, lookback, horizon):
    """
    Number of window start positions each variable contributes to a split.
    """
    start, end = window_segment(dataset, split, lookback)
    return max(0, end - start - lookback - horizon + 1)


def window_count(dataset, split, lookback, horizon):
    """
    Total windows per epoch: M times the start positions per variable.
    """
    return dataset.num_variables * starts_per_variable(dataset, split, lookback, horizon)


def _generate_batches(dataset, split, lookback, horizon, batch_size, shuffle_seed, dtype):
    seg_start, seg_end = window_segment(dataset, split, lookback)
    per_variable = starts_per_variable(dataset, split, lookback, horizon)
    total = dataset.num_variables * per_variable

    order = np.arange(total)
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(total)

    views = sliding_window_view(dataset.values[:, seg_start:seg_end], lookback + horizon, axis=1)
    for offset in range(0, total, batch_size):
        chosen = order[offset:offset + batch_size]
        variables = chosen // per_variable
        local_starts = chosen % per_variable
        full = np.asarray(views[variables, local_starts], dtype=dtype)
        yield WindowBatch(
            inputs=np.ascontiguousarray(full[:, :lookback]),
            targets=np.ascontiguousarray(full[:, lookback:]),
            variable_index=variables,
            start_index=local_starts + seg_start,
        )


def iter_windows(dataset, split, lookback, horizon, batch_size, shuffle_seed=None, prefetch=0, dtype=np.float32):
    """
    Streams every (variable, start) window of a split exactly once.

    Each variable contributes its own windows (channel independence). The last
    partial batch is kept.

    Args:
        dataset (SeriesDataset): Dataset with borders set.
        split (str): 'train', 'val' or 'test'.
        lookback (int): Input length L.
        horizon (int): Target length T.
        batch_size (int): Windows per batch.
        shuffle_seed (int, optional): Seed for a per-epoch permutation; None keeps index order.
        prefetch (int): When positive, batches are produced on a background thread
            holding up to this many batches ahead.
        dtype: Float type of the yielded arrays.

    Returns:
        iterator: WindowBatch objects.
    """
    if split not in dataset.borders:
        raise SplitError(f"Dataset has no '{split}' split; call make_splits first")
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    start, end = window_segment(dataset, split, lookback)
    if end - start < lookback + horizon:
        raise SplitError(f"split too short: '{split}' offers {end - start} steps, "
                         f"a window needs L+T = {lookback + horizon}")

    batches = _generate_batches(dataset, split, lookback, horizon, batch_size, shuffle_seed, dtype)
    if prefetch > 0:
        return iter(PrefetchQueue(batches, max_size=prefetch))
    return batches

import csv
import logging
import math
import os
from dataclasses import dataclass, field, replace
from datetime import datetime

import numpy as np

logger = logging.getLogger(__name__)

SPLITS = ('train', 'val', 'test')
PROFILES = ('etth', 'ettm', 'generic')
DEFAULT_RATIOS = (0.7, 0.1, 0.2)
STD_FLOOR = 1e-8

# (variables, timesteps) of the public benchmark files
BENCHMARK_SHAPES = {
    'weather': (21, 52696),
    'traffic': (862, 17544),
    'electricity': (321, 26304),
    'etth1': (7, 17420),
    'etth2': (7, 17420),
    'ettm1': (7, 69680),
    'ettm2': (7, 69680),
}

# Hour-resolution month used by the ETT split convention
_HOURS_PER_MONTH = 30 * 24


class DatasetError(ValueError):
    """Raised when a dataset file or split cannot be used."""


class CsvParseError(DatasetError):
    """
    Raised for a cell that is not a finite number. Row numbers count the header as row 1.
    """
    def __init__(self, path, row, column, column_label, value):
        self.path = path
        self.row = row
        self.column = column
        self.value = value
        super().__init__(f"{path}: row {row}, column {column} ('{column_label}'): "
                         f"cannot parse '{value}' as a finite number")


class SplitError(DatasetError):
    """Raised when a split is too short for the requested windows."""


@dataclass(frozen=True)
class Scaler:
    """
    Per-variable standardization statistics.
    """
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, values):
        """
        Fits mean/std per row of a [M, steps] matrix. Std is floored at 1e-8.
        """
        mean = values.mean(axis=1)
        std = np.maximum(values.std(axis=1), STD_FLOOR)
        return cls(mean, std)

    def transform(self, values):
        return (values - self.mean[:, None]) / self.std[:, None]

    def inverse_transform(self, values):
        return values * self.std[:, None] + self.mean[:, None]


@dataclass(frozen=True)
class SeriesDataset:
    """
    A multivariate series, one row per variable.

    Attributes:
        names (tuple): Variable names, M entries.
        values (np.ndarray): Values of shape [M, steps]; standardized once splits are made.
        frequency (str): Sampling interval label.
        timestamps (tuple): Timestamp strings, kept for reporting only.
        borders (dict): Split name -> (start, end) half-open range.
        scaler (Scaler): Statistics fitted on the train range.
        path (str): Source file.
    """
    names: tuple
    values: np.ndarray
    frequency: str = 'unknown'
    timestamps: tuple = ()
    borders: dict = field(default_factory=dict)
    scaler: Scaler = None
    path: str = None

    @property
    def num_variables(self):
        return self.values.shape[0]

    @property
    def total_steps(self):
        return self.values.shape[1]

    def split_length(self, split):
        start, end = self.borders[split]
        return end - start

    def split_values(self, split):
        start, end = self.borders[split]
        return self.values[:, start:end]

    def raw_values(self):
        """
        Values on the original scale.
        """
        if self.scaler is None:
            return self.values
        return self.scaler.inverse_transform(self.values)


def _infer_frequency(timestamps):
    if len(timestamps) < 2:
        return 'unknown'
    try:
        first = datetime.fromisoformat(timestamps[0])
        second = datetime.fromisoformat(timestamps[1])
    except ValueError:
        return 'unknown'
    minutes = int((second - first).total_seconds() // 60)
    if minutes <= 0:
        return 'unknown'
    if minutes % 60 == 0:
        hours = minutes // 60
        return f"{hours} Hour" if hours == 1 else f"{hours} Hours"
    return f"{minutes} Minutes"


def _check_header(path, header):
    if header is None:
        raise DatasetError(f"{path}: file is empty, expected a header row")
    if len(header) < 2:
        raise DatasetError(f"{path}: expected a timestamp column and at least one value column, "
                           f"header has {len(header)} column(s)")
    return tuple(h.strip() for h in header[1:])


def read_variable_names(path):
    """
    Reads only the header row of a dataset CSV.

    Args:
        path (str): Path to the file.

    Returns:
        tuple[str]: The value column names, one per variable.
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"Dataset file not found at {path}")
    try:
        with open(path, mode='r', newline='', encoding='utf-8') as f:
            return _check_header(path, next(csv.reader(f), None))
    except UnicodeDecodeError as e:
        raise DatasetError(f"{path}: not valid UTF-8 text ({e})") from None


def load_csv(path, max_steps=None):
    """
    Loads a CSV whose first column is a timestamp and whose remaining columns are numeric.

    Args:
        path (str): Path to the file.
        max_steps (int, optional): Keep only the first `max_steps` rows.

    Returns:
        SeriesDataset: Raw (unstandardized) values, one row per variable.
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"Dataset file not found at {path}")

    try:
        with open(path, mode='r', newline='', encoding='utf-8') as f:
            names, timestamps, rows = _read_rows(path, csv.reader(f), max_steps)
    except UnicodeDecodeError as e:
        raise DatasetError(f"{path}: not valid UTF-8 text ({e})") from None

    if not rows:
        raise DatasetError(f"{path}: no data rows")

    values = np.asarray(rows, dtype=np.float64).T.copy()
    dataset = SeriesDataset(
        names=names,
        values=values,
        frequency=_infer_frequency(timestamps),
        timestamps=tuple(timestamps),
        path=path,
    )
    _check_benchmark_shape(dataset, max_steps)
    logger.info(f"Loaded {path}: {dataset.num_variables} variables x {dataset.total_steps} steps "
                f"({dataset.frequency})")
    return dataset


def _read_rows(path, reader, max_steps):
    header = next(reader, None)
    names = _check_header(path, header)
    timestamps = []
    rows = []
    for line_no, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise DatasetError(f"{path}: row {line_no} has {len(row)} columns, header has {len(header)}")
        parsed = []
        for col, cell in enumerate(row[1:], start=1):
            try:
                value = float(cell)
            except ValueError:
                raise CsvParseError(path, line_no, col + 1, header[col], cell) from None
            # float() accepts nan and inf
            if not math.isfinite(value):
                raise CsvParseError(path, line_no, col + 1, header[col], cell)
            parsed.append(value)
        timestamps.append(row[0])
        rows.append(parsed)
        if max_steps is not None and len(rows) >= max_steps:
            break
    return names, timestamps, rows


def _check_benchmark_shape(dataset, max_steps):
    stem = os.path.splitext(os.path.basename(dataset.path))[0].lower()
    expected = BENCHMARK_SHAPES.get(stem)
    if expected is None:
        return
    variables, steps = expected
    if max_steps is not None:
        steps = min(steps, max_steps)
    if (dataset.num_variables, dataset.total_steps) != (variables, steps):
        logger.warning(f"{dataset.path} has shape {dataset.num_variables}x{dataset.total_steps}, "
                       f"the published benchmark has {variables}x{steps}")


def detect_profile(path):
    """
    Picks the split profile from a benchmark file name: ETTh* -> etth, ETTm* -> ettm, otherwise generic.
    """
    stem = os.path.basename(str(path)).lower()
    if stem.startswith('etth'):
        return 'etth'
    if stem.startswith('ettm'):
        return 'ettm'
    return 'generic'


def split_borders(total_steps, profile, ratios=DEFAULT_RATIOS):
    """
    Computes (start, end) ranges for train/val/test.

    ETT profiles use 12/4/4 months (hourly, or quarter-hourly for ettm);
    everything else splits by ratio.

    Args:
        total_steps (int): Series length.
        profile (str): 'etth', 'ettm' or 'generic'.
        ratios (tuple): Train/val/test fractions for the generic profile.

    Returns:
        dict: Split name -> (start, end).
    """
    if profile in ('etth', 'ettm'):
        month = _HOURS_PER_MONTH * (4 if profile == 'ettm' else 1)
        train_end = 12 * month
        val_end = train_end + 4 * month
        test_end = val_end + 4 * month
        if total_steps < test_end:
            raise SplitError(f"split too short: the {profile} profile needs {test_end} steps, "
                             f"dataset has {total_steps}")
        return {'train': (0, train_end), 'val': (train_end, val_end), 'test': (val_end, test_end)}

    if profile != 'generic':
        raise DatasetError(f"Unknown split profile '{profile}', expected one of {PROFILES}")

    if len(ratios) != 3 or any(r <= 0 for r in ratios) or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise DatasetError(f"Split ratios must be three positive fractions summing to 1, got {ratios}")
    num_train = int(total_steps * ratios[0])
    num_test = int(total_steps * ratios[2])
    num_val = total_steps - num_train - num_test
    return {
        'train': (0, num_train),
        'val': (num_train, num_train + num_val),
        'test': (total_steps - num_test, total_steps),
    }


def window_segment(dataset, split, lookback):
    """
    The index range windows of a split may draw from.

    Val and test inputs reach back `lookback` steps into the previous split;
    targets always stay inside the split.

    Returns:
        tuple: (start, end) half-open range.
    """
    start, end = dataset.borders[split]
    if split != 'train':
        start = max(0, start - lookback)
    return start, end


def make_splits(dataset, profile, ratios=DEFAULT_RATIOS, lookback=None, horizon=None):
    """
    Sets split borders, fits the scaler on the train range and standardizes all values.

    Args:
        dataset (SeriesDataset): Raw dataset from `load_csv`.
        profile (str): 'etth', 'ettm', 'generic' or 'auto'.
        ratios (tuple): Fractions for the generic profile.
        lookback (int, optional): When given with `horizon`, every split must fit one window.
        horizon (int, optional): Forecast length.

    Returns:
        SeriesDataset: A new dataset with borders, scaler and standardized values.
    """
    if profile == 'auto':
        profile = detect_profile(dataset.path or '')
    borders = split_borders(dataset.total_steps, profile, tuple(ratios))

    raw = dataset.raw_values()
    train_start, train_end = borders['train']
    scaler = Scaler.fit(raw[:, train_start:train_end])
    result = replace(dataset, values=scaler.transform(raw), borders=borders, scaler=scaler)

    if lookback is not None and horizon is not None:
        for split in SPLITS:
            start, end = window_segment(result, split, lookback)
            if end - start < lookback + horizon:
                raise SplitError(f"split too short: '{split}' offers {end - start} steps, "
                                 f"a window needs L+T = {lookback + horizon}")

    logger.info(f"Split profile {profile}: " + ", ".join(
        f"{name}=[{b[0]},{b[1]})" for name, b in borders.items()))
    return result

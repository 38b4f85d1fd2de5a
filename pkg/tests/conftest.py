import csv
import json
import math
from datetime import datetime, timedelta

import numpy as np
import pytest

from config import Config, RunConfig
from service.model import ModelConfig


def write_series_csv(path, values, names=None, start_hour=0):
    """
    Writes a dataset CSV: an hourly timestamp column followed by one column per variable.

    Args:
        path: Destination.
        values (np.ndarray): Shape [M, steps].
        names (list, optional): Column names; defaults to v0, v1, ...
    """
    values = np.asarray(values, dtype=np.float64)
    names = names or [f"v{i}" for i in range(values.shape[0])]
    lines = ["date," + ",".join(names)]
    for step in range(values.shape[1]):
        stamp = (datetime(2016, 7, 1) + timedelta(hours=start_hour + step)).isoformat(sep=" ")
        lines.append(stamp + "," + ",".join(repr(float(v)) for v in values[:, step]))
    with open(path, 'w') as f:
        f.write("\n".join(lines) + "\n")
    return str(path)


def read_kv(path):
    """Reads `key=value` records into a dict (later keys win)."""
    records = {}
    with open(path, 'r', encoding='utf-8') as f:
        for line in f:
            key, sep, value = line.rstrip('\n').partition('=')
            if sep:
                records[key] = value
    return records


def read_csv(path):
    """Reads a CSV into (header, rows) with every cell as a string."""
    with open(path, mode='r', newline='', encoding='utf-8') as f:
        reader = csv.reader(f)
        return next(reader), list(reader)


def sine_values(steps, variables=2, period=24, noise=0.0, seed=0):
    rng = np.random.default_rng(seed)
    t = np.arange(steps)
    rows = []
    for i in range(variables):
        row = (i + 1) * np.sin(2 * math.pi * t / period + i) + 0.5 * i
        if noise:
            row = row + noise * rng.standard_normal(steps)
        rows.append(row)
    return np.vstack(rows)


@pytest.fixture
def sine_csv(tmp_path):
    """Factory writing a sine dataset; returns its path."""
    def make(steps=200, variables=2, period=24, noise=0.0, seed=0, name='sine.csv'):
        return write_series_csv(tmp_path / name, sine_values(steps, variables, period, noise, seed))
    return make


@pytest.fixture
def tiny_model_config():
    return ModelConfig(lookback=16, horizon=3, patch_len=4, stride=2, dim=8, kernel=4, dropout=0.0, dtype='f64')


@pytest.fixture
def rng():
    return np.random.default_rng(23)


@pytest.fixture
def app_config(tmp_path, monkeypatch):
    """Application settings writing under tmp_path."""
    monkeypatch.delenv('PATCHMIXER_OUTPUT_ROOT', raising=False)
    path = tmp_path / 'config.json'
    path.write_text(json.dumps({
        'log_level': 'INFO',
        'output_root': str(tmp_path / 'runs'),
        'eval_workers': 1,
        'sweep_workers': 1,
        'prefetch_batches': 0,
        'nmi_max_bins': 64,
        'nmi_window_step': None,
        'checkpoint_name': 'checkpoint.txt',
        'report_assumptions': ['test run'],
    }))
    return Config(str(path))


TINY_RUN = {
    'profile': 'generic',
    'L': 16,
    'T': 4,
    'P': 4,
    'S': 2,
    'D': 8,
    'K': 4,
    'dropout': 0.1,
    'lr': 0.001,
    'batch_size': 32,
    'max_epochs': 2,
    'patience': 2,
    'dtype': 'f64',
    'seed': 7,
}


@pytest.fixture
def tiny_run_config(sine_csv):
    """Factory building a small RunConfig on a sine dataset."""
    def make(**overrides):
        values = dict(TINY_RUN)
        values.setdefault('dataset', sine_csv())
        values.update(overrides)
        return RunConfig(**RunConfig.parse_assignments([f"{k}={v}" for k, v in values.items()]))
    return make


@pytest.fixture
def run_config_file(tmp_path, sine_csv):
    """Factory writing a key=value run config file; returns its path."""
    def make(name='run.cfg', **overrides):
        values = dict(TINY_RUN)
        values['dataset'] = sine_csv()
        values['output_dir'] = str(tmp_path / 'out')
        values.update(overrides)
        path = tmp_path / name
        path.write_text("# tiny run\n" + "\n".join(f"{k}={v}" for k, v in values.items()) + "\n")
        return str(path)
    return make

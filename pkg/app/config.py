import json
import logging
import math
import os
from dataclasses import dataclass, field, fields, replace

logger = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = 'PATCHMIXER_OUTPUT_ROOT'


class ConfigError(ValueError):
    """
    A configuration problem tied to one key.
    """
    def __init__(self, key, message):
        self.key = key
        super().__init__(f"{key}: {message}")


class Config:
    """
    Application settings read from config.json.
    """
    def __init__(self, config_path='config.json'):
        self.config_path = config_path
        self.data = self._load_config()

    def _load_config(self):
        if not os.path.exists(self.config_path):
            raise FileNotFoundError(f"Config file not found at {self.config_path}")

        with open(self.config_path, 'r') as f:
            return json.load(f)

    @property
    def log_level(self):
        return self.data.get('log_level', 'INFO')

    @property
    def output_root(self):
        return os.environ.get(OUTPUT_ROOT_ENV) or self.data.get('output_root', 'runs')

    @property
    def eval_workers(self):
        return int(self.data.get('eval_workers', 1))

    @property
    def sweep_workers(self):
        return int(self.data.get('sweep_workers', 1))

    @property
    def prefetch_batches(self):
        return int(self.data.get('prefetch_batches', 0))

    @property
    def nmi_max_bins(self):
        return int(self.data.get('nmi_max_bins', 64))

    @property
    def nmi_window_step(self):
        return self.data.get('nmi_window_step')

    @property
    def checkpoint_name(self):
        return self.data.get('checkpoint_name', 'checkpoint.txt')

    @property
    def report_assumptions(self):
        return self.data.get('report_assumptions', [])


def _parse_bool(text):
    lowered = text.strip().lower()
    if lowered in ('true', '1', 'yes', 'on'):
        return True
    if lowered in ('false', '0', 'no', 'off'):
        return False
    raise ValueError(f"expected true/false, got '{text}'")


def _parse_ratios(text):
    return tuple(float(part) for part in text.split(','))


def _parse_optional_int(text):
    if text.strip().lower() in ('', 'none'):
        return None
    return int(text)


_PARSERS = {
    'int': int,
    'float': float,
    'str': str.strip,
    'bool': _parse_bool,
    'ratios': _parse_ratios,
    'optional_int': _parse_optional_int,
}


def _key(name, kind, default, key=None):
    return field(default=default, metadata={'key': key or name, 'kind': kind})


@dataclass(frozen=True)
class RunConfig:
    """
    A complete experiment description. File keys are listed in `keys()`;
    L, T, P, S, D and K map to the descriptive attribute names.
    """
    dataset: str = _key('dataset', 'str', '')
    profile: str = _key('profile', 'str', 'auto')
    ratios: tuple = _key('ratios', 'ratios', (0.7, 0.1, 0.2))
    max_steps: int = _key('max_steps', 'optional_int', None)
    lookback: int = _key('lookback', 'int', 336, key='L')
    horizon: int = _key('horizon', 'int', 96, key='T')
    patch_len: int = _key('patch_len', 'int', 16, key='P')
    stride: int = _key('stride', 'int', 8, key='S')
    dim: int = _key('dim', 'int', 256, key='D')
    kernel: int = _key('kernel', 'int', 8, key='K')
    depth: int = _key('depth', 'int', 1)
    block: bool = _key('block', 'bool', True)
    heads: str = _key('heads', 'str', 'dual')
    dropout: float = _key('dropout', 'float', 0.2)
    loss: str = _key('loss', 'str', 'mse_plus_mae')
    smooth_l1_beta: float = _key('smooth_l1_beta', 'float', 1.0)
    lr: float = _key('lr', 'float', 1e-4)
    beta1: float = _key('beta1', 'float', 0.9)
    beta2: float = _key('beta2', 'float', 0.999)
    eps: float = _key('eps', 'float', 1e-8)
    batch_size: int = _key('batch_size', 'int', 128)
    patience: int = _key('patience', 'int', 3)
    max_epochs: int = _key('max_epochs', 'int', 100)
    seed: int = _key('seed', 'int', 2021)
    dtype: str = _key('dtype', 'str', 'f32')
    output_dir: str = _key('output_dir', 'str', '')

    @classmethod
    def keys(cls):
        return [f.metadata['key'] for f in fields(cls)]

    @classmethod
    def _field_for_key(cls, key):
        for f in fields(cls):
            if f.metadata['key'] == key:
                return f
        raise ConfigError(key, f"unknown key, expected one of {cls.keys()}")

    @classmethod
    def parse_assignments(cls, lines, source='<config>'):
        """
        Parses `key=value` lines into attribute values.

        Args:
            lines (iterable): Lines of text; blank lines and '#' comments are skipped.
            source (str): Name used in error messages.

        Returns:
            dict: Attribute name -> typed value.
        """
        values = {}
        for line_no, raw in enumerate(lines, start=1):
            line = raw.split('#', 1)[0].strip()
            if not line:
                continue
            if '=' not in line:
                raise ConfigError(line, f"{source}:{line_no}: expected key=value")
            key, text = (part.strip() for part in line.split('=', 1))
            f = cls._field_for_key(key)
            try:
                values[f.name] = _PARSERS[f.metadata['kind']](text)
            except ValueError as e:
                raise ConfigError(key, f"{source}:{line_no}: invalid value '{text}' ({e})") from None
        return values

    @classmethod
    def from_file(cls, path, overrides=()):
        """
        Loads a key=value file and applies `overrides` on top.

        Args:
            path (str): Config file path.
            overrides (iterable): 'key=value' strings, applied in order.

        Returns:
            RunConfig: The merged (not yet validated) configuration.
        """
        if not os.path.exists(path):
            raise FileNotFoundError(f"Config file not found at {path}")
        with open(path, 'r', encoding='utf-8') as f:
            values = cls.parse_assignments(f.read().splitlines(), source=path)
        return cls(**values).with_overrides(overrides)

    def with_overrides(self, overrides):
        if not overrides:
            return self
        values = self.parse_assignments(overrides, source='--override')
        return replace(self, **values)

    def to_text(self):
        """
        Canonical serialization: every key, in declaration order.
        """
        lines = []
        for f in fields(self):
            lines.append(f"{f.metadata['key']}={self._format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    @staticmethod
    def _format(value):
        if isinstance(value, bool):
            return 'true' if value else 'false'
        if value is None:
            return 'none'
        if isinstance(value, tuple):
            return ','.join(repr(float(v)) for v in value)
        if isinstance(value, float):
            return repr(value)
        return str(value)

    def validate(self, check_paths=True):
        """
        Checks the configuration as a whole before any work starts.

        Args:
            check_paths (bool): Also require the dataset file to exist.

        Returns:
            RunConfig: self, for chaining.
        """
        from service.losses import LossKind
        from service.model import HEAD_MODES

        if not self.dataset:
            raise ConfigError('dataset', "no dataset path given")
        if check_paths and not os.path.exists(self.dataset):
            raise ConfigError('dataset', f"dataset file not found: {self.dataset}")
        if self.profile not in ('auto', 'etth', 'ettm', 'generic'):
            raise ConfigError('profile', f"expected auto, etth, ettm or generic, got '{self.profile}'")
        if len(self.ratios) != 3 or any(r <= 0 for r in self.ratios) \
                or not math.isclose(sum(self.ratios), 1.0, abs_tol=1e-9):
            raise ConfigError('ratios', f"expected three positive fractions summing to 1, got {self.ratios}")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError('max_steps', f"must be >= 1, got {self.max_steps}")
        if self.lookback < 2:
            raise ConfigError('L', f"must be >= 2, got {self.lookback}")
        if self.horizon < 1:
            raise ConfigError('T', f"must be >= 1, got {self.horizon}")
        if not 1 <= self.patch_len <= self.lookback:
            raise ConfigError('P', f"must satisfy 1 <= P <= L={self.lookback}, got {self.patch_len}")
        if self.stride < 1:
            raise ConfigError('S', f"must be >= 1, got {self.stride}")
        if self.dim < 1:
            raise ConfigError('D', f"must be >= 1, got {self.dim}")
        if self.kernel < 1:
            raise ConfigError('K', f"must be >= 1, got {self.kernel}")
        if self.heads not in HEAD_MODES:
            raise ConfigError('heads', f"expected one of {HEAD_MODES}, got '{self.heads}'")
        if self.block and self.heads != 'linear' and self.dim % self.kernel != 0:
            raise ConfigError('K', f"D={self.dim} is not divisible by K={self.kernel}")
        if self.depth != 1:
            raise ConfigError('depth', f"only one mixer block is supported, got {self.depth}")
        if not 0 <= self.dropout < 1:
            raise ConfigError('dropout', f"must be in [0, 1), got {self.dropout}")
        if self.loss not in [k.value for k in LossKind]:
            raise ConfigError('loss', f"expected one of {[k.value for k in LossKind]}, got '{self.loss}'")
        if self.smooth_l1_beta <= 0:
            raise ConfigError('smooth_l1_beta', f"must be > 0, got {self.smooth_l1_beta}")
        if self.lr < 0:
            raise ConfigError('lr', f"must be >= 0, got {self.lr}")
        for key in ('beta1', 'beta2'):
            if not 0 <= getattr(self, key) < 1:
                raise ConfigError(key, f"must be in [0, 1), got {getattr(self, key)}")
        if self.eps <= 0:
            raise ConfigError('eps', f"must be > 0, got {self.eps}")
        for key in ('batch_size', 'patience', 'max_epochs'):
            if getattr(self, key) < 1:
                raise ConfigError(key, f"must be >= 1, got {getattr(self, key)}")
        if self.dtype not in ('f32', 'f64'):
            raise ConfigError('dtype', f"expected f32 or f64, got '{self.dtype}'")
        return self

    def model_config(self):
        from service.model import ModelConfig
        return ModelConfig(
            lookback=self.lookback,
            horizon=self.horizon,
            patch_len=self.patch_len,
            stride=self.stride,
            dim=self.dim,
            kernel=self.kernel,
            dropout=self.dropout,
            heads=self.heads,
            block=self.block,
            depth=self.depth,
            dtype=self.dtype,
        )

    def loss_spec(self):
        from service.losses import LossSpec
        return LossSpec.from_name(self.loss, self.smooth_l1_beta)

    def run_name(self):
        stem = os.path.splitext(os.path.basename(self.dataset))[0] or 'run'
        return f"{stem}_L{self.lookback}_T{self.horizon}_{self.heads}_{self.loss}_s{self.seed}"

    def resolve_output_dir(self, output_root):
        """
        The run directory: `output_dir` if absolute, otherwise under `output_root`.
        """
        target = self.output_dir or self.run_name()
        if os.path.isabs(target):
            return target
        return os.path.join(output_root, target)

import logging
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from numerics import ops
from numerics.ops import BatchNormState
from numerics.tensor import Node, Parameter, ShapeError, resolve_dtype
from service.patching import PatchConfig, pad_series, unfold, embed, init_embedding, uniform_parameter

logger = logging.getLogger(__name__)

HEAD_MODES = ('dual', 'linear', 'mlp')
INSTANCE_NORM_EPS = 1e-5


class ModelConfigError(ValueError):
    """Raised when model hyperparameters cannot form a valid network."""


class StageError(RuntimeError):
    """
    Wraps a failure inside one forward stage.
    """
    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"forward stage '{stage}' failed: {cause}")


@contextmanager
def _stage(name):
    try:
        yield
    except StageError:
        raise
    except Exception as e:
        raise StageError(name, e) from e


@dataclass(frozen=True)
class ModelConfig:
    """
    Hyperparameters of a PatchMixer network.

    Attributes:
        lookback (int): L.
        horizon (int): T.
        patch_len (int): P.
        stride (int): S.
        dim (int): Embedding dimension D.
        kernel (int): Depthwise kernel size and step K.
        dropout (float): Dropout rate on the embedding.
        heads (str): 'dual', 'linear' or 'mlp'.
        block (bool): Whether the mixer block runs before the MLP head.
        depth (int): Number of mixer blocks; only 1 is supported.
        dtype (str): 'f32' or 'f64'.
    """
    lookback: int
    horizon: int
    patch_len: int = 16
    stride: int = 8
    dim: int = 256
    kernel: int = 8
    dropout: float = 0.2
    heads: str = 'dual'
    block: bool = True
    depth: int = 1
    dtype: str = 'f32'

    def __post_init__(self):
        if self.horizon < 1:
            raise ModelConfigError(f"horizon must be >= 1, got T={self.horizon}")
        if self.heads not in HEAD_MODES:
            raise ModelConfigError(f"heads must be one of {HEAD_MODES}, got '{self.heads}'")
        if self.depth != 1:
            raise ModelConfigError(f"only one mixer block is supported, got depth={self.depth}")
        if self.kernel < 1:
            raise ModelConfigError(f"kernel must be >= 1, got K={self.kernel}")
        if self.uses_block and self.dim % self.kernel != 0:
            raise ModelConfigError(f"D={self.dim} is not divisible by K={self.kernel}")
        if not 0 <= self.dropout < 1:
            raise ModelConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        resolve_dtype(self.dtype)
        # validates L, P, S, D
        self.patch_config

    @property
    def patch_config(self):
        return PatchConfig(self.lookback, self.patch_len, self.stride, self.dim)

    @property
    def num_patches(self):
        return self.patch_config.num_patches

    @property
    def block_dim(self):
        return self.dim // self.kernel

    @property
    def uses_block(self):
        return self.block and self.heads != 'linear'

    @property
    def mlp_in_features(self):
        width = self.block_dim if self.uses_block else self.dim
        return self.num_patches * width


@dataclass(frozen=True)
class InstanceNormState:
    """
    Per-window statistics removed before patching and restored after forecasting.

    Attributes:
        mu (np.ndarray): Shape [B, 1].
        sigma (np.ndarray): Shape [B, 1], sqrt(var + eps).
        eps (float): Variance floor.
    """
    mu: np.ndarray
    sigma: np.ndarray
    eps: float = INSTANCE_NORM_EPS


def instance_normalize(x, eps=INSTANCE_NORM_EPS):
    """
    Standardizes each window by its own mean and population std.

    Args:
        x (np.ndarray): Windows of shape [B, L], L >= 2.
        eps (float): Added to the variance.

    Returns:
        tuple: (normalized windows, InstanceNormState)
    """
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[-1] < 2:
        raise ShapeError(f"instance normalization needs windows of shape [B, L] with L >= 2, got {x.shape}")
    mu = x.mean(axis=-1, keepdims=True)
    sigma = np.sqrt(x.var(axis=-1, keepdims=True) + eps)
    return (x - mu) / sigma, InstanceNormState(mu, sigma, eps)


def denormalize(y, state):
    """
    Restores the window scale on a forecast: y * sigma + mu.

    Args:
        y: Node or array of shape [B, T].
        state (InstanceNormState): Statistics from `instance_normalize`.

    Returns:
        Node: Forecast on the input scale.
    """
    return ops.affine_const(y, state.sigma, state.mu)


class PatchMixerModel:
    """
    Instance norm, patch embedding, one depthwise-separable mixer block and dual forecasting heads.

    Tensor layout inside the block: patches are channels (N) and the embedding
    is the spatial axis (D).
    """
    def __init__(self, cfg, rng, dropout_rng=None):
        """
        Initializes the PatchMixerModel.

        Args:
            cfg (ModelConfig): Hyperparameters.
            rng (np.random.Generator): Generator for weight initialization.
            dropout_rng (np.random.Generator, optional): Generator for dropout masks.
        """
        self.cfg = cfg
        self.dtype = resolve_dtype(cfg.dtype)
        self.dropout_rng = dropout_rng if dropout_rng is not None else np.random.default_rng(0)
        self.training = True
        self.params = {}
        self.bn_states = {}

        n = cfg.num_patches
        d = cfg.dim
        t = cfg.horizon
        k = cfg.kernel
        d_b = cfg.block_dim

        self._add(*init_embedding(cfg.patch_config, rng, self.dtype))

        if cfg.uses_block:
            self._add(uniform_parameter(rng, (n, 1, k), k, 'depthwise.weight', self.dtype))
            self._add(uniform_parameter(rng, (n,), k, 'depthwise.bias', self.dtype))
            self._add_batchnorm('bn1', n)
            self._add(uniform_parameter(rng, (n, n, 1), n, 'pointwise.weight', self.dtype))
            self._add(uniform_parameter(rng, (n,), n, 'pointwise.bias', self.dtype))
            self._add_batchnorm('bn2', n)

        if cfg.heads in ('dual', 'mlp'):
            fan_in = cfg.mlp_in_features
            self._add(uniform_parameter(rng, (fan_in, 2 * t), fan_in, 'mlp.w1', self.dtype))
            self._add(uniform_parameter(rng, (2 * t,), fan_in, 'mlp.b1', self.dtype))
            self._add(uniform_parameter(rng, (2 * t, t), 2 * t, 'mlp.w2', self.dtype))
            self._add(uniform_parameter(rng, (t,), 2 * t, 'mlp.b2', self.dtype))

        if cfg.heads in ('dual', 'linear'):
            fan_in = n * d
            self._add(uniform_parameter(rng, (fan_in, t), fan_in, 'linear_head.weight', self.dtype))
            self._add(uniform_parameter(rng, (t,), fan_in, 'linear_head.bias', self.dtype))

        if cfg.uses_block:
            # depthwise output is D/K long, so doubling D doubles it
            assert d_b * k == d
        if cfg.block and not cfg.uses_block:
            logger.info("Linear-only heads ignore the mixer block; it is not built")
        logger.debug(f"Built PatchMixerModel N={n} D={d} K={k} T={t}: {self.parameter_count()} parameters")

    def _add(self, *params):
        for param in params:
            self.params[param.name] = param

    def _add_batchnorm(self, prefix, channels):
        self._add(Parameter(np.ones(channels, dtype=self.dtype), name=f"{prefix}.gamma"),
                  Parameter(np.zeros(channels, dtype=self.dtype), name=f"{prefix}.beta"))
        self.bn_states[prefix] = BatchNormState.fresh(channels, dtype=self.dtype)

    def parameters(self):
        return list(self.params.values())

    def parameter_count(self):
        return int(sum(p.value.size for p in self.params.values()))

    def train(self):
        self.training = True
        return self

    def eval(self):
        self.training = False
        return self

    def zero_grad(self):
        for param in self.params.values():
            param.zero_grad()

    def _batchnorm(self, x, prefix):
        p = self.params
        return ops.batchnorm1d(x, p[f"{prefix}.gamma"], p[f"{prefix}.beta"], self.bn_states[prefix], self.training)

    def mixer_block(self, embedded):
        """
        Depthwise stage over D (kernel = step = K, one group per patch), GELU and batch norm,
        then a pointwise N -> N channel mixer with GELU and batch norm, added to the depthwise output.

        Args:
            embedded: Embedding of shape [B, N, D] (or [N, D]).

        Returns:
            Node: Shape [B, N, D/K] (or [N, D/K]).
        """
        if not self.cfg.uses_block:
            raise ModelConfigError("this model was built without a mixer block")
        p = self.params
        single = embedded.ndim == 2
        if single:
            embedded = ops.reshape(embedded, (1,) + tuple(embedded.shape))

        n = self.cfg.num_patches
        depthwise = ops.grouped_conv1d(embedded, p['depthwise.weight'], p['depthwise.bias'],
                                       stride=self.cfg.kernel, groups=n)
        depthwise = self._batchnorm(ops.gelu(depthwise), 'bn1')

        pointwise = ops.grouped_conv1d(depthwise, p['pointwise.weight'], p['pointwise.bias'], stride=1, groups=1)
        pointwise = self._batchnorm(ops.gelu(pointwise), 'bn2')

        out = ops.add(depthwise, pointwise)
        if single:
            out = ops.reshape(out, out.shape[1:])
        return out

    def dual_heads(self, embedded, mixed):
        """
        Sums a linear head on the flattened embedding (N*D -> T) and an MLP head
        on the flattened block output (N*D_b -> 2T -> T). With `heads` set to
        'linear' or 'mlp' only that head is used.

        Args:
            embedded: [B, N, D] (or [N, D]).
            mixed: [B, N, D_b] (or [N, D_b]); ignored by the linear head.

        Returns:
            Node: [B, T] (or [T]).
        """
        p = self.params
        single = embedded.ndim == 2
        batch = 1 if single else embedded.shape[0]
        outputs = []

        if self.cfg.heads in ('dual', 'linear'):
            flat = ops.reshape(embedded, (batch, int(np.prod(embedded.shape[-2:]))))
            outputs.append(ops.linear(flat, p['linear_head.weight'], p['linear_head.bias']))

        if self.cfg.heads in ('dual', 'mlp'):
            flat = ops.reshape(mixed, (batch, int(np.prod(mixed.shape[-2:]))))
            hidden = ops.gelu(ops.linear(flat, p['mlp.w1'], p['mlp.b1']))
            outputs.append(ops.linear(hidden, p['mlp.w2'], p['mlp.b2']))

        out = outputs[0] if len(outputs) == 1 else ops.add(outputs[0], outputs[1])
        if single:
            out = ops.reshape(out, (self.cfg.horizon,))
        return out

    def forward(self, x):
        """
        Forecasts T steps for each window.

        instance_normalize -> pad -> unfold -> embed -> dropout -> mixer_block -> heads -> denormalize

        Args:
            x (np.ndarray): Windows of shape [B, L] (one row per variable window).

        Returns:
            Node: Forecasts of shape [B, T] on the input scale.
        """
        cfg = self.cfg
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != cfg.lookback:
            raise ShapeError(f"model expects windows of shape [B, {cfg.lookback}], got {x.shape}")

        with _stage('instance_norm'):
            normalized, norm_state = instance_normalize(x)
        with _stage('pad'):
            padded = pad_series(Node(normalized.astype(self.dtype)), cfg.stride)
        with _stage('unfold'):
            patches = unfold(padded, cfg.patch_len, cfg.stride, keep_batch=True)
        with _stage('embed'):
            embedded = embed(patches, self.params['embed.weight'], self.params['embed.bias'])
        with _stage('dropout'):
            embedded = ops.dropout(embedded, cfg.dropout, self.dropout_rng, self.training)
        with _stage('mixer_block'):
            mixed = self.mixer_block(embedded) if cfg.uses_block else embedded
        with _stage('heads'):
            out = self.dual_heads(embedded, mixed)
        with _stage('denormalize'):
            return denormalize(out, norm_state)

    __call__ = forward

    def state_dict(self):
        """
        Parameter values and batch-norm running statistics, in a fixed order.

        Returns:
            dict: Name -> np.ndarray copy.
        """
        state = {name: param.value.copy() for name, param in self.params.items()}
        for prefix, bn in self.bn_states.items():
            state[f"{prefix}.running_mean"] = bn.running_mean.copy()
            state[f"{prefix}.running_var"] = bn.running_var.copy()
        return state

    def load_state_dict(self, state):
        """
        Restores values produced by `state_dict`.

        Args:
            state (dict): Name -> array.
        """
        expected = set(self.state_dict())
        missing = expected - set(state)
        unexpected = set(state) - expected
        if missing or unexpected:
            raise ModelConfigError(f"state does not match model: missing {sorted(missing)}, "
                                   f"unexpected {sorted(unexpected)}")
        for name, param in self.params.items():
            param.assign(state[name])
        for prefix, bn in self.bn_states.items():
            bn.running_mean[...] = state[f"{prefix}.running_mean"]
            bn.running_var[...] = state[f"{prefix}.running_var"]

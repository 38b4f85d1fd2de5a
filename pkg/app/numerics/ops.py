import logging
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from numerics.tensor import Node, ShapeError, GroupingError, make_node, as_tensor

logger = logging.getLogger(__name__)

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _node(x):
    return x if isinstance(x, Node) else Node(as_tensor(x))


def _require_same_shape(a, b, op):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not match")


def add(a, b):
    """
    Elementwise sum. `b` may also be a vector matching the last axis of `a` (bias-add).

    Args:
        a: Node or array.
        b: Node or array.

    Returns:
        Node: a + b.
    """
    a, b = _node(a), _node(b)
    if a.shape == b.shape:
        def backward_fn(g):
            return g, g
        return make_node(a.value + b.value, (a, b), 'add', backward_fn)

    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        def backward_bias(g):
            return g, g.reshape(-1, b.shape[0]).sum(axis=0)
        return make_node(a.value + b.value, (a, b), 'bias_add', backward_bias)

    raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not match and are not a bias-add")


def sub(a, b):
    a, b = _node(a), _node(b)
    _require_same_shape(a, b, 'sub')

    def backward_fn(g):
        return g, -g
    return make_node(a.value - b.value, (a, b), 'sub', backward_fn)


def mul(a, b):
    a, b = _node(a), _node(b)
    _require_same_shape(a, b, 'mul')

    def backward_fn(g):
        return g * b.value, g * a.value
    return make_node(a.value * b.value, (a, b), 'mul', backward_fn)


def scale(a, factor):
    """
    Multiplies by a Python scalar.
    """
    a = _node(a)
    factor = float(factor)

    def backward_fn(g):
        return (g * factor,)
    return make_node(a.value * a.dtype.type(factor), (a,), 'scale', backward_fn)


def square(a):
    a = _node(a)

    def backward_fn(g):
        return (2 * g * a.value,)
    return make_node(a.value * a.value, (a,), 'square', backward_fn)


def absolute(a):
    """
    Elementwise |a|. The gradient at 0 is 0.
    """
    a = _node(a)

    def backward_fn(g):
        return (g * np.sign(a.value),)
    return make_node(np.abs(a.value), (a,), 'abs', backward_fn)


def sum_all(a):
    a = _node(a)

    def backward_fn(g):
        return (np.full_like(a.value, g),)
    return make_node(np.sum(a.value, dtype=a.dtype), (a,), 'sum', backward_fn)


def mean_all(a):
    a = _node(a)
    count = a.value.size

    def backward_fn(g):
        return (np.full_like(a.value, g / count),)
    return make_node(np.mean(a.value, dtype=a.dtype), (a,), 'mean', backward_fn)


def reshape(a, shape):
    a = _node(a)
    shape = tuple(shape)
    if int(np.prod(shape)) != a.value.size:
        raise ShapeError(f"reshape: cannot view shape {a.shape} as {shape}")

    def backward_fn(g):
        return (g.reshape(a.shape),)
    return make_node(a.value.reshape(shape), (a,), 'reshape', backward_fn)


def affine_const(a, multiplier, offset):
    """
    Computes a * multiplier + offset with constant per-row statistics.

    Args:
        a (Node): Input of shape [..., n].
        multiplier (np.ndarray): Constant of shape [..., 1].
        offset (np.ndarray): Constant of shape [..., 1].

    Returns:
        Node: Affinely transformed values; gradients flow to `a` only.
    """
    a = _node(a)
    expected = a.shape[:-1] + (1,)
    if multiplier.shape != expected or offset.shape != expected:
        raise ShapeError(f"affine_const: statistics must have shape {expected}, "
                         f"got {multiplier.shape} and {offset.shape}")
    multiplier = multiplier.astype(a.dtype, copy=False)
    offset = offset.astype(a.dtype, copy=False)

    def backward_fn(g):
        return (g * multiplier,)
    return make_node(a.value * multiplier + offset, (a,), 'affine_const', backward_fn)


def linear(x, weight, bias=None):
    """
    Applies y = xW + b over the last axis of x.

    Args:
        x: Input of shape [..., in].
        weight: Weights of shape [in, out].
        bias: Optional bias of shape [out].

    Returns:
        Node: Output of shape [..., out].
    """
    x, weight = _node(x), _node(weight)
    if weight.ndim != 2 or x.ndim < 1 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input shape {x.shape} is incompatible with weight shape {weight.shape}")
    parents = (x, weight)
    if bias is not None:
        bias = _node(bias)
        if bias.shape != (weight.shape[1],):
            raise ShapeError(f"linear: bias shape {bias.shape} does not match weight shape {weight.shape}")
        parents = parents + (bias,)

    out = x.value @ weight.value
    if bias is not None:
        out = out + bias.value

    def backward_fn(g):
        g2 = g.reshape(-1, weight.shape[1])
        x2 = x.value.reshape(-1, weight.shape[0])
        grads = ((g @ weight.value.T), x2.T @ g2)
        if bias is not None:
            grads = grads + (g2.sum(axis=0),)
        return grads
    return make_node(out, parents, 'linear', backward_fn)


def output_length(length, kernel_size, stride):
    """
    Output length of an unpadded sliding window: floor((length - kernel_size) / stride) + 1.
    """
    return (length - kernel_size) // stride + 1


def grouped_conv1d(x, kernels, bias=None, stride=1, groups=1):
    """
    Grouped 1-D cross-correlation without padding.

    groups=C gives a depthwise convolution; kernel size 1 with groups=1 is a
    pointwise (1x1) channel mixer.

    Args:
        x: Input of shape [C, L] or [B, C, L].
        kernels: Weights of shape [C_out, C / groups, K].
        bias: Optional bias of shape [C_out].
        stride (int): Step between window starts.
        groups (int): Number of channel groups.

    Returns:
        Node: Output of shape [C_out, L_out] or [B, C_out, L_out].
    """
    x, kernels = _node(x), _node(kernels)
    if x.ndim not in (2, 3):
        raise ShapeError(f"grouped_conv1d: expected input [C, L] or [B, C, L], got {x.shape}")
    if kernels.ndim != 3:
        raise ShapeError(f"grouped_conv1d: expected kernels [C_out, C_in/groups, K], got {kernels.shape}")
    if stride < 1:
        raise ShapeError(f"grouped_conv1d: stride must be >= 1, got {stride}")
    if groups < 1:
        raise GroupingError(f"grouped_conv1d: groups must be >= 1, got {groups}")

    batched = x.ndim == 3
    xb = x.value if batched else x.value[None]
    batch, channels, length = xb.shape
    out_channels, group_in, kernel_size = kernels.shape

    if channels % groups != 0:
        raise GroupingError(f"grouped_conv1d: {channels} input channels are not divisible by groups={groups}")
    if out_channels % groups != 0:
        raise GroupingError(f"grouped_conv1d: {out_channels} output channels are not divisible by groups={groups}")
    if group_in != channels // groups:
        raise ShapeError(f"grouped_conv1d: kernels expect {group_in} channels per group, "
                         f"input provides {channels // groups}")
    if length < kernel_size:
        raise ShapeError(f"grouped_conv1d: input shorter than kernel ({length} < {kernel_size})")

    parents = (x, kernels)
    if bias is not None:
        bias = _node(bias)
        if bias.shape != (out_channels,):
            raise ShapeError(f"grouped_conv1d: bias shape {bias.shape} does not match {out_channels} output channels")
        parents = parents + (bias,)

    out_len = output_length(length, kernel_size, stride)
    group_out = out_channels // groups

    windows = sliding_window_view(xb, kernel_size, axis=2)[:, :, ::stride, :][:, :, :out_len]
    windows = windows.reshape(batch, groups, group_in, out_len, kernel_size)
    grouped_kernels = kernels.value.reshape(groups, group_out, group_in, kernel_size)

    out = np.einsum('bgclk,gock->bgol', windows, grouped_kernels, optimize=True)
    out = out.reshape(batch, out_channels, out_len)
    if bias is not None:
        out = out + bias.value[None, :, None]
    if not batched:
        out = out[0]

    def backward_fn(g):
        gb = g if batched else g[None]
        gg = gb.reshape(batch, groups, group_out, out_len)

        d_kernels = np.einsum('bgclk,bgol->gock', windows, gg, optimize=True)
        d_windows = np.einsum('bgol,gock->bgclk', gg, grouped_kernels, optimize=True)
        d_windows = d_windows.reshape(batch, channels, out_len, kernel_size)

        dx = np.zeros_like(xb)
        span = stride * (out_len - 1) + 1
        for k in range(kernel_size):
            dx[:, :, k:k + span:stride] += d_windows[:, :, :, k]

        grads = (dx if batched else dx[0], d_kernels.reshape(kernels.shape))
        if bias is not None:
            grads = grads + (gb.sum(axis=(0, 2)),)
        return grads
    return make_node(out, parents, 'grouped_conv1d', backward_fn)


def gelu(x):
    """
    Exact GELU, x * Phi(x), using the error function.
    """
    x = _node(x)
    cdf = 0.5 * (1.0 + erf(x.value * _INV_SQRT2))

    def backward_fn(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x.value * x.value)
        return (g * (cdf + x.value * pdf),)
    return make_node(x.value * cdf, (x,), 'gelu', backward_fn)


@dataclass
class BatchNormState:
    """
    Running statistics of a batch-norm layer.
    """
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5
    batches_tracked: int = field(default=0)

    @classmethod
    def fresh(cls, channels, dtype=np.float64, momentum=0.1, eps=1e-5):
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype), momentum, eps)


def batchnorm1d(x, gamma, beta, state, training=True):
    """
    Batch normalization over (batch, length) for each channel of a [B, C, L] input.

    Training mode uses batch statistics and updates `state` with momentum
    (unbiased variance for the running estimate). Eval mode uses the running
    statistics.

    Args:
        x: Input of shape [B, C, L].
        gamma: Scale of shape [C].
        beta: Shift of shape [C].
        state (BatchNormState): Running statistics, updated in place in training mode.
        training (bool): Selects batch or running statistics.

    Returns:
        Node: Normalized output of shape [B, C, L].
    """
    x, gamma, beta = _node(x), _node(gamma), _node(beta)
    if x.ndim != 3:
        raise ShapeError(f"batchnorm1d: expected input [B, C, L], got {x.shape}")
    channels = x.shape[1]
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise ShapeError(f"batchnorm1d: parameters {gamma.shape}/{beta.shape} do not match {channels} channels")
    if state.running_mean.shape != (channels,):
        raise ShapeError(f"batchnorm1d: running statistics have {state.running_mean.shape[0]} channels, "
                         f"input has {channels}")

    axes = (0, 2)
    g_scale = gamma.value[None, :, None]
    g_shift = beta.value[None, :, None]

    if training:
        count = x.shape[0] * x.shape[2]
        mean = x.value.mean(axis=axes)
        var = x.value.var(axis=axes)
        inv_std = 1.0 / np.sqrt(var + state.eps)
        x_hat = (x.value - mean[None, :, None]) * inv_std[None, :, None]

        unbiased = var * count / (count - 1) if count > 1 else var
        m = state.momentum
        state.running_mean[...] = (1 - m) * state.running_mean + m * mean
        state.running_var[...] = (1 - m) * state.running_var + m * unbiased
        state.batches_tracked += 1

        def backward_fn(g):
            d_xhat = g * g_scale
            d_x = (inv_std[None, :, None] / count) * (
                count * d_xhat
                - d_xhat.sum(axis=axes, keepdims=True)
                - x_hat * (d_xhat * x_hat).sum(axis=axes, keepdims=True)
            )
            return d_x, (g * x_hat).sum(axis=axes), g.sum(axis=axes)
    else:
        inv_std = 1.0 / np.sqrt(state.running_var + state.eps)
        x_hat = (x.value - state.running_mean[None, :, None]) * inv_std[None, :, None]

        def backward_fn(g):
            return g * g_scale * inv_std[None, :, None], (g * x_hat).sum(axis=axes), g.sum(axis=axes)

    out = (x_hat * g_scale + g_shift).astype(x.dtype, copy=False)
    return make_node(out, (x, gamma, beta), 'batchnorm1d', backward_fn)


def dropout(x, rate, rng, training=True):
    """
    Inverted dropout. Identity when `training` is False or `rate` is 0.

    Args:
        x (Node): Input.
        rate (float): Drop probability in [0, 1).
        rng (np.random.Generator): Source of the mask.
        training (bool): Whether to drop.

    Returns:
        Node: Masked and rescaled input.
    """
    x = _node(x)
    if not training or rate == 0:
        return x
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    mask = ((rng.random(x.shape) >= rate) / (1.0 - rate)).astype(x.dtype)

    def backward_fn(g):
        return (g * mask,)
    return make_node(x.value * mask, (x,), 'dropout', backward_fn)


def pad_replicate_last(x, count):
    """
    Appends `count` copies of the final element along the last axis.
    """
    x = _node(x)
    if count < 0:
        raise ShapeError(f"pad_replicate_last: count must be >= 0, got {count}")
    length = x.shape[-1]
    tail = np.repeat(x.value[..., -1:], count, axis=-1)
    out = np.concatenate([x.value, tail], axis=-1)

    def backward_fn(g):
        dx = g[..., :length].copy()
        dx[..., -1] += g[..., length:].sum(axis=-1)
        return (dx,)
    return make_node(out, (x,), 'pad_replicate', backward_fn)


def unfold_last(x, size, step):
    """
    Extracts windows of `size` every `step` along the last axis.

    Args:
        x (Node): Input of shape [..., n].
        size (int): Window length.
        step (int): Window stride.

    Returns:
        Node: Windows of shape [..., count, size].
    """
    x = _node(x)
    length = x.shape[-1]
    if size < 1 or step < 1:
        raise ShapeError(f"unfold_last: size and step must be >= 1, got size={size}, step={step}")
    if size > length:
        raise ShapeError(f"unfold_last: window {size} is longer than input {length}")
    count = output_length(length, size, step)
    out = sliding_window_view(x.value, size, axis=-1)[..., ::step, :][..., :count, :].copy()

    def backward_fn(g):
        dx = np.zeros_like(x.value)
        span = step * (count - 1) + 1
        for i in range(size):
            dx[..., i:i + span:step] += g[..., :, i]
        return (dx,)
    return make_node(out, (x,), 'unfold', backward_fn)


def smooth_l1_elementwise(d, beta=1.0):
    """
    Huber-style penalty: 0.5 * d^2 / beta where |d| < beta, |d| - 0.5 * beta elsewhere.
    """
    d = _node(d)
    if beta <= 0:
        raise ValueError(f"smooth_l1 beta must be positive, got {beta}")
    magnitude = np.abs(d.value)
    inside = magnitude < beta
    out = np.where(inside, 0.5 * d.value * d.value / beta, magnitude - 0.5 * beta).astype(d.dtype, copy=False)

    def backward_fn(g):
        return (g * np.where(inside, d.value / beta, np.sign(d.value)),)
    return make_node(out, (d,), 'smooth_l1', backward_fn)

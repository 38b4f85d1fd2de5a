import logging
import math
from dataclasses import dataclass

import numpy as np

from numerics import ops
from numerics.tensor import Parameter, ShapeError

logger = logging.getLogger(__name__)


class PatchingError(ValueError):
    """Raised for patch settings that cannot be applied to the series."""


def patch_count(lookback, patch_len, stride):
    """
    Patches produced from a series of `lookback` steps padded with `stride` copies of its last value.

    Returns:
        int: floor((L - P) / S) + 2.
    """
    return (lookback - patch_len) // stride + 2


@dataclass(frozen=True)
class PatchConfig:
    """
    Patching and embedding sizes.

    Attributes:
        lookback (int): Look-back length L.
        patch_len (int): Patch length P.
        stride (int): Patch stride S.
        dim (int): Embedding dimension D.
    """
    lookback: int
    patch_len: int = 16
    stride: int = 8
    dim: int = 256

    def __post_init__(self):
        if self.lookback < 1:
            raise PatchingError(f"look-back length must be >= 1, got L={self.lookback}")
        if not 1 <= self.patch_len <= self.lookback:
            raise PatchingError(f"patch length must satisfy 1 <= P <= L, got P={self.patch_len}, L={self.lookback}")
        if self.stride < 1:
            raise PatchingError(f"stride must be >= 1, got S={self.stride}")
        if self.dim < 1:
            raise PatchingError(f"embedding dimension must be >= 1, got D={self.dim}")

    @property
    def num_patches(self):
        return patch_count(self.lookback, self.patch_len, self.stride)


def pad_series(x, stride):
    """
    Extends each series by repeating its final value `stride` times.

    Args:
        x: Series of shape [1, L] (or [B, L]).
        stride (int): Number of copies S.

    Returns:
        Node: Shape [..., L + S].
    """
    return ops.pad_replicate_last(x, stride)


def unfold(x_padded, patch_len, stride, keep_batch=False):
    """
    Cuts a padded series into patches; row i covers [i*S, i*S + P).

    Args:
        x_padded: Series of shape [1, L + S] (or [B, L + S]).
        patch_len (int): P.
        stride (int): S.
        keep_batch (bool): Keep the leading axis even when it has size 1.

    Returns:
        Node: [N, P] for a single series, [B, N, P] for a batch.
    """
    length = x_padded.shape[-1]
    if patch_len > length:
        raise PatchingError(f"patch length {patch_len} exceeds padded series length {length}")
    try:
        patches = ops.unfold_last(x_padded, patch_len, stride)
    except ShapeError as e:
        raise PatchingError(str(e)) from e
    if not keep_batch and patches.ndim == 3 and patches.shape[0] == 1:
        return ops.reshape(patches, patches.shape[1:])
    return patches


def embed(patches, weight, bias):
    """
    Projects every patch to D dimensions with one shared linear map. No positional encoding is added.

    Args:
        patches: [N, P] or [B, N, P].
        weight: [P, D].
        bias: [D].

    Returns:
        Node: [N, D] or [B, N, D].
    """
    return ops.linear(patches, weight, bias)


def uniform_parameter(rng, shape, fan_in, name, dtype):
    """
    Parameter drawn uniformly from +-1/sqrt(fan_in).
    """
    bound = 1.0 / math.sqrt(fan_in)
    return Parameter(rng.uniform(-bound, bound, size=shape).astype(dtype), name=name)


def init_embedding(cfg, rng, dtype=np.float32):
    """
    Creates the embedding weight [P, D] and bias [D].
    """
    weight = uniform_parameter(rng, (cfg.patch_len, cfg.dim), cfg.patch_len, 'embed.weight', dtype)
    bias = uniform_parameter(rng, (cfg.dim,), cfg.patch_len, 'embed.bias', dtype)
    return weight, bias

import logging

import numpy as np

from numerics.tensor import Node, backward, no_grad

logger = logging.getLogger(__name__)


def _scalar(value):
    if isinstance(value, Node):
        return value.item()
    return float(value)


def numeric_gradient(fn, param, h=1e-5):
    """
    Central finite-difference gradient of a scalar function with respect to one leaf.

    Args:
        fn (callable): Zero-argument function returning a scalar Node or float.
        param (Node): The leaf whose elements are perturbed in place.
        h (float): Step size.

    Returns:
        np.ndarray: Estimated gradient, same shape as `param`.
    """
    estimate = np.zeros(param.shape, dtype=np.float64)
    flat = param.value.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + h
            upper = _scalar(fn())
            flat[i] = original - h
            lower = _scalar(fn())
            flat[i] = original
            estimate.reshape(-1)[i] = (upper - lower) / (2.0 * h)
    return estimate


def relative_error(analytic, numeric):
    """
    Elementwise |analytic - numeric| / max(1, |numeric|).
    """
    return np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))


def gradcheck(fn, params, h=1e-5):
    """
    Compares autodiff gradients with central finite differences.

    Args:
        fn (callable): Zero-argument function building a scalar loss from `params`.
        params (list): Leaves to check.
        h (float): Finite-difference step.

    Returns:
        dict: Maximum relative error per parameter (keyed by name or position).
    """
    for param in params:
        param.zero_grad()
    loss = fn()
    grads = backward(loss)

    report = {}
    for index, param in enumerate(params):
        analytic = grads.get(param, np.zeros_like(param.value))
        numeric = numeric_gradient(fn, param, h)
        key = param.name or str(index)
        report[key] = float(relative_error(analytic.astype(np.float64), numeric).max())
        logger.debug(f"gradcheck {key}: max relative error {report[key]:.3e}")
    return report

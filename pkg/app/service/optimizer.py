import logging
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)


@dataclass
class OptimState:
    """
    Adam hyperparameters, step counter and per-parameter moments.

    Attributes:
        lr (float): Learning rate.
        beta1 (float): Decay of the first moment.
        beta2 (float): Decay of the second moment.
        eps (float): Denominator floor.
        step (int): Updates applied so far.
        m (dict): Parameter name -> first moment.
        v (dict): Parameter name -> second moment.
    """
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def _key(param, index):
    return param.name if param.name else f"param{index}"


def adam_step(params, state):
    """
    Applies one bias-corrected Adam update from the gradients stored on `params`, then zeroes them.

    Args:
        params (list): Trainable leaves with populated `.grad`.
        state (OptimState): Updated in place.

    Returns:
        OptimState: The same state object.
    """
    state.step += 1
    correction1 = 1.0 - state.beta1 ** state.step
    correction2 = 1.0 - state.beta2 ** state.step

    for index, param in enumerate(params):
        key = _key(param, index)
        grad = param.grad.astype(np.float64)
        m = state.m.get(key)
        if m is None:
            m = state.m[key] = np.zeros(param.shape, dtype=np.float64)
            state.v[key] = np.zeros(param.shape, dtype=np.float64)
        v = state.v[key]
        if m.shape != param.shape:
            raise ValueError(f"optimizer moment for '{key}' has shape {m.shape}, parameter has {param.shape}")

        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * grad * grad

        update = state.lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        param.value -= update.astype(param.dtype)
        param.zero_grad()
    return state


class Adam:
    """
    Adam optimizer bound to a fixed list of parameters.
    """
    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8):
        """
        Initializes Adam.

        Args:
            params (list): Trainable leaves.
            lr (float): Learning rate. Defaults to 1e-4.
            betas (tuple): (beta1, beta2). Defaults to (0.9, 0.999).
            eps (float): Denominator floor. Defaults to 1e-8.
        """
        self.params = list(params)
        self.state = OptimState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    def step(self):
        adam_step(self.params, self.state)

    def zero_grad(self):
        for param in self.params:
            param.zero_grad()

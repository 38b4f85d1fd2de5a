from abc import ABC, abstractmethod
from dataclasses import dataclass
from enum import Enum

from numerics import ops
from numerics.tensor import ShapeError


class LossKind(Enum):
    """
    Training objectives available to the loss ablation.
    """
    MSE = "mse"
    MAE = "mae"
    MSE_PLUS_MAE = "mse_plus_mae"
    SMOOTH_L1 = "smooth_l1"


@dataclass(frozen=True)
class LossSpec:
    """
    A loss kind and its threshold (used by smooth_l1 only).
    """
    kind: LossKind = LossKind.MSE_PLUS_MAE
    beta: float = 1.0

    @classmethod
    def from_name(cls, name, beta=1.0):
        try:
            return cls(LossKind(name), beta)
        except ValueError:
            raise ValueError(f"Unknown loss '{name}', expected one of {[k.value for k in LossKind]}") from None

    @property
    def name(self):
        return self.kind.value


class LossStrategy(ABC):
    """
    Abstract base class for reducing a residual tensor to a scalar loss.
    """
    @abstractmethod
    def compute(self, residual, spec):
        """
        Reduces residuals to a scalar.

        Args:
            residual (Node): pred - target.
            spec (LossSpec): The loss settings.

        Returns:
            Node: Scalar loss.
        """
        pass


class MseLoss(LossStrategy):
    def compute(self, residual, spec):
        return ops.mean_all(ops.square(residual))


class MaeLoss(LossStrategy):
    def compute(self, residual, spec):
        return ops.mean_all(ops.absolute(residual))


class MsePlusMaeLoss(LossStrategy):
    """
    MSE and MAE at fixed 1:1 weights.
    """
    def compute(self, residual, spec):
        return ops.add(MseLoss().compute(residual, spec), MaeLoss().compute(residual, spec))


class SmoothL1Loss(LossStrategy):
    def compute(self, residual, spec):
        return ops.mean_all(ops.smooth_l1_elementwise(residual, spec.beta))


_STRATEGIES = {
    LossKind.MSE: MseLoss(),
    LossKind.MAE: MaeLoss(),
    LossKind.MSE_PLUS_MAE: MsePlusMaeLoss(),
    LossKind.SMOOTH_L1: SmoothL1Loss(),
}


def loss(pred, target, spec):
    """
    Scalar training loss between forecasts and targets.

    Args:
        pred: Node or array of shape [B, T].
        target: Node or array of shape [B, T].
        spec (LossSpec): Which loss to compute.

    Returns:
        Node: Scalar loss, differentiable with respect to `pred`.
    """
    if tuple(pred.shape) != tuple(target.shape):
        raise ShapeError(f"loss: prediction shape {tuple(pred.shape)} does not match target shape {tuple(target.shape)}")
    return _STRATEGIES[spec.kind].compute(ops.sub(pred, target), spec)

"""Training losses: masked MAE and the imputation, reconstruction and consistency terms."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class UndefinedLossError(ValueError):
    """A masked loss was requested over an empty mask."""


class TrainingDivergenceError(RuntimeError):
    """A loss term became NaN or infinite."""


@dataclass(frozen=True)
class LossWeights:
    mil: float = 1.0
    orl: float = 1.0
    cons: float = 1.0
    rho: float = 0.1

    def __post_init__(self):
        for name in ("mil", "orl", "cons", "rho"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"loss weight {name} must be finite and >= 0, got {value}")


@dataclass
class LossBreakdown:
    mil: Tensor
    orl: Tensor
    cons: Tensor
    total: Tensor

    def as_floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k).data) for k in ("mil", "orl", "cons", "total")}


def _mask_array(mask) -> np.ndarray:
    return np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=np.float64)


def masked_mae(prediction, target, mask) -> Tensor:
    """``sum(|prediction - target| * mask) / sum(mask)`` as a differentiable scalar."""
    m = _mask_array(mask)
    denom = float(m.sum())
    if denom == 0.0:
        raise UndefinedLossError("masked MAE over an empty mask is undefined")
    diff = ad.sub(prediction, ad.as_tensor(target))
    return ad.sum(ad.absolute(diff * m)) * (1.0 / denom)


def mae(a, b) -> Tensor:
    return ad.mean(ad.absolute(ad.sub(a, b)))


def mil_loss(x_joint, x, indicating) -> Tensor:
    return masked_mae(x_joint, x, indicating)


def orl_loss(x_joint, x_fwd, x_bwd, x, m_hat) -> Tensor:
    """Reconstruction loss on visible cells; without a backward branch only the joint term is kept."""
    joint = masked_mae(x_joint, x, m_hat) * 0.5
    if x_bwd is None:
        return joint
    return joint + masked_mae(x_fwd, x, m_hat) * 0.25 + masked_mae(x_bwd, x, m_hat) * 0.25


def consistency_loss(x_fwd, x_bwd, rho: float) -> Tensor:
    if x_bwd is None:
        return Tensor(0.0)
    return mae(x_fwd, x_bwd) * rho


def total_loss(mil: Tensor, orl: Tensor, cons: Tensor, weights: LossWeights) -> LossBreakdown:
    for name, part in (("mil", mil), ("orl", orl), ("cons", cons)):
        if not np.isfinite(part.data):
            raise TrainingDivergenceError(f"loss term {name} is not finite ({float(part.data)})")
    total = mil * weights.mil + orl * weights.orl + cons * weights.cons
    return LossBreakdown(mil=mil, orl=orl, cons=cons, total=total)


def brati_loss(output, x_truth, m_hat, indicating, weights: LossWeights) -> LossBreakdown:
    """Compound loss for one model output against the unmasked truth."""
    mil = mil_loss(output.x_joint, x_truth, indicating)
    orl = orl_loss(output.x_joint, output.x_fwd, output.x_bwd, x_truth, m_hat)
    cons = consistency_loss(output.x_fwd, output.x_bwd, weights.rho)
    return total_loss(mil, orl, cons, weights)

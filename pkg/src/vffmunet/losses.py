"""Training objective: weighted Dice plus binary cross-entropy."""

from __future__ import annotations

from .errors import ContractError, ShapeMismatchError
from .tensor import Tensor, _as_tensor, clip, log, reduce_mean, reduce_sum

CE_CLAMP = 1e-7


def _check_shapes(pred: Tensor, target: Tensor):
    if pred.shape != target.shape:
        raise ShapeMismatchError(f"prediction {pred.shape} vs target {target.shape}")


def dice_loss(pred: Tensor, target: Tensor, smooth: float = 1.0) -> Tensor:
    """1 - (2*overlap + s) / (mass(pred) + mass(target) + s), in [0, 1)."""
    pred = _as_tensor(pred)
    target = _as_tensor(target)
    _check_shapes(pred, target)
    overlap = reduce_sum(pred * target)
    denom = reduce_sum(pred) + reduce_sum(target)
    return 1.0 - (2.0 * overlap + smooth) / (denom + smooth)


def ce_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean binary cross-entropy with predictions clamped to [1e-7, 1 - 1e-7]."""
    pred = _as_tensor(pred)
    target = _as_tensor(target)
    _check_shapes(pred, target)
    p = clip(pred, CE_CLAMP, 1.0 - CE_CLAMP)
    return -reduce_mean(target * log(p) + (1.0 - target) * log(1.0 - p))


def combined_loss(pred: Tensor, target: Tensor, weight: float = 0.6) -> Tensor:
    """weight * dice + (1 - weight) * cross-entropy."""
    if not 0.0 <= weight <= 1.0:
        raise ContractError(f"loss weight must lie in [0, 1], got {weight}")
    return weight * dice_loss(pred, target) + (1.0 - weight) * ce_loss(pred, target)

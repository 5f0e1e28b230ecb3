"""AdamW with decoupled weight decay, and the clamped cosine schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .tensor import Tensor


def cosine_lr(t: float, lr_max: float = 1e-4, lr_min: float = 1e-5,
              period: int = 50) -> float:
    """Cosine annealing from lr_max at t=0 to lr_min at t=period.

    Beyond the period the rate clamps at lr_min (no restarts).
    """
    if t < 0:
        raise ContractError("schedule time must be >= 0")
    frac = min(t, period) / period
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * frac))


@dataclass
class AdamWState:
    """Per-parameter first/second moments plus the shared step counter."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adamw_step(state: AdamWState, weights: dict[str, Tensor], grads: dict[str, Tensor],
               lr: float, weight_decay: float) -> None:
    """One update over every name in ``grads``; weights are rebound in place.

    theta <- theta - lr * mhat / (sqrt(vhat) + eps) - lr * wd * theta, with
    bias-corrected moment estimates.  Decay is decoupled: it applies even at
    zero gradient.
    """
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name in sorted(grads):
        g = grads[name].array if isinstance(grads[name], Tensor) else np.asarray(grads[name])
        theta = weights[name].array
        if name not in state.m:
            state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        new = theta - lr * update - (lr * weight_decay) * theta
        weights[name] = Tensor(new.astype(theta.dtype, copy=False))

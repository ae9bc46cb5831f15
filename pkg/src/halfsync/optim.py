"""SGD with momentum and the worker-count-aware learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import NumericFault, Precision, cast

__all__ = ["LrSchedule", "SgdMomentumState", "base_rate", "rate_for_epoch", "apply_update"]


@dataclass(frozen=True)
class LrSchedule:
    """Exponential per-epoch decay of a base rate reduced for N workers.

    ``halving_workers`` is the worker count at which the base rate is halved;
    ``clip`` caps the effective base rate ``base * N``.
    """

    lr0: float = 0.0004
    gamma: float = 0.8
    halving_workers: float = 100.0
    clip: float = 0.1

    def __post_init__(self):
        if not self.lr0 > 0:
            raise ValueError("lr0 must be positive")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must be in (0, 1]")
        if not self.halving_workers > 0:
            raise ValueError("halving_workers must be positive")


def base_rate(sched: LrSchedule, n_workers: int) -> float:
    if n_workers < 1:
        raise ValueError("need at least one worker")
    lr = sched.lr0 / (1.0 + n_workers / sched.halving_workers)
    if lr * n_workers > sched.clip:
        lr = sched.clip / n_workers
        # guard the cap against a rounding excess of one ulp
        while lr * n_workers > sched.clip:
            lr = np.nextafter(lr, 0.0)
    return float(lr)


def rate_for_epoch(sched: LrSchedule, epoch: int, n_workers: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return base_rate(sched, n_workers) * sched.gamma**epoch


@dataclass
class SgdMomentumState:
    """Momentum buffer H, kept at the update precision."""

    velocity: np.ndarray
    momentum: float = 0.9

    @classmethod
    def zeros(cls, n: int, momentum: float = 0.9, precision: Precision = Precision.FP32):
        if not 0 <= momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        return cls(np.zeros(n, dtype=precision.dtype), momentum)


def apply_update(weights: np.ndarray, grads: np.ndarray, state: SgdMomentumState, lr: float,
                 precision: Precision = Precision.FP32, grad_scale: float = 1.0):
    """H_k = m H_{k-1} - lr dW;  W_k = W_{k-1} + H_k, stored at ``precision``.

    ``grads`` must already be descaled (``grad_scale == 1``). Returns the new
    weights and the new state; inputs are not modified.
    """
    if grad_scale != 1.0:
        raise ValueError("gradients must be descaled before the update")
    if weights.shape != grads.shape or weights.shape != state.velocity.shape:
        raise ValueError(f"layout mismatch: {weights.shape}, {grads.shape}, {state.velocity.shape}")
    if np.isnan(grads).any():
        raise NumericFault("NaN in gradients at weight update")
    # each right-hand side is evaluated in float64 and rounded once, so a
    # narrow update precision costs a single rounding per stored value
    w = cast(weights, precision).astype(np.float64)
    h = cast(state.velocity, precision).astype(np.float64)
    step = state.momentum * h - lr * np.asarray(grads, dtype=np.float64)
    w_new = cast(w + step, precision)
    return w_new, SgdMomentumState(cast(step, precision), state.momentum)

from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .tensor import Tensor

# Momentum and weight decay are never stated for the original recipes; these
# are the usual CIFAR defaults and stay configurable.
DEFAULT_MOMENTUM = 0.9
DEFAULT_WEIGHT_DECAY = 5e-4


@dataclass(frozen=True)
class LrSchedule:
    """Step schedule: ``base_lr * factor**k`` after ``k`` milestones.

    Milestones are cumulative, so with factor 0.01 the second milestone leaves
    ``base_lr * 1e-4``.
    """

    base_lr: float = 0.1
    milestones: tuple[int, ...] = ()
    factor: float = 0.1
    momentum: float = DEFAULT_MOMENTUM
    weight_decay: float = DEFAULT_WEIGHT_DECAY

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")
        if not 0 < self.factor <= 1:
            raise ValueError("factor must lie in (0, 1]")
        ms = tuple(int(m) for m in self.milestones)
        if list(ms) != sorted(ms):
            raise ValueError(f"milestones must be sorted, got {ms}")
        object.__setattr__(self, "milestones", ms)


def lr_at_epoch(schedule: LrSchedule, epoch: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    k = bisect.bisect_right(schedule.milestones, epoch)
    return schedule.base_lr * schedule.factor**k


def sgd_momentum_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    lr: float,
    momentum: float = DEFAULT_MOMENTUM,
    weight_decay: float = DEFAULT_WEIGHT_DECAY,
    velocity: dict[str, np.ndarray] | None = None,
) -> dict[str, np.ndarray]:
    """One in-place SGD step over the parameters named in ``grads``.

    ``v <- momentum * v + grad + weight_decay * p`` then ``p <- p - lr * v``.
    Returns the velocity buffers, which the caller passes back next step.
    """
    if velocity is None:
        velocity = {}
    for key, g in grads.items():
        p = params[key]
        if g.shape != p.data.shape:
            raise ValueError(f"{key}: gradient shape {g.shape} does not match {p.data.shape}")
        d = g + weight_decay * p.data if weight_decay else g
        v = velocity.get(key)
        if v is None or momentum == 0:
            v = np.array(d, dtype=p.data.dtype, copy=True)
        else:
            v *= momentum
            v += d
        velocity[key] = v
        p.data = p.data - np.asarray(lr, dtype=p.data.dtype) * v
        p.bump_version()
    return velocity


@dataclass
class SGD:
    """Stateful wrapper that keeps velocity buffers between steps."""

    params: Mapping[str, Tensor]
    momentum: float = DEFAULT_MOMENTUM
    weight_decay: float = DEFAULT_WEIGHT_DECAY
    velocity: dict = field(default_factory=dict)

    def step(self, lr: float, keys=None) -> int:
        """Update every parameter with a gradient; returns how many scalars moved."""
        grads = {}
        for k, p in self.params.items():
            if keys is not None and k not in keys:
                continue
            if p.requires_grad and p.grad is not None:
                grads[k] = p.grad
        sgd_momentum_step(self.params, grads, lr, self.momentum, self.weight_decay, self.velocity)
        return sum(g.size for g in grads.values())

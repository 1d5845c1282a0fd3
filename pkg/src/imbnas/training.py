"""Single-path training loop shared by supernet, adaptation and standalone runs.

Each minibatch samples one architecture uniformly from a pool and updates only
the parameters its path touched. A standalone network is the degenerate case
of a one-architecture pool.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core.optim import SGD, LrSchedule, lr_at_epoch
from .core.params import BACKBONE, CLASSIFIER
from .core.tensor import Tensor, backward
from .losses import LossConfig, weighted_cross_entropy, weights_at_epoch
from .space import CellArch, encode_arch
from .supernet import Supernet, forward

logger = logging.getLogger(__name__)

DEFAULT_BATCH_SIZE = 64


class TrainingError(FloatingPointError):
    def __init__(self, epoch: int, step: int, loss: float):
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, step {step}")
        self.epoch = epoch
        self.step = step


@dataclass
class CostReport:
    steps: int = 0
    param_updates: int = 0
    wall_ms: float = 0.0

    def as_dict(self) -> dict:
        return {"steps": self.steps, "param_updates": self.param_updates, "wall_ms": self.wall_ms}


class CostMeter:
    """Counts optimizer steps and scalar parameter updates over one scoped run.

    A parameter update is one trainable scalar in one optimizer step, so the
    count is ``sum(steps * trainable parameter count)``.
    """

    def __init__(self):
        self.report = CostReport()
        self._t0: int | None = None

    def __enter__(self) -> "CostMeter":
        self._t0 = time.monotonic_ns()
        return self

    def __exit__(self, *exc) -> None:
        self.report.wall_ms += (time.monotonic_ns() - self._t0) / 1e6
        self._t0 = None

    def record_step(self, trainable_scalars: int) -> None:
        self.report.steps += 1
        self.report.param_updates += int(trainable_scalars)


@dataclass
class TrainLog:
    losses: list[float] = field(default_factory=list)
    # per epoch, the architecture string sampled for every step
    sampled: list[list[str]] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)


def fit(
    net: Supernet,
    data,
    loss_cfg: LossConfig,
    schedule: LrSchedule,
    epochs: int,
    seed: int,
    pool: Sequence[CellArch],
    trainable: Sequence[str] = (BACKBONE, CLASSIFIER),
    batch_size: int = DEFAULT_BATCH_SIZE,
    meter: CostMeter | None = None,
    freeze_backbone_at: int | None = None,
) -> TrainLog:
    """Minibatch SGD with one uniformly sampled architecture per step.

    ``freeze_backbone_at`` stops backbone updates from that epoch on (the
    partial fine-tuning ablation).
    """
    if not pool:
        raise ValueError("architecture pool is empty")
    if data.num_classes != net.spec.num_classes:
        raise ValueError(
            f"data has {data.num_classes} classes, network expects {net.spec.num_classes}"
        )
    data_rng = np.random.default_rng([seed, 1])
    arch_rng = np.random.default_rng([seed, 2])
    counts = np.maximum(data.class_counts(), 1)
    images = data.images.astype(net.dtype, copy=False)
    labels = data.labels
    n = len(data)
    log = TrainLog()
    pool = list(pool)
    codes = [encode_arch(a) for a in pool]

    net.params.set_trainable(trainable)
    opt = SGD(net.params, schedule.momentum, schedule.weight_decay)
    step = 0
    try:
        for epoch in range(epochs):
            if freeze_backbone_at is not None and epoch == freeze_backbone_at:
                net.params.set_trainable([t for t in trainable if t != BACKBONE])
            n_trainable = sum(net.params[k].data.size for k in net.params.trainable_keys())
            lr = lr_at_epoch(schedule, epoch)
            cw = weights_at_epoch(epoch, loss_cfg, counts)
            log.lrs.append(lr)
            sampled = []
            perm = data_rng.permutation(n)
            for s in range(0, n, batch_size):
                idx = perm[s : s + batch_size]
                a = int(arch_rng.integers(len(pool)))
                sampled.append(codes[a])
                logits = forward(net, pool[a], Tensor(images[idx]), training=True)
                loss = weighted_cross_entropy(logits, labels[idx], cw)
                value = float(loss.data)
                if not math.isfinite(value):
                    raise TrainingError(epoch, step, value)
                net.params.zero_grad()
                backward(loss)
                opt.step(lr)
                if meter is not None:
                    meter.record_step(n_trainable)
                log.losses.append(value)
                step += 1
            log.sampled.append(sampled)
            logger.debug("epoch %d lr %.4g loss %.4f", epoch, lr, np.mean(log.losses[-len(sampled):]))
    finally:
        net.params.set_trainable((BACKBONE, CLASSIFIER))
        net.params.zero_grad()
    return log


def train_supernet(
    net: Supernet,
    train_data,
    val_data,
    loss_cfg: LossConfig,
    schedule: LrSchedule,
    epochs: int,
    seed: int,
    pool: Sequence[CellArch],
    batch_size: int = DEFAULT_BATCH_SIZE,
    meter: CostMeter | None = None,
) -> TrainLog:
    """Train every parameter of ``net`` in place on ``train_data``.

    Provenance records the dataset both backbone and classifier were fit on.
    ``val_data`` is only logged against; search happens elsewhere.
    """
    log = fit(net, train_data, loss_cfg, schedule, epochs, seed, pool, batch_size=batch_size, meter=meter)
    net.provenance = {"backbone": train_data.dataset_id, "classifier": train_data.dataset_id}
    if val_data is not None:
        logger.info("trained supernet on %s for %d epochs", train_data.dataset_id, epochs)
    return log

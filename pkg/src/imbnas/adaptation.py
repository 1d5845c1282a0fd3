"""Moving a source-trained supernet onto an imbalanced target dataset.

P0  reuse the source supernet as is
P1  freeze the backbone, retrain a fresh classifier with reweighting from the start
P2  fine-tune everything at a tenth of the source LR with deferred reweighting
P3  train a new supernet on the target with deferred reweighting
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .core.optim import LrSchedule
from .core.params import BACKBONE, CLASSIFIER
from .losses import DEFAULT_BETA, LossConfig
from .space import CellArch, SearchSpaceSpec
from .supernet import Supernet, evaluate, init_supernet, replace_classifier
from .training import DEFAULT_BATCH_SIZE, CostMeter, CostReport, fit

logger = logging.getLogger(__name__)

PROCEDURES = ("P0", "P1", "P2", "P3")

# Desk-scale schedules: the original 600/[400, 500], 200/[100] and
# 200/[160, 180] recipes shrunk to roughly 0.15x.
SUPERNET_SCHEDULE = LrSchedule(0.1, (60, 75), 0.1)
SUPERNET_EPOCHS = 90
ADAPT_SCHEDULE = LrSchedule(0.01, (15,), 0.1)
ADAPT_EPOCHS = 30
SUBNET_SCHEDULE = LrSchedule(0.1, (24, 27), 0.1)
SUBNET_EPOCHS = 30


@dataclass(frozen=True)
class AdaptProcedure:
    tag: str
    epochs: int = 0
    schedule: LrSchedule = ADAPT_SCHEDULE
    drw_epoch: int | None = None
    frozen: tuple[str, ...] = ()
    beta: float = DEFAULT_BETA
    # P1 only: keep the source classifier instead of re-initializing it when
    # the class counts agree.
    continue_classifier: bool = False
    # P2 only: stop backbone updates from this epoch on.
    freeze_backbone_at: int | None = None
    batch_size: int = DEFAULT_BATCH_SIZE

    def __post_init__(self):
        if self.tag not in PROCEDURES:
            raise ValueError(f"unknown procedure {self.tag!r}")
        if self.tag == "P1" and BACKBONE not in self.frozen:
            raise ValueError("P1 must freeze the backbone")
        if self.tag == "P0" and self.epochs:
            raise ValueError("P0 performs no training")

    @property
    def loss_cfg(self) -> LossConfig:
        return LossConfig(beta=self.beta, drw_epoch=self.drw_epoch)


def default_procedure(
    tag: str,
    source_schedule: LrSchedule = SUPERNET_SCHEDULE,
    source_epochs: int = SUPERNET_EPOCHS,
    adapt_epochs: int = ADAPT_EPOCHS,
    adapt_schedule: LrSchedule | None = None,
    **overrides,
) -> AdaptProcedure:
    """The procedure ``tag`` with the desk-scale recipe filled in."""
    if adapt_schedule is None:
        adapt_schedule = replace(
            source_schedule,
            base_lr=source_schedule.base_lr / 10,
            milestones=(adapt_epochs // 2,),
        )
    if tag == "P0":
        proc = AdaptProcedure("P0")
    elif tag == "P1":
        proc = AdaptProcedure("P1", adapt_epochs, adapt_schedule, drw_epoch=0, frozen=(BACKBONE,))
    elif tag == "P2":
        proc = AdaptProcedure("P2", adapt_epochs, adapt_schedule, drw_epoch=adapt_schedule.milestones[0])
    elif tag == "P3":
        first = source_schedule.milestones[0] if source_schedule.milestones else source_epochs // 2
        proc = AdaptProcedure("P3", source_epochs, source_schedule, drw_epoch=first)
    else:
        raise ValueError(f"unknown procedure {tag!r}")
    return replace(proc, **overrides) if overrides else proc


def adapt(
    net_source: Supernet,
    target_train,
    proc: AdaptProcedure,
    seed: int,
    pool: Sequence[CellArch],
) -> tuple[Supernet, CostReport]:
    """Apply one adaptation procedure; the source network is never modified."""
    if not net_source.provenance:
        warnings.warn("source supernet has no provenance; was it trained?", stacklevel=2)
    target_id = target_train.dataset_id
    k = target_train.num_classes
    meter = CostMeter()

    if proc.tag == "P0":
        return net_source, meter.report

    with meter:
        if proc.tag == "P3":
            spec = net_source.spec.with_classes(k)
            net = init_supernet(spec, seed, dtype=net_source.dtype)
            fit(net, target_train, proc.loss_cfg, proc.schedule, proc.epochs, seed, pool,
                batch_size=proc.batch_size, meter=meter)
            net.provenance = {"backbone": target_id, "classifier": target_id}
            return net, meter.report

        if proc.tag == "P1" and proc.continue_classifier and k == net_source.spec.num_classes:
            net = net_source.copy()
        else:
            net = replace_classifier(net_source, k, seed)
        trainable = [t for t in (BACKBONE, CLASSIFIER) if t not in proc.frozen]
        fit(net, target_train, proc.loss_cfg, proc.schedule, proc.epochs, seed, pool,
            trainable=trainable, batch_size=proc.batch_size, meter=meter,
            freeze_backbone_at=proc.freeze_backbone_at)
        src = net_source.provenance.get("backbone", "?")
        if proc.tag == "P1":
            net.provenance = {"backbone": src, "classifier": target_id}
        else:
            net.provenance = {"backbone": f"{src}>{target_id}", "classifier": target_id}
    return net, meter.report


# -------------------------------------------------------- standalone retrain


@dataclass(frozen=True)
class SubnetTrainConfig:
    epochs: int = SUBNET_EPOCHS
    schedule: LrSchedule = SUBNET_SCHEDULE
    beta: float = DEFAULT_BETA
    # None: deferred reweighting at the first milestone on imbalanced data.
    drw_epoch: int | None = None
    batch_size: int = DEFAULT_BATCH_SIZE

    def loss_for(self, counts) -> LossConfig:
        counts = np.asarray(counts)
        if counts.min() == counts.max():
            return LossConfig(beta=self.beta, drw_epoch=None)
        drw = self.drw_epoch
        if drw is None:
            drw = self.schedule.milestones[0] if self.schedule.milestones else self.epochs // 2
        return LossConfig(beta=self.beta, drw_epoch=drw)


@dataclass
class SubnetResult:
    arch: CellArch
    accuracy: float
    per_class_correct: np.ndarray
    per_class_total: np.ndarray
    seeds: tuple[int, ...] = ()
    accuracies: tuple[float, ...] = field(default_factory=tuple)


def retrain_subnet_scratch(
    arch: CellArch,
    target_train,
    target_val,
    train_cfg: SubnetTrainConfig,
    seed: int,
    spec: SearchSpaceSpec | None = None,
) -> SubnetResult:
    """Train ``arch`` as a standalone network from a fresh init and evaluate it.

    Plain cross-entropy on balanced data, CE with deferred reweighting otherwise.
    ``spec`` supplies the skeleton; by default the desk skeleton sized to the data.
    """
    if spec is None:
        spec = SearchSpaceSpec(num_nodes=arch.num_nodes, input_shape=target_train.image_shape)
    spec = spec.with_classes(target_train.num_classes)
    net = init_supernet(spec, seed)
    loss_cfg = train_cfg.loss_for(target_train.class_counts())
    fit(net, target_train, loss_cfg, train_cfg.schedule, train_cfg.epochs, seed, [arch],
        batch_size=train_cfg.batch_size)
    res = evaluate(net, arch, target_val, target_train)
    return SubnetResult(arch, res.accuracy, res.per_class_correct, res.per_class_total, (seed,), (res.accuracy,))


def retrain_over_seeds(arch, target_train, target_val, train_cfg, seeds, spec=None) -> SubnetResult:
    """Seed-averaged accuracy; per-class counts are summed over seeds."""
    runs = [retrain_subnet_scratch(arch, target_train, target_val, train_cfg, s, spec) for s in seeds]
    return SubnetResult(
        arch,
        float(np.mean([r.accuracy for r in runs])),
        np.sum([r.per_class_correct for r in runs], axis=0),
        np.sum([r.per_class_total for r in runs], axis=0),
        tuple(seeds),
        tuple(r.accuracy for r in runs),
    )

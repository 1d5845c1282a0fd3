"""Strict TOML experiment configuration.

Unknown keys anywhere raise :class:`ConfigError`. The resolved configuration,
defaults included, is written next to every report.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import tomli
import tomli_w

from .adaptation import PROCEDURES, SubnetTrainConfig
from .core.optim import DEFAULT_MOMENTUM, DEFAULT_WEIGHT_DECAY, LrSchedule
from .evolution import EvoConfig
from .losses import DEFAULT_BETA
from .space import SearchSpaceSpec


class ConfigError(ValueError):
    pass


@dataclass
class DatasetSection:
    source_domain: str = "A"
    target_domain: str = "B"
    num_classes: int = 10
    target_classes: int = 10
    source_per_class: int = 200
    target_per_class: int = 200
    ratios: list[float] = field(default_factory=lambda: [100.0])
    image_size: int = 16
    val_per_class: int = 50
    noise: float = 0.6


@dataclass
class SpaceSection:
    num_nodes: int = 3
    stage_widths: list[int] = field(default_factory=lambda: [8, 16, 32])
    cells_per_stage: int = 2
    stem_width: int = 8
    # "iso_flop" (modal FLOP bucket) or "full"
    pool: str = "iso_flop"
    # 0 keeps the whole pool, otherwise a seeded subsample of this size
    pool_size: int = 0


@dataclass
class ScheduleSection:
    epochs: int = 90
    base_lr: float = 0.1
    milestones: list[int] = field(default_factory=lambda: [60, 75])
    factor: float = 0.1
    momentum: float = DEFAULT_MOMENTUM
    weight_decay: float = DEFAULT_WEIGHT_DECAY
    batch_size: int = 64
    beta: float = DEFAULT_BETA

    def schedule(self) -> LrSchedule:
        return LrSchedule(self.base_lr, tuple(self.milestones), self.factor, self.momentum, self.weight_decay)


@dataclass
class AdaptSection:
    procedures: list[str] = field(default_factory=lambda: list(PROCEDURES))
    epochs: int = 30
    # fraction of the supernet base LR used for P1/P2
    lr_scale: float = 0.1
    p1_continue_classifier: bool = False
    # -1 disables; otherwise P2 stops backbone updates at this epoch
    p2_freeze_backbone_at: int = -1


@dataclass
class SearchSection:
    method: str = "evo"
    generations: int = 20
    population: int = 50
    crossover_count: int = 25
    mutation_count: int = 25
    mutate_prob: float = 0.1
    top_k: int = 10

    def evo(self, seed: int) -> EvoConfig:
        return EvoConfig(
            self.generations, self.population, self.crossover_count, self.mutation_count,
            self.mutate_prob, self.top_k, seed,
        )


@dataclass
class SubnetSection:
    epochs: int = 30
    base_lr: float = 0.1
    milestones: list[int] = field(default_factory=lambda: [24, 27])
    factor: float = 0.1
    momentum: float = DEFAULT_MOMENTUM
    weight_decay: float = DEFAULT_WEIGHT_DECAY
    batch_size: int = 64
    beta: float = DEFAULT_BETA
    # -1: deferred reweighting at the first milestone
    drw_epoch: int = -1

    def train_cfg(self) -> SubnetTrainConfig:
        sched = LrSchedule(self.base_lr, tuple(self.milestones), self.factor, self.momentum, self.weight_decay)
        drw = None if self.drw_epoch < 0 else self.drw_epoch
        return SubnetTrainConfig(self.epochs, sched, self.beta, drw, self.batch_size)


@dataclass
class AnalyzeSection:
    """Transfer grid. Every pool member is trained standalone on every
    variant and seed, so the skeleton here is smaller than the search one."""

    domains: list[str] = field(default_factory=lambda: ["A", "B"])
    ratios: list[float] = field(default_factory=lambda: [1.0, 50.0, 100.0])
    per_class: int = 100
    num_nodes: int = 4
    stage_widths: list[int] = field(default_factory=lambda: [8, 16])
    cells_per_stage: int = 1
    image_size: int = 12
    pool_size: int = 30
    epochs: int = 12
    base_lr: float = 0.1
    milestones: list[int] = field(default_factory=lambda: [8, 10])
    batch_size: int = 64

    def train_cfg(self) -> SubnetTrainConfig:
        return SubnetTrainConfig(self.epochs, LrSchedule(self.base_lr, tuple(self.milestones)),
                                 batch_size=self.batch_size)


@dataclass
class ReportSection:
    bins: list[int] = field(default_factory=lambda: [20, 100])


@dataclass
class ExperimentConfig:
    seed: int = 0
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    output_dir: str = "runs/default"
    dataset: DatasetSection = field(default_factory=DatasetSection)
    space: SpaceSection = field(default_factory=SpaceSection)
    supernet: ScheduleSection = field(default_factory=ScheduleSection)
    adapt: AdaptSection = field(default_factory=AdaptSection)
    search: SearchSection = field(default_factory=SearchSection)
    subnet: SubnetSection = field(default_factory=SubnetSection)
    analyze: AnalyzeSection = field(default_factory=AnalyzeSection)
    report: ReportSection = field(default_factory=ReportSection)

    def validate(self) -> "ExperimentConfig":
        for p in self.adapt.procedures:
            if p not in PROCEDURES:
                raise ConfigError(f"adapt.procedures: unknown procedure {p!r}")
        if self.space.pool not in ("iso_flop", "full"):
            raise ConfigError(f"space.pool must be 'iso_flop' or 'full', got {self.space.pool!r}")
        if self.search.method not in ("evo", "exhaustive"):
            raise ConfigError(f"search.method must be 'evo' or 'exhaustive', got {self.search.method!r}")
        if not self.seeds:
            raise ConfigError("seeds must not be empty")
        try:
            self.space_spec()
            self.analyze_spec()
            self.search.evo(self.seed)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def space_spec(self, num_classes: int | None = None) -> SearchSpaceSpec:
        d = self.dataset
        return SearchSpaceSpec(
            num_nodes=self.space.num_nodes,
            stage_widths=tuple(self.space.stage_widths),
            cells_per_stage=self.space.cells_per_stage,
            stem_width=self.space.stem_width,
            input_shape=(3, d.image_size, d.image_size),
            num_classes=num_classes or d.num_classes,
        )

    def analyze_spec(self) -> SearchSpaceSpec:
        a = self.analyze
        return SearchSpaceSpec(
            num_nodes=a.num_nodes,
            stage_widths=tuple(a.stage_widths),
            cells_per_stage=a.cells_per_stage,
            stem_width=a.stage_widths[0],
            input_shape=(3, a.image_size, a.image_size),
            num_classes=self.dataset.num_classes,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self, *sections: str) -> str:
        d = self.to_dict()
        blob = json.dumps({k: d[k] for k in sections} if sections else d, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _coerce(tp, value, where: str):
    origin = getattr(tp, "__origin__", None)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected a table")
        return _build(tp, value, where)
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list")
        (inner,) = tp.__args__
        return [_coerce(inner, v, f"{where}[{i}]") for i, v in enumerate(value)]
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer")
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string")
        return value
    return value


def _build(cls, data: dict, where: str = ""):
    import typing

    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        prefix = f"{where}." if where else ""
        raise ConfigError(f"unknown key(s): {', '.join(prefix + k for k in unknown)}")
    kwargs = {k: _coerce(hints[k], v, f"{where}.{k}" if where else k) for k, v in data.items()}
    return cls(**kwargs)


def config_from_dict(data: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, data).validate()


def load_config(path) -> ExperimentConfig:
    with open(path, "rb") as fh:
        try:
            data = tomli.load(fh)
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(data)


def dump_config(cfg: ExperimentConfig) -> str:
    return tomli_w.dumps(cfg.to_dict())


def save_config(cfg: ExperimentConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(dump_config(cfg))
    tmp.replace(path)
    return path

"""Evolutionary and exhaustive maximization of a fitness over an architecture pool."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .space import CellArch, crossover, encode_arch, mutate

logger = logging.getLogger(__name__)

EXHAUSTIVE_CAP = 20000
MAX_RETRIES = 100


@dataclass(frozen=True)
class EvoConfig:
    """Search hyperparameters.

    ``generations`` counts breeding rounds after the random initial population.
    ``top_k`` is both the elite size and the number of results returned.
    """

    generations: int = 20
    population: int = 50
    crossover_count: int = 25
    mutation_count: int = 25
    mutate_prob: float = 0.1
    top_k: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.crossover_count + self.mutation_count > self.population:
            raise ValueError("crossover_count + mutation_count must not exceed population")
        if self.top_k > self.population:
            raise ValueError("top_k must not exceed population")
        if self.generations < 0 or self.population < 1 or self.top_k < 1:
            raise ValueError("generations >= 0, population >= 1 and top_k >= 1 required")


@dataclass
class SearchResult:
    ranked: list[tuple[CellArch, float]]
    trace: list[tuple[int, str, float, bool]] = field(default_factory=list)
    best_per_generation: list[float] = field(default_factory=list)
    evaluations: int = 0

    @property
    def best(self) -> CellArch:
        return self.ranked[0][0]


class FitnessError(FloatingPointError):
    pass


class _Cache:
    def __init__(self, fn):
        self.fn = fn
        self.values: dict[CellArch, float] = {}

    def __call__(self, arch: CellArch) -> float:
        v = self.values.get(arch)
        if v is None:
            v = float(self.fn(arch))
            if not math.isfinite(v):
                raise FitnessError(f"fitness of {encode_arch(arch)} is {v}")
            self.values[arch] = v
        return v


def _rank_key(item):
    arch, fit = item
    return (-fit, encode_arch(arch))


def exhaustive(fitness_fn: Callable[[CellArch], float], pool: Sequence[CellArch], cap: int = EXHAUSTIVE_CAP):
    """Score every architecture once; best first, ties by encoding string."""
    if len(pool) > cap:
        raise ValueError(f"pool of {len(pool)} exceeds the exhaustive cap of {cap}")
    cache = _Cache(fitness_fn)
    return sorted(((a, cache(a)) for a in dict.fromkeys(pool)), key=_rank_key)


def evolve(fitness_fn: Callable[[CellArch], float], pool: Sequence[CellArch], cfg: EvoConfig) -> SearchResult:
    if not pool:
        raise ValueError("pool is empty")
    pool = list(dict.fromkeys(pool))
    members = set(pool)
    rng = np.random.default_rng(cfg.seed)
    cache = _Cache(fitness_fn)
    trace: list[tuple[int, str, float, bool]] = []
    best_curve: list[float] = []

    def draw() -> CellArch:
        return pool[int(rng.integers(len(pool)))]

    def project(make) -> CellArch:
        for _ in range(MAX_RETRIES):
            child = make()
            if child in members:
                return child
        return draw()

    def elites() -> list[CellArch]:
        return [a for a, _ in sorted(cache.values.items(), key=_rank_key)[: cfg.top_k]]

    def record(gen, population):
        for a in population:
            cache(a)
        top = set(elites())
        for a in population:
            trace.append((gen, encode_arch(a), cache.values[a], a in top))
        best_curve.append(max(cache.values.values()))

    take = min(cfg.population, len(pool))
    population = [pool[i] for i in rng.choice(len(pool), size=take, replace=False)]
    record(0, population)

    for gen in range(1, cfg.generations + 1):
        parents = elites()
        children: list[CellArch] = []
        seen: set[CellArch] = set()

        def add(make):
            child = make()
            if child in seen:
                child = make()
            seen.add(child)
            children.append(child)

        def cross():
            a = parents[int(rng.integers(len(parents)))]
            b = parents[int(rng.integers(len(parents)))]
            return project(lambda: crossover(a, b, rng))

        def mut():
            a = parents[int(rng.integers(len(parents)))]
            return project(lambda: mutate(a, cfg.mutate_prob, rng))

        for _ in range(cfg.crossover_count):
            add(cross)
        for _ in range(cfg.mutation_count):
            add(mut)
        while len(children) < cfg.population:
            add(draw)
        population = children
        record(gen, population)
        logger.debug("generation %d best %.4f", gen, best_curve[-1])

    ranked = sorted(cache.values.items(), key=_rank_key)[: cfg.top_k]
    return SearchResult(ranked, trace, best_curve, len(cache.values))


def write_trace(result: SearchResult, path) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["generation", "arch", "fitness", "is_elite"])
        for gen, arch, fit, elite in result.trace:
            w.writerow([gen, arch, repr(fit), int(elite)])
    tmp.replace(path)

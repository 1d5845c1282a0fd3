"""Architecture rankings, Kendall-tau transfer grids and per-bin accuracy."""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, Sequence

import numpy as np

from .adaptation import SubnetTrainConfig, retrain_subnet_scratch
from .data import FEW, MANY, MEDIUM
from .space import CellArch, SearchSpaceSpec, encode_arch

logger = logging.getLogger(__name__)

NA = "n/a"


@dataclass(frozen=True)
class RankRecord:
    arch: str
    dataset: str
    imbalance: float
    seed: int | None
    accuracy: float
    per_class: tuple[float, ...] = ()

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError(f"accuracy {self.accuracy} outside [0, 1]")


def _count_inversions(seq: list[int]) -> int:
    """Number of pairs i < j with seq[i] > seq[j], by merge sort."""
    if len(seq) < 2:
        return 0
    mid = len(seq) // 2
    left, right = seq[:mid], seq[mid:]
    inv = _count_inversions(left) + _count_inversions(right)
    left.sort()
    right.sort()
    i = j = 0
    while i < len(left) and j < len(right):
        if left[i] <= right[j]:
            i += 1
        else:
            inv += len(left) - i
            j += 1
    return inv


def kendall_tau(rank_a: Sequence[Hashable], rank_b: Sequence[Hashable]) -> float:
    """Kendall's tau-a between two orderings of the same items.

    Each argument lists the items best-first. With no ties,
    ``tau = 1 - 4 * discordant / (n * (n - 1))``.
    """
    n = len(rank_a)
    if n != len(rank_b) or n < 2:
        raise ValueError("rankings must have equal length >= 2")
    pos_b = {item: i for i, item in enumerate(rank_b)}
    if len(pos_b) != n or set(rank_a) != set(pos_b):
        raise ValueError("rankings must be permutations of the same item set")
    discordant = _count_inversions([pos_b[item] for item in rank_a])
    pairs = n * (n - 1) // 2
    return (pairs - 2 * discordant) / pairs


def rank_architectures(records: Sequence[RankRecord]) -> list[str]:
    """Architecture strings by descending accuracy, ties by string ascending."""
    archs = [r.arch for r in records]
    if len(set(archs)) != len(archs):
        raise ValueError("duplicate architecture records; average seeds upstream")
    return [r.arch for r in sorted(records, key=lambda r: (-r.accuracy, r.arch))]


def dissect_accuracy(per_class_correct, per_class_total, bins: Sequence[str]) -> dict[str, float | str]:
    """Micro accuracy overall; macro (mean of per-class accuracy) within each bin."""
    correct = np.asarray(per_class_correct, dtype=np.float64)
    total = np.asarray(per_class_total, dtype=np.float64)
    if not (len(correct) == len(total) == len(bins)):
        raise ValueError("per-class vectors and bins must have equal length")
    out: dict[str, float | str] = {}
    present = total > 0
    for name in (MANY, MEDIUM, FEW):
        mask = np.array([b == name for b in bins]) & present
        out[name] = float(np.mean(correct[mask] / total[mask])) if mask.any() else NA
    out["All"] = float(correct.sum() / total.sum()) if total.sum() else NA
    return out


# ---------------------------------------------------------------- transfer


@dataclass
class DatasetVariant:
    label: str
    train: object
    val: object
    imbalance: float = 1.0


@dataclass
class GridResult:
    labels: list[str]
    tau: np.ndarray
    records: dict[str, list[RankRecord]] = field(default_factory=dict)
    rankings: dict[str, list[str]] = field(default_factory=dict)


def _train_one(args):
    arch, variant, cfg, seed, spec = args
    try:
        return retrain_subnet_scratch(arch, variant.train, variant.val, cfg, seed, spec).accuracy
    except (FloatingPointError, ValueError) as exc:
        logger.warning("training %s on %s failed: %s", encode_arch(arch), variant.label, exc)
        return math.nan


def worker_count() -> int:
    env = os.environ.get("IMBNAS_THREADS")
    return max(1, int(env)) if env else 1


def transfer_grid(
    pool: Sequence[CellArch],
    variants: Sequence[DatasetVariant],
    train_cfg: SubnetTrainConfig,
    seeds: Sequence[int],
    spec: SearchSpaceSpec | None = None,
    workers: int | None = None,
) -> GridResult:
    """Train every architecture on every variant, rank, and correlate rankings.

    A variant whose runs failed leaves NaN holes in its row and column.
    """
    workers = worker_count() if workers is None else workers
    jobs = [(a, v, train_cfg, s, spec) for v in variants for a in pool for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            accs = list(ex.map(_train_one, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        accs = [_train_one(j) for j in jobs]
    accs = np.asarray(accs).reshape(len(variants), len(pool), len(seeds))

    labels = [v.label for v in variants]
    records: dict[str, list[RankRecord]] = {}
    rankings: dict[str, list[str]] = {}
    ok = []
    for vi, v in enumerate(variants):
        if np.isnan(accs[vi]).any():
            ok.append(False)
            continue
        ok.append(True)
        mean = accs[vi].mean(axis=1)
        records[v.label] = [
            RankRecord(encode_arch(a), v.label, v.imbalance, None, float(m)) for a, m in zip(pool, mean)
        ]
        rankings[v.label] = rank_architectures(records[v.label])

    n = len(variants)
    tau = np.full((n, n), np.nan)
    for i in range(n):
        for j in range(i, n):
            if ok[i] and ok[j]:
                t = 1.0 if i == j else kendall_tau(rankings[labels[i]], rankings[labels[j]])
                tau[i, j] = tau[j, i] = t
    return GridResult(labels, tau, records, rankings)


# -------------------------------------------------------------------- output

# Diverging blue-white-red ramp over [-1, 1].
_RAMP = ((-1.0, (33, 102, 172)), (0.0, (247, 247, 247)), (1.0, (178, 24, 43)))


def tau_color(value: float) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return "#999999"
    v = min(1.0, max(-1.0, float(value)))
    for (x0, c0), (x1, c1) in zip(_RAMP, _RAMP[1:]):
        if v <= x1:
            f = (v - x0) / (x1 - x0)
            rgb = tuple(int(round(a + (b - a) * f)) for a, b in zip(c0, c1))
            return "#%02x%02x%02x" % rgb
    return "#%02x%02x%02x" % _RAMP[-1][1]


def _fmt(v: float) -> str:
    return "NA" if math.isnan(v) else f"{v:.6f}"


def emit_grid(matrix, labels: Sequence[str], path) -> tuple[Path, Path]:
    """Write ``<path>.csv`` and ``<path>.svg``; returns both paths."""
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1] or m.shape[0] != len(labels):
        raise ValueError(f"need a square matrix matching {len(labels)} labels, got {m.shape}")
    base = Path(path)
    if base.suffix in (".csv", ".svg"):
        base = base.with_suffix("")
    csv_path, svg_path = base.with_suffix(".csv"), base.with_suffix(".svg")

    lines = [",".join(["", *labels])]
    for lab, row in zip(labels, m):
        lines.append(",".join([lab, *(_fmt(v) for v in row)]))
    csv_text = "\n".join(lines) + "\n"

    cell, margin = 48, 90
    n = len(labels)
    size = margin + n * cell + 10
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
        f'font-family="sans-serif" font-size="10">',
        '<desc>Kendall tau; colour range fixed to [-1, 1]</desc>',
    ]
    for i, lab in enumerate(labels):
        parts.append(f'<text x="{margin - 4}" y="{margin + i * cell + cell // 2 + 3}" text-anchor="end">{lab}</text>')
        parts.append(
            f'<text x="{margin + i * cell + cell // 2}" y="{margin - 6}" text-anchor="middle">{lab}</text>'
        )
    for i in range(n):
        for j in range(n):
            v = m[i, j]
            x, y = margin + j * cell, margin + i * cell
            parts.append(f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="{tau_color(v)}"/>')
            parts.append(
                f'<text x="{x + cell // 2}" y="{y + cell // 2 + 3}" text-anchor="middle">'
                f'{"NA" if math.isnan(v) else f"{v:.2f}"}</text>'
            )
    parts.append("</svg>")
    svg_text = "\n".join(parts) + "\n"

    try:
        for p, text in ((csv_path, csv_text), (svg_path, svg_text)):
            p.parent.mkdir(parents=True, exist_ok=True)
            tmp = p.with_suffix(p.suffix + ".tmp")
            tmp.write_text(text)
            tmp.replace(p)
    except OSError as exc:
        raise OSError(f"could not write grid to {base}: {exc}") from exc
    return csv_path, svg_path

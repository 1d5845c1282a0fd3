"""Cell search space with one operation per DAG edge.

A cell with ``k`` nodes has ``k(k-1)/2`` edges ordered by (target, source).
Node 0 is the cell input, node ``j`` sums ``op(i -> j)(node_i)`` over ``i < j``,
and the last node is the cell output. Architectures serialize to strings of
the form ``|conv3x3~0|+|skip~0|conv1x1~1|``: one ``+``-separated block per
target node, listing ``op~source`` for each incoming edge.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import warnings
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np

OPS = ("none", "skip", "conv1x1", "conv3x3", "avgpool3x3")
PARAMETRIC_OPS = ("conv1x1", "conv3x3")
ENUM_CAP = 10**6


class ArchStringError(ValueError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.position = position


@dataclass(frozen=True)
class SearchSpaceSpec:
    num_nodes: int = 3
    op_set: tuple[str, ...] = OPS
    stage_widths: tuple[int, ...] = (8, 16, 32)
    cells_per_stage: int = 2
    stem_width: int = 8
    input_shape: tuple[int, int, int] = (3, 16, 16)
    num_classes: int = 10

    def __post_init__(self):
        if self.num_nodes not in (2, 3, 4):
            raise ValueError(f"num_nodes must be 2, 3 or 4, got {self.num_nodes}")
        if tuple(self.op_set) != OPS:
            raise ValueError(f"op_set is fixed to {OPS}")
        for name in ("op_set", "stage_widths", "input_shape"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.cells_per_stage < 1 or not self.stage_widths:
            raise ValueError("need at least one stage with one cell")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")

    @property
    def num_edges(self) -> int:
        return self.num_nodes * (self.num_nodes - 1) // 2

    @property
    def edges(self) -> list[tuple[int, int]]:
        """(source, target) pairs in (target, source) order."""
        return [(i, j) for j in range(1, self.num_nodes) for i in range(j)]

    @property
    def num_cells(self) -> int:
        return len(self.stage_widths) * self.cells_per_stage

    @property
    def size(self) -> int:
        return len(self.op_set) ** self.num_edges

    def with_classes(self, num_classes: int) -> "SearchSpaceSpec":
        d = asdict(self)
        d["num_classes"] = num_classes
        return SearchSpaceSpec(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SearchSpaceSpec":
        return cls(**d)

    def spec_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass(frozen=True, order=True)
class CellArch:
    edge_ops: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "edge_ops", tuple(int(o) for o in self.edge_ops))
        for o in self.edge_ops:
            if not 0 <= o < len(OPS):
                raise ValueError(f"op index {o} out of range")

    @property
    def num_nodes(self) -> int:
        e = len(self.edge_ops)
        k = 1
        while k * (k - 1) // 2 < e:
            k += 1
        return k

    def op_names(self) -> list[str]:
        return [OPS[o] for o in self.edge_ops]

    def __str__(self) -> str:
        return encode_arch(self)


def encode_arch(arch: CellArch) -> str:
    names = arch.op_names()
    k = arch.num_nodes
    blocks = []
    e = 0
    for j in range(1, k):
        parts = []
        for i in range(j):
            parts.append(f"{names[e]}~{i}")
            e += 1
        blocks.append("|" + "|".join(parts) + "|")
    return "+".join(blocks)


def decode_arch(s: str, num_nodes: int | None = None) -> CellArch:
    """Parse an architecture string; errors report the offending character offset."""
    if not s:
        raise ArchStringError("empty architecture string", 0)
    ops: list[int] = []
    pos = 0
    blocks = s.split("+")
    for j, block in enumerate(blocks, start=1):
        if len(block) < 2 or block[0] != "|" or block[-1] != "|":
            raise ArchStringError(f"node block {block!r} must be wrapped in '|'", pos)
        tokens = block[1:-1].split("|")
        if len(tokens) != j:
            raise ArchStringError(f"node {j} needs {j} incoming edges, found {len(tokens)}", pos)
        tpos = pos + 1
        for i, tok in enumerate(tokens):
            name, sep, src = tok.partition("~")
            if not sep:
                raise ArchStringError(f"token {tok!r} lacks '~source'", tpos)
            if name not in OPS:
                raise ArchStringError(f"unknown op {name!r}", tpos)
            if src != str(i):
                raise ArchStringError(f"expected source {i}, found {src!r}", tpos + len(name) + 1)
            ops.append(OPS.index(name))
            tpos += len(tok) + 1
        pos += len(block) + 1
    arch = CellArch(tuple(ops))
    if num_nodes is not None and len(blocks) + 1 != num_nodes:
        raise ArchStringError(f"string describes {len(blocks) + 1} nodes, expected {num_nodes}", len(s))
    return arch


def enumerate_space(spec: SearchSpaceSpec, cap: int = ENUM_CAP) -> list[CellArch]:
    """Every architecture, sorted by encoding string."""
    if spec.size > cap:
        raise ValueError(f"space has {spec.size} architectures, above the cap of {cap}")
    archs = [CellArch(t) for t in itertools.product(range(len(spec.op_set)), repeat=spec.num_edges)]
    return sorted(archs, key=encode_arch)


# -------------------------------------------------------------------- FLOPs


def stage_geometry(spec: SearchSpaceSpec) -> list[tuple[int, int]]:
    """(width, spatial size) of the cells in each stage."""
    _, h, _ = spec.input_shape
    out = []
    for s, w in enumerate(spec.stage_widths):
        if s > 0:
            h = (h + 2 - 3) // 2 + 1
        out.append((w, h))
    return out


def op_macs(op: str, width: int, res: int) -> int:
    if op == "conv3x3":
        return 9 * width * width * res * res
    if op == "conv1x1":
        return width * width * res * res
    return 0


def count_flops(arch: CellArch, spec: SearchSpaceSpec) -> int:
    """Multiply-accumulates of the stem, every cell, the reductions and the head."""
    c_in, h, w = spec.input_shape
    total = 9 * c_in * spec.stem_width * h * w
    prev = spec.stem_width
    names = arch.op_names()
    for s, (width, res) in enumerate(stage_geometry(spec)):
        if s > 0 or prev != width:
            stride = 2 if s > 0 else 1
            total += 9 * prev * width * res * res if stride == 2 else width * prev * res * res
        for _ in range(spec.cells_per_stage):
            total += sum(op_macs(n, width, res) for n in names)
        prev = width
    total += spec.stage_widths[-1] * spec.num_classes
    return total


def iso_flop_slice(
    spec: SearchSpaceSpec,
    target_flops: float,
    tolerance: float = 0.0,
    archs: Sequence[CellArch] | None = None,
) -> list[CellArch]:
    archs = enumerate_space(spec) if archs is None else archs
    out = [a for a in archs if abs(count_flops(a, spec) - target_flops) <= tolerance]
    if not out:
        warnings.warn(f"no architecture within {tolerance} MACs of {target_flops}", stacklevel=2)
    return out


def flop_histogram(spec: SearchSpaceSpec, archs: Sequence[CellArch] | None = None) -> Counter:
    archs = enumerate_space(spec) if archs is None else archs
    return Counter(count_flops(a, spec) for a in archs)


def modal_flop_pool(spec: SearchSpaceSpec, archs: Sequence[CellArch] | None = None) -> list[CellArch]:
    """The largest equal-FLOP bucket; ties go to the larger FLOP count."""
    hist = flop_histogram(spec, archs)
    target = max(hist, key=lambda f: (hist[f], f))
    return iso_flop_slice(spec, target, 0, archs)


# -------------------------------------------------------- evolution operators


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def random_arch(spec: SearchSpaceSpec, seed) -> CellArch:
    rng = _rng(seed)
    return CellArch(tuple(int(x) for x in rng.integers(0, len(spec.op_set), spec.num_edges)))


def mutate(arch: CellArch, p_mut: float, seed) -> CellArch:
    """Resample each edge with probability ``p_mut`` (possibly to the same op)."""
    if not 0 <= p_mut <= 1:
        raise ValueError("p_mut must lie in [0, 1]")
    rng = _rng(seed)
    ops = list(arch.edge_ops)
    for e in range(len(ops)):
        if rng.random() < p_mut:
            ops[e] = int(rng.integers(0, len(OPS)))
    return CellArch(tuple(ops))


def crossover(a: CellArch, b: CellArch, seed) -> CellArch:
    if len(a.edge_ops) != len(b.edge_ops):
        raise ValueError("parents come from different spaces")
    rng = _rng(seed)
    pick = rng.random(len(a.edge_ops)) < 0.5
    return CellArch(tuple(x if p else y for x, y, p in zip(a.edge_ops, b.edge_ops, pick)))


def build_pool(spec: SearchSpaceSpec, kind: str = "iso_flop", size: int = 0, seed: int = 0) -> list[CellArch]:
    """Search pool: the modal iso-FLOP bucket or the whole space, optionally subsampled."""
    if kind == "iso_flop":
        archs = modal_flop_pool(spec)
    elif kind == "full":
        archs = enumerate_space(spec)
    else:
        raise ValueError(f"unknown pool kind {kind!r}")
    if 0 < size < len(archs):
        keep = np.random.default_rng(seed).choice(len(archs), size=size, replace=False)
        archs = [archs[i] for i in sorted(keep)]
    return archs


def parse_pool(strings: Iterable[str]) -> list[CellArch]:
    return [decode_arch(s) for s in strings]

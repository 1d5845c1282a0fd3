"""Weight-sharing super-network over the cell search space.

Every cell edge owns one parameter bundle per parametric candidate op
(``conv1x1``, ``conv3x3``), shared by all architectures selecting it. A
forward pass for architecture ``a`` touches only the bundles named by ``a``
plus the fixed stem, reduction, head and classifier parameters.

Candidate conv ops are ReLU -> conv -> BN without affine terms; the fixed
layers use affine BN. The classifier is the final linear layer and the only
``classifier``-tagged parameter group.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .core import ops
from .core.ops import BNStats
from .core.params import BACKBONE, CLASSIFIER, ParamSet
from .core.tensor import Tensor, no_grad
from .space import CellArch, PARAMETRIC_OPS, SearchSpaceSpec

logger = logging.getLogger(__name__)

RECAL_BATCHES = 8
RECAL_BATCH_SIZE = 64


@dataclass
class Supernet:
    spec: SearchSpaceSpec
    params: ParamSet
    bn_state: dict[str, BNStats]
    provenance: dict = field(default_factory=dict)

    def copy(self) -> "Supernet":
        return Supernet(
            self.spec,
            self.params.copy(),
            {k: v.copy() for k, v in self.bn_state.items()},
            dict(self.provenance),
        )

    @property
    def dtype(self):
        return self.params["stem.conv.weight"].dtype


def edge_key(cell: int, edge: int, op: str) -> str:
    return f"cell{cell}.e{edge}.{op}"


def cell_widths(spec: SearchSpaceSpec) -> list[int]:
    return [w for w in spec.stage_widths for _ in range(spec.cells_per_stage)]


def path_keys(spec: SearchSpaceSpec, arch: CellArch) -> list[str]:
    """Parameter-bundle prefixes selected by ``arch`` (excluding the fixed layers)."""
    names = arch.op_names()
    return [
        edge_key(c, e, op)
        for c in range(spec.num_cells)
        for e, op in enumerate(names)
        if op in PARAMETRIC_OPS
    ]


def _kaiming(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def _init_classifier(params: ParamSet, rng, num_classes: int, width: int, dtype) -> None:
    bound = 1.0 / np.sqrt(width)
    params.add("classifier.weight", rng.uniform(-bound, bound, (num_classes, width)).astype(dtype), CLASSIFIER)
    params.add("classifier.bias", np.zeros(num_classes, dtype=dtype), CLASSIFIER)


def init_supernet(spec: SearchSpaceSpec, seed: int, dtype=np.float32) -> Supernet:
    rng = np.random.default_rng(seed)
    p = ParamSet()
    bn: dict[str, BNStats] = {}
    c_in = spec.input_shape[0]

    def affine_bn(name, width):
        p.add(f"{name}.gamma", np.ones(width, dtype=dtype))
        p.add(f"{name}.beta", np.zeros(width, dtype=dtype))
        bn[name] = BNStats(width, dtype)

    p.add("stem.conv.weight", _kaiming(rng, (spec.stem_width, c_in, 3, 3), 9 * c_in, dtype))
    affine_bn("stem.bn", spec.stem_width)
    if spec.stem_width != spec.stage_widths[0]:
        w0 = spec.stage_widths[0]
        p.add("stem.proj.weight", _kaiming(rng, (w0, spec.stem_width, 1, 1), spec.stem_width, dtype))

    cell = 0
    prev = spec.stage_widths[0]
    for s, width in enumerate(spec.stage_widths):
        if s > 0:
            p.add(f"reduce{s}.conv.weight", _kaiming(rng, (width, prev, 3, 3), 9 * prev, dtype))
            affine_bn(f"reduce{s}.bn", width)
        for _ in range(spec.cells_per_stage):
            for e in range(spec.num_edges):
                for op, k in (("conv1x1", 1), ("conv3x3", 3)):
                    key = edge_key(cell, e, op)
                    p.add(f"{key}.weight", _kaiming(rng, (width, width, k, k), width * k * k, dtype))
                    bn[f"{key}.bn"] = BNStats(width, dtype)
            cell += 1
        prev = width
    affine_bn("head.bn", prev)
    _init_classifier(p, rng, spec.num_classes, prev, dtype)
    return Supernet(spec, p.seal(), bn, {})


def replace_classifier(net: Supernet, num_classes: int, seed: int) -> Supernet:
    """Copy of ``net`` with a freshly initialized head for ``num_classes`` classes."""
    spec = net.spec.with_classes(num_classes)
    p = ParamSet()
    for k in net.params:
        if net.params.tag(k) == BACKBONE:
            p.add(k, net.params[k].data.copy(), BACKBONE)
    rng = np.random.default_rng([seed, 0xC1A55])
    _init_classifier(p, rng, num_classes, spec.stage_widths[-1], net.dtype)
    bn = {k: v.copy() for k, v in net.bn_state.items()}
    return Supernet(spec, p.seal(), bn, dict(net.provenance))


# ------------------------------------------------------------------- forward


def _bn(x, net, name, bn_state, training, collect, affine=True):
    p = net.params
    gamma = p[f"{name}.gamma"] if affine else None
    beta = p[f"{name}.beta"] if affine else None
    sink = collect.setdefault(name, {}) if collect is not None else None
    return ops.batch_norm(x, gamma, beta, bn_state[name], training, collect=sink)


def _cell(x, net, cell, names, bn_state, training, collect):
    nodes = [x]
    e = 0
    k = net.spec.num_nodes
    for j in range(1, k):
        terms = []
        for i in range(j):
            op = names[e]
            src = nodes[i]
            if op == "skip":
                terms.append(src)
            elif op == "avgpool3x3":
                terms.append(ops.avg_pool3x3(src))
            elif op in PARAMETRIC_OPS:
                key = edge_key(cell, e, op)
                pad = 1 if op == "conv3x3" else 0
                h = ops.conv2d(ops.relu(src), net.params[f"{key}.weight"], pad=pad)
                terms.append(_bn(h, net, f"{key}.bn", bn_state, training, collect, affine=False))
            e += 1
        nodes.append(ops.add_n(terms) if terms else ops.zeros_like(x))
    return nodes[-1]


def features(net: Supernet, arch: CellArch, x: Tensor, training: bool, bn_state=None, collect=None) -> Tensor:
    """Backbone output after the head BN + ReLU and global average pooling."""
    if len(arch.edge_ops) != net.spec.num_edges:
        raise ValueError(f"architecture {arch} does not fit a {net.spec.num_nodes}-node cell")
    bn_state = net.bn_state if bn_state is None else bn_state
    p = net.params
    names = arch.op_names()
    h = ops.conv2d(x, p["stem.conv.weight"], pad=1)
    h = _bn(h, net, "stem.bn", bn_state, training, collect)
    if "stem.proj.weight" in p:
        h = ops.conv2d(h, p["stem.proj.weight"])
    cell = 0
    for s, _ in enumerate(net.spec.stage_widths):
        if s > 0:
            h = ops.conv2d(ops.relu(h), p[f"reduce{s}.conv.weight"], stride=2, pad=1)
            h = _bn(h, net, f"reduce{s}.bn", bn_state, training, collect)
        for _ in range(net.spec.cells_per_stage):
            h = _cell(h, net, cell, names, bn_state, training, collect)
            cell += 1
    h = ops.relu(_bn(h, net, "head.bn", bn_state, training, collect))
    return ops.global_avg_pool(h)


def forward(net: Supernet, arch: CellArch, x: Tensor, training: bool, bn_state=None, collect=None) -> Tensor:
    f = features(net, arch, x, training, bn_state, collect)
    return ops.linear(f, net.params["classifier.weight"], net.params["classifier.bias"])


# ---------------------------------------------------------------- evaluation


def _path_bn_names(net: Supernet, arch: CellArch) -> list[str]:
    fixed = [k for k in net.bn_state if not k.startswith("cell")]
    return fixed + [f"{k}.bn" for k in path_keys(net.spec, arch)]


def recalibrate_bn(
    net: Supernet,
    arch: CellArch,
    calib_data,
    batches: int = RECAL_BATCHES,
    batch_size: int = RECAL_BATCH_SIZE,
    seed: int = 0,
    bn_state: dict | None = None,
) -> dict[str, BNStats]:
    """Recompute running statistics on ``arch``'s path from calibration batches.

    Statistics are the exact average of per-batch means and unbiased
    variances. Sites off the path are left untouched. Updates ``bn_state``
    (default: ``net.bn_state``) in place and returns it.
    """
    if len(calib_data) == 0:
        raise ValueError("calibration data is empty")
    target = net.bn_state if bn_state is None else bn_state
    order = np.random.default_rng(seed).permutation(len(calib_data))
    collect: dict = {}
    with no_grad():
        for b in range(batches):
            idx = order[b * batch_size : (b + 1) * batch_size]
            if len(idx) == 0:
                break
            x = Tensor(calib_data.images[idx].astype(net.dtype, copy=False))
            forward(net, arch, x, training=True, bn_state=target, collect=collect)
    for name in _path_bn_names(net, arch):
        if name not in collect:
            continue
        st = target[name]
        st.mean = np.mean(collect[name]["mean"], axis=0).astype(st.mean.dtype)
        st.var = np.mean(collect[name]["var"], axis=0).astype(st.var.dtype)
    return target


@dataclass
class EvalResult:
    accuracy: float
    per_class_correct: np.ndarray
    per_class_total: np.ndarray


def predict(net: Supernet, arch: CellArch, data, bn_state=None, batch_size: int = 256) -> np.ndarray:
    preds = []
    with no_grad():
        for s in range(0, len(data), batch_size):
            x = Tensor(data.images[s : s + batch_size].astype(net.dtype, copy=False))
            logits = forward(net, arch, x, training=False, bn_state=bn_state)
            preds.append(np.argmax(logits.data, axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def evaluate(net: Supernet, arch: CellArch, val_data, calib_data=None, recalibrate: bool = True) -> EvalResult:
    """Top-1 accuracy with per-class counts, using a private copy of BN state."""
    state = {k: v.copy() for k, v in net.bn_state.items()}
    if recalibrate:
        recalibrate_bn(net, arch, calib_data if calib_data is not None else val_data, bn_state=state)
    preds = predict(net, arch, val_data, bn_state=state)
    k = net.spec.num_classes
    correct = np.bincount(val_data.labels[preds == val_data.labels], minlength=k)
    total = np.bincount(val_data.labels, minlength=k)
    return EvalResult(float((preds == val_data.labels).mean()), correct, total)


def eval_subnet(net: Supernet, arch: CellArch, val_data, calib_data=None) -> float:
    """Validation accuracy of ``arch`` inside ``net`` after BN recalibration.

    Calibration batches come from ``calib_data`` (normally the training split)
    and fall back to ``val_data``. ``net`` itself is not modified.
    """
    return evaluate(net, arch, val_data, calib_data).accuracy

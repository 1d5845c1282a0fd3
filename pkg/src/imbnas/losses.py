"""Class reweighting by effective number of samples, and deferred reweighting.

Three loss regimes share one implementation:

* plain cross-entropy: ``LossConfig(drw_epoch=None)``
* reweighted from the start: ``LossConfig(drw_epoch=0)``
* deferred reweighting (DRW): ``LossConfig(drw_epoch=k)`` switches at epoch ``k``
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core.tensor import Tensor

DEFAULT_BETA = 0.9999


@dataclass(frozen=True)
class LossConfig:
    beta: float = DEFAULT_BETA
    drw_epoch: int | None = None
    # Rescale weights to sum to the class count.
    normalize: bool = True

    def __post_init__(self):
        if not 0 <= self.beta < 1:
            raise ValueError(f"beta must lie in [0, 1), got {self.beta}")
        if self.drw_epoch is not None and self.drw_epoch < 0:
            raise ValueError("drw_epoch must be >= 0 or None")


def effective_number_weights(counts: Sequence[int], beta: float, normalize: bool = False) -> np.ndarray:
    """Per-class weights ``(1 - beta) / (1 - beta**n_j)`` in float64."""
    if not 0 <= beta < 1:
        raise ValueError(f"beta must lie in [0, 1), got {beta}")
    n = np.asarray(counts, dtype=np.float64)
    if n.ndim != 1 or n.size == 0:
        raise ValueError("counts must be a nonempty 1-d sequence")
    if np.any(n < 1):
        raise ValueError("every class needs at least one sample")
    w = (1.0 - beta) / (1.0 - np.power(beta, n))
    if normalize:
        w = w * (n.size / w.sum())
    return w


def weights_at_epoch(epoch: int, cfg: LossConfig, counts: Sequence[int]) -> np.ndarray:
    """Uniform weights before the DRW switch, effective-number weights from it on."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if cfg.drw_epoch is None or epoch < cfg.drw_epoch:
        return np.ones(len(counts), dtype=np.float64)
    return effective_number_weights(counts, cfg.beta, cfg.normalize)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def weighted_cross_entropy(logits: Tensor, labels, class_weights=None) -> Tensor:
    """Weighted mean of per-sample NLL, normalized by the batch's weight sum.

    With all class weights equal this takes the unweighted path, so the result
    is bit-identical to plain cross-entropy.
    """
    z = logits.data
    labels = np.asarray(labels, dtype=np.int64)
    if z.ndim != 2:
        raise ValueError(f"logits must be B x C, got shape {z.shape}")
    b, c = z.shape
    if b == 0:
        raise ValueError("empty batch")
    if labels.shape != (b,):
        raise ValueError(f"labels shape {labels.shape} does not match batch size {b}")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError("labels out of range")

    logp = _log_softmax(z)
    nll = -logp[np.arange(b), labels]

    cw = None if class_weights is None else np.asarray(class_weights, dtype=np.float64)
    if cw is not None and cw.shape != (c,):
        raise ValueError(f"class_weights must have length {c}")
    if cw is None or np.all(cw == cw[0]):
        sw = None
        loss = nll.sum() / b
    else:
        sw = cw[labels].astype(z.dtype)
        loss = (sw * nll).sum() / sw.sum()

    def backward_fn(g):
        grad = np.exp(logp)
        grad[np.arange(b), labels] -= 1
        if sw is None:
            grad *= g / b
        else:
            grad *= (g * sw / sw.sum())[:, None]
        return (grad.astype(z.dtype, copy=False),)

    return Tensor._from_op(np.asarray(loss, dtype=z.dtype), (logits,), backward_fn)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    return weighted_cross_entropy(logits, labels, None)

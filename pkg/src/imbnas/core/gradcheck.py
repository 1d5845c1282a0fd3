from __future__ import annotations

import math
from typing import Callable, Mapping

import numpy as np

from .tensor import Tensor


def default_eps(dtype) -> float:
    return 1e-6 if np.dtype(dtype) == np.float64 else 1e-3


def finite_diff_grad(
    loss_fn: Callable[[], float],
    params: Mapping[str, Tensor],
    eps: float | None = None,
) -> dict[str, np.ndarray]:
    """Central-difference gradient of ``loss_fn`` w.r.t. every scalar in ``params``.

    ``loss_fn`` is re-evaluated after each perturbation and must read the
    parameters' current values. Values are restored exactly afterwards.
    """
    out = {}
    for key, p in params.items():
        e = default_eps(p.dtype) if eps is None else eps
        if e <= 0:
            raise ValueError("eps must be positive")
        if not p.data.flags.c_contiguous:
            p.data = np.ascontiguousarray(p.data)
        flat = p.data.reshape(-1)
        g = np.zeros(flat.shape, dtype=np.float64)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + e
            hi = float(flat[i])
            fp = float(loss_fn())
            flat[i] = orig - e
            lo = float(flat[i])
            fm = float(loss_fn())
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise FloatingPointError(f"non-finite loss while perturbing {key}[{i}]")
            # divide by the step actually taken; in float32 p +/- eps is rounded
            g[i] = (fp - fm) / (hi - lo)
        out[key] = g.reshape(p.data.shape)
    return out


def max_rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """max |a-b| / max(|a|, |b|, floor), elementwise."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> float:
    """Norm-wise relative error ||a-b|| / max(||a||, ||b||, floor).

    Unlike :func:`max_rel_error` this is not dominated by entries whose true
    value is near zero, where finite differences carry only rounding noise.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)

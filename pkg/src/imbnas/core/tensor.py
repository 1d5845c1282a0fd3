"""Dense tensors with a recorded reverse-mode graph.

A ``Tensor`` wraps a NumPy array. Operations in :mod:`imbnas.core.ops` build
new tensors that remember their parents and a closure mapping the output
gradient to parent gradients. Calling :func:`backward` on a scalar walks that
graph in reverse topological order.

Only tensors reachable from a ``requires_grad`` leaf are recorded, so a frozen
backbone costs a plain forward pass.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block, even for ``requires_grad`` inputs."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class TapeError(RuntimeError):
    """Raised when a recorded graph can no longer be differentiated."""


class Tensor:
    __slots__ = (
        "data",
        "grad",
        "requires_grad",
        "name",
        "_parents",
        "_backward",
        "_saved_versions",
        "_version",
    )

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._saved_versions: tuple[int, ...] = ()
        self._version = 0

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward_fn) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out._version = 0
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward_fn
            out._saved_versions = tuple(p._version for p in parents)
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
            out._saved_versions = ()
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def bump_version(self) -> None:
        """Mark an in-place mutation; graphs recorded before it become stale."""
        self._version += 1

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def backward(self, seed_grad=None) -> None:
        backward(self, seed_grad)


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor, seed_grad=None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    ``loss`` must be a scalar unless ``seed_grad`` supplies a full cotangent.
    """
    if not loss.requires_grad:
        return
    if seed_grad is None:
        if loss.data.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        seed_grad = np.ones_like(loss.data)
    seed = np.asarray(seed_grad, dtype=loss.dtype).reshape(loss.shape)

    order = _toposort(loss)
    grads: dict[int, np.ndarray] = {id(loss): seed}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, saved in zip(node._parents, node._saved_versions):
            if parent._version != saved:
                raise TapeError(
                    f"parameter {parent.name or parent!r} was modified after the forward pass; "
                    "re-run the forward before calling backward"
                )
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def grad_map(loss: Tensor, params: Mapping[str, Tensor], seed_grad=1.0) -> dict[str, np.ndarray]:
    """Run backward from ``loss`` and return a gradient for every named parameter.

    Existing ``.grad`` buffers are cleared first. Parameters the graph never
    reached receive an all-zero gradient.
    """
    for p in params.values():
        p.grad = None
    backward(loss, seed_grad)
    return {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def leaves(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.is_leaf]

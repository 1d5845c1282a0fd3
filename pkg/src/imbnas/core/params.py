from __future__ import annotations

from collections.abc import Mapping
from typing import Iterable, Iterator

import numpy as np

from .tensor import Tensor

BACKBONE = "backbone"
CLASSIFIER = "classifier"
TAGS = (BACKBONE, CLASSIFIER)


class ParamSet(Mapping):
    """Named parameters, each tagged ``backbone`` or ``classifier``.

    The key set is closed by :meth:`seal`; afterwards keys can be neither added
    nor removed, only their values updated in place.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._tags: dict[str, str] = {}
        self._sealed = False

    def add(self, key: str, value: np.ndarray, tag: str = BACKBONE) -> Tensor:
        if self._sealed:
            raise KeyError(f"parameter set is sealed; cannot add {key!r}")
        if tag not in TAGS:
            raise ValueError(f"unknown tag {tag!r}")
        if key in self._params:
            raise KeyError(f"duplicate parameter {key!r}")
        t = Tensor(value, requires_grad=True, name=key, dtype=value.dtype)
        self._params[key] = t
        self._tags[key] = tag
        return t

    def seal(self) -> "ParamSet":
        self._sealed = True
        return self

    def __getitem__(self, key: str) -> Tensor:
        return self._params[key]

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def tag(self, key: str) -> str:
        return self._tags[key]

    def keys_with(self, tag: str) -> list[str]:
        return [k for k, t in self._tags.items() if t == tag]

    def numel(self, tags: Iterable[str] | None = None) -> int:
        tags = set(TAGS if tags is None else tags)
        return sum(p.data.size for k, p in self._params.items() if self._tags[k] in tags)

    def set_trainable(self, tags: Iterable[str]) -> None:
        """Only parameters whose tag is in ``tags`` will record gradients."""
        tags = set(tags)
        for k, p in self._params.items():
            p.requires_grad = self._tags[k] in tags

    def trainable_keys(self) -> list[str]:
        return [k for k, p in self._params.items() if p.requires_grad]

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def assign(self, key: str, value: np.ndarray) -> None:
        p = self._params[key]
        if value.shape != p.data.shape:
            raise ValueError(f"{key}: shape {value.shape} does not match {p.data.shape}")
        p.data = np.array(value, dtype=p.data.dtype, copy=True)
        p.bump_version()

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self._params.items()}

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self._params.items()}

    def copy(self) -> "ParamSet":
        out = ParamSet()
        for k, p in self._params.items():
            t = out.add(k, p.data.copy(), self._tags[k])
            t.requires_grad = p.requires_grad
        out._sealed = self._sealed
        return out

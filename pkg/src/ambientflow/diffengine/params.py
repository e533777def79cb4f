from __future__ import annotations

from collections import OrderedDict
from contextlib import contextmanager
from typing import Iterator

import numpy as np

from ..errors import ConfigError
from .tensor import Tensor


class ParameterStore:
    """Ordered name -> trainable tensor map.

    Iteration order is insertion order, so two stores built by the same code
    path flatten identically.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self._params: OrderedDict[str, Tensor] = OrderedDict()

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64, copy=True), requires_grad=True)
        self._params[name] = t
        return t

    @contextmanager
    def frozen(self):
        """Temporarily exclude every parameter from gradient tracking."""
        flags = [t.requires_grad for t in self._params.values()]
        for t in self._params.values():
            t.requires_grad = False
        try:
            yield self
        finally:
            for t, f in zip(self._params.values(), flags):
                t.requires_grad = f

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def merge(self, other: "ParameterStore", prefix: str) -> None:
        """Adopt the tensors of ``other`` under ``prefix.`` (shared, not copied)."""
        for name, t in other.items():
            key = f"{prefix}.{name}"
            if key in self._params:
                raise ConfigError(f"duplicate parameter name {key!r}")
            self._params[key] = t

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {k: (np.zeros_like(t.data) if t.grad is None else t.grad)
                for k, t in self._params.items()}

    def num_parameters(self) -> int:
        return sum(t.size for t in self._params.values())

    def flat(self) -> np.ndarray:
        if not self._params:
            return np.zeros(0)
        return np.concatenate([t.data.ravel() for t in self._params.values()])

    def flat_grad(self) -> np.ndarray:
        return np.concatenate([g.ravel() for g in self.grads().values()]) if self._params else np.zeros(0)

    def set_flat(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.num_parameters():
            raise ConfigError(f"flat vector has {vec.size} entries, store has {self.num_parameters()}")
        i = 0
        for t in self._params.values():
            t.data = vec[i:i + t.size].reshape(t.shape).copy()
            i += t.size

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._params) ^ set(state)
        if missing:
            raise ConfigError(f"parameter names differ: {sorted(missing)}")
        for k, t in self._params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != t.shape:
                raise ConfigError(f"parameter {k!r}: shape {arr.shape} != {t.shape}")
            t.data = arr.copy()

"""Named weight store with per-entry gradient slots."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class ParamStore:
    """Ordered name -> weight tensor mapping.

    Entries require gradients; accumulation happens during backward passes
    under a single-writer contract. Iteration order is insertion order, which
    keeps optimizer updates and checkpoints deterministic.
    """

    def __init__(self):
        self._entries: dict[str, Tensor] = {}

    def add(self, name: str, value: np.ndarray, dtype=np.float32) -> Tensor:
        if name in self._entries:
            raise ValueError(f"duplicate parameter name: {name!r}")
        t = Tensor(np.ascontiguousarray(value, dtype=dtype), requires_grad=True, dtype=dtype)
        t.name = name
        self._entries[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def values(self):
        return self._entries.values()

    def n_scalars(self) -> int:
        return sum(t.data.size for t in self._entries.values())

    def zero_grad(self) -> None:
        for t in self._entries.values():
            t.grad = None

    def astype(self, dtype) -> "ParamStore":
        out = ParamStore()
        for name, t in self._entries.items():
            out.add(name, t.data.astype(dtype), dtype=dtype)
        return out

    def copy(self) -> "ParamStore":
        return self.astype(next(iter(self._entries.values())).data.dtype) if self._entries else ParamStore()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._entries.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self._entries):
            missing = set(self._entries) - set(state)
            extra = set(state) - set(self._entries)
            raise ValueError(f"parameter name mismatch (missing={sorted(missing)}, extra={sorted(extra)})")
        for name, value in state.items():
            t = self._entries[name]
            if t.data.shape != value.shape:
                raise ValueError(f"shape mismatch for {name!r}: {t.data.shape} vs {value.shape}")
            t.data = np.asarray(value, dtype=t.data.dtype).copy()

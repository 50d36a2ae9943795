"""Named tensor registry: frozen base weights vs trainable adapter weights.

Serialization, optimizer iteration, and integrity digests all key off tensor
names, so names are unique and every walk over the store happens in sorted
name order (deterministic regardless of build order).
"""

from __future__ import annotations

import hashlib

import numpy as np

from skattn.autodiff import ShapeMismatch, Tensor

__all__ = ["ParamStore"]


class ParamStore:
    """A flat name -> Tensor map with stable iteration order."""

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}

    def register(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._tensors:
            raise ShapeMismatch(f"duplicate parameter name {name!r}")
        self._tensors[name] = tensor
        return tensor

    def register_all(self, named) -> None:
        for name, tensor in named:
            self.register(name, tensor)

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self) -> list[tuple[str, Tensor]]:
        return sorted(self._tensors.items())

    def names(self) -> list[str]:
        return sorted(self._tensors)

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self.items() if t.requires_grad]

    def frozen(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self.items() if not t.requires_grad]

    def digest(self, names=None) -> str:
        """SHA-256 over (name, shape, raw bytes) in sorted name order."""
        h = hashlib.sha256()
        chosen = self.names() if names is None else sorted(names)
        for name in chosen:
            t = self._tensors[name]
            h.update(name.encode())
            h.update(repr(t.data.shape).encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        """Copy values into existing tensors; names and shapes must match."""
        missing = set(self._tensors) - set(arrays)
        extra = set(arrays) - set(self._tensors)
        if missing or extra:
            raise ShapeMismatch(
                f"parameter set mismatch: missing {sorted(missing)[:4]}, extra {sorted(extra)[:4]}"
            )
        for name, t in self._tensors.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise ShapeMismatch(f"{name}: stored {arr.shape} vs model {t.data.shape}")
            t.data = arr.copy()

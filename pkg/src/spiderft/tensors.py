"""Flat-vector tensor primitives shared by every other module.

A FlatTensor is a named, contiguous float64 vector plus the shape it was
flattened from.  A TensorMap is an insertion-ordered collection of uniquely
named FlatTensors; it stands in for a model's trainable-parameter set, its
gradients, importance scores, and update masks.  All transforms here are
pure: inputs are never mutated, outputs are fresh arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator

import numpy as np
from scipy.special import expit

from .errors import AlignmentError, ZeroNormError

# Degenerate-spread guard for zscore and the zero-direction guard for cosine.
STD_EPS = 1e-12
NORM_EPS = 1e-12

_SIG_LO = np.nextafter(0.0, 1.0)
_SIG_HI = np.nextafter(1.0, 0.0)


@dataclass
class FlatTensor:
    """A named 1-D float64 vector with the shape it represents."""

    name: str
    shape: tuple[int, ...]
    data: np.ndarray

    def __post_init__(self):
        self.shape = tuple(int(d) for d in self.shape)
        self.data = np.ascontiguousarray(self.data, dtype=np.float64).reshape(-1)
        if self.data.size != self.size:
            raise ValueError(
                f"tensor {self.name!r}: data length {self.data.size} does not "
                f"match shape {self.shape}"
            )
        if not np.all(np.isfinite(self.data)):
            raise ValueError(f"tensor {self.name!r}: non-finite entries")

    @classmethod
    def of(cls, name: str, values, shape: tuple[int, ...] | None = None) -> "FlatTensor":
        arr = np.asarray(values, dtype=np.float64)
        if shape is None:
            shape = arr.shape if arr.ndim > 0 else (1,)
        return cls(name, tuple(shape), arr.reshape(-1))

    @property
    def size(self) -> int:
        return int(math.prod(self.shape))

    def view(self) -> np.ndarray:
        """The data reshaped to `shape` (no copy)."""
        return self.data.reshape(self.shape)

    def copy(self) -> "FlatTensor":
        return FlatTensor(self.name, self.shape, self.data.copy())

    def with_data(self, data: np.ndarray) -> "FlatTensor":
        """Same name/shape, new payload."""
        return FlatTensor(self.name, self.shape, data)


@dataclass
class TensorMap:
    """Insertion-ordered, uniquely named collection of FlatTensors."""

    _entries: dict[str, FlatTensor] = field(default_factory=dict)

    @classmethod
    def from_tensors(cls, tensors: Iterable[FlatTensor]) -> "TensorMap":
        tm = cls()
        for t in tensors:
            tm.add(t)
        return tm

    def add(self, t: FlatTensor) -> None:
        if t.name in self._entries:
            raise ValueError(f"duplicate tensor name {t.name!r}")
        self._entries[t.name] = t

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[FlatTensor]:
        return iter(self._entries.values())

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __getitem__(self, name: str) -> FlatTensor:
        return self._entries[name]

    @property
    def names(self) -> list[str]:
        return list(self._entries)

    @property
    def total_size(self) -> int:
        return sum(t.size for t in self)

    def signature(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(t.name, t.shape) for t in self]

    def aligned_with(self, other: "TensorMap") -> bool:
        return self.signature() == other.signature()

    def require_aligned(self, other: "TensorMap", op: str) -> None:
        if not self.aligned_with(other):
            raise AlignmentError(
                f"{op}: tensor maps are not aligned "
                f"({self.signature()} vs {other.signature()})"
            )

    def concat(self) -> np.ndarray:
        """All entries concatenated in iteration order."""
        if not self._entries:
            return np.empty(0, dtype=np.float64)
        return np.concatenate([t.data for t in self])

    def copy(self) -> "TensorMap":
        return TensorMap.from_tensors(t.copy() for t in self)

    def map_data(self, fn: Callable[[np.ndarray], np.ndarray]) -> "TensorMap":
        return TensorMap.from_tensors(t.with_data(fn(t.data)) for t in self)

    def zip_data(
        self, other: "TensorMap", fn: Callable[[np.ndarray, np.ndarray], np.ndarray], op: str
    ) -> "TensorMap":
        self.require_aligned(other, op)
        return TensorMap.from_tensors(
            a.with_data(fn(a.data, b.data)) for a, b in zip(self, other)
        )


# ---------------------------------------------------------------------------
# Elementwise transforms
# ---------------------------------------------------------------------------


def elementwise_abs(t: FlatTensor) -> FlatTensor:
    return t.with_data(np.abs(t.data))


def zscore(t: FlatTensor) -> FlatTensor:
    """Center and scale by the population std; constant inputs map to zeros."""
    return t.with_data(zscore_array(t.data))


def zscore_array(values: np.ndarray) -> np.ndarray:
    std = float(np.std(values))
    if std < STD_EPS:
        return np.zeros_like(values)
    return (values - np.mean(values)) / std


def sigmoid(t: FlatTensor) -> FlatTensor:
    return t.with_data(sigmoid_array(t.data))


def sigmoid_array(values: np.ndarray) -> np.ndarray:
    # expit saturates to exactly 0.0/1.0 in float64 past |x| ~ 37; clamp to
    # the nearest interior representable so outputs stay strictly in (0, 1).
    return np.clip(expit(values), _SIG_LO, _SIG_HI)


def cosine_similarity(a: FlatTensor, b: FlatTensor) -> float:
    if a.shape != b.shape:
        raise AlignmentError(
            f"cosine_similarity: shapes differ ({a.shape} vs {b.shape})"
        )
    na = float(np.linalg.norm(a.data))
    nb = float(np.linalg.norm(b.data))
    if na < NORM_EPS or nb < NORM_EPS:
        raise ZeroNormError(
            f"cosine_similarity: zero-norm input ({a.name!r}: {na:g}, {b.name!r}: {nb:g})"
        )
    c = float(np.dot(a.data, b.data)) / (na * nb)
    return min(1.0, max(-1.0, c))


def masked_mean(t: FlatTensor) -> tuple[float, bool]:
    """Mean over nonzero entries; (0.0, True) when nothing is nonzero."""
    nz = t.data[t.data != 0.0]
    if nz.size == 0:
        return 0.0, True
    return float(np.mean(nz)), False


# ---------------------------------------------------------------------------
# Map-level normalization (scope switch shared by importance and masking)
# ---------------------------------------------------------------------------

NORMALIZATION_SCOPES = ("per_tensor", "global")


def zscore_map(tm: TensorMap, scope: str = "per_tensor") -> TensorMap:
    """Z-normalize each tensor, either on its own stats or on global ones."""
    if scope == "per_tensor":
        return tm.map_data(zscore_array)
    if scope == "global":
        flat = tm.concat()
        std = float(np.std(flat)) if flat.size else 0.0
        if std < STD_EPS:
            return tm.map_data(np.zeros_like)
        mean = float(np.mean(flat))
        return tm.map_data(lambda d: (d - mean) / std)
    raise ValueError(f"unknown normalization scope {scope!r}")

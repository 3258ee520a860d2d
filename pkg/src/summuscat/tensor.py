"""Dense rank-3 tensors, CP reconstruction and flat parameter vectors.

Predictor tensors use the axis order ``(N, T, S)``: variables, time, task.
``X[:, t, s]`` is therefore the predictor vector of task ``s`` at time ``t``.
All arrays are C-ordered float64.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import NumericError, ShapeError

FULL_DEGENERATE = "full"
TEMPORAL_RETAINED = "temporal"
MODES = (FULL_DEGENERATE, TEMPORAL_RETAINED)

_COMPONENT = "tensor"


def _readonly(arr):
    arr = np.array(arr, dtype=np.float64, order="C", copy=True)
    arr.setflags(write=False)
    return arr


class DenseTensor3:
    """Immutable dense tensor of shape ``(d1, d2, d3)`` stored row-major."""

    __slots__ = ("_data",)

    def __init__(self, data):
        data = np.asarray(data, dtype=np.float64)
        if data.ndim != 3:
            raise ShapeError(f"expected a rank-3 array, got shape {data.shape}", component=_COMPONENT)
        if min(data.shape) < 1:
            raise ShapeError(f"all dims must be positive, got {data.shape}", component=_COMPONENT)
        if not np.all(np.isfinite(data)):
            raise NumericError("tensor contains non-finite entries", component=_COMPONENT)
        self._data = _readonly(data)

    @classmethod
    def from_values(cls, dims, values):
        dims = tuple(int(d) for d in dims)
        values = np.asarray(values, dtype=np.float64).ravel()
        if len(dims) != 3 or values.size != dims[0] * dims[1] * dims[2]:
            raise ShapeError(f"{values.size} values do not fill dims {dims}", component=_COMPONENT)
        return cls(values.reshape(dims))

    @property
    def dims(self):
        return self._data.shape

    @property
    def values(self):
        """Flat view in row-major order (first axis slowest)."""
        return self._data.reshape(-1)

    @property
    def array(self):
        return self._data

    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self._data
        return self._data.astype(dtype)

    def __eq__(self, other):
        if not isinstance(other, DenseTensor3):
            return NotImplemented
        return self.dims == other.dims and np.array_equal(self._data, other._data)

    def __repr__(self):
        return f"DenseTensor3(dims={self.dims})"


@dataclass(frozen=True)
class CPFactors:
    """Full CP factors: spatial ``A`` (S, K), temporal ``B`` (T, K), per-scale ``C[l]`` (N, K)."""

    A: np.ndarray
    B: np.ndarray
    C: tuple

    def __post_init__(self):
        A = _readonly(self.A)
        B = _readonly(self.B)
        C = tuple(_readonly(c) for c in self.C)
        if A.ndim != 2 or B.ndim != 2 or any(c.ndim != 2 for c in C):
            raise ShapeError("CP factors must be matrices", component=_COMPONENT)
        if not C:
            raise ShapeError("at least one scale factor is required", component=_COMPONENT)
        K = A.shape[1]
        if B.shape[1] != K or any(c.shape[1] != K for c in C):
            raise ShapeError("factor matrices disagree on rank K", component=_COMPONENT)
        N = C[0].shape[0]
        if any(c.shape[0] != N for c in C):
            raise ShapeError("scale factors disagree on N", component=_COMPONENT)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "C", C)

    @property
    def K(self):
        return self.A.shape[1]

    @property
    def L(self):
        return len(self.C)


@dataclass(frozen=True)
class DegenerateCPFactors:
    """Vector-degenerate factors.

    ``b`` is a length-K vector in ``"full"`` mode and a ``(T, K)`` matrix in
    ``"temporal"`` mode, where only the spatial factors collapse to a vector.
    """

    a: np.ndarray
    b: np.ndarray
    C: tuple
    mode: str = FULL_DEGENERATE

    def __post_init__(self):
        if self.mode not in MODES:
            raise ShapeError(f"unknown mode {self.mode!r}", component=_COMPONENT)
        a = _readonly(self.a)
        b = _readonly(self.b)
        C = tuple(_readonly(c) for c in self.C)
        if a.ndim != 1:
            raise ShapeError("a must be a vector", component=_COMPONENT)
        K = a.shape[0]
        want_b = 1 if self.mode == FULL_DEGENERATE else 2
        if b.ndim != want_b or b.shape[-1] != K:
            raise ShapeError(f"b has shape {b.shape}, inconsistent with mode {self.mode!r} and K={K}",
                             component=_COMPONENT)
        if not C or any(c.ndim != 2 or c.shape[1] != K for c in C):
            raise ShapeError("scale factors must be (N, K) matrices", component=_COMPONENT)
        if any(c.shape[0] != C[0].shape[0] for c in C):
            raise ShapeError("scale factors disagree on N", component=_COMPONENT)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "C", C)

    @property
    def K(self):
        return self.a.shape[0]

    @property
    def L(self):
        return len(self.C)

    @property
    def N(self):
        return self.C[0].shape[0]


def cp_reconstruct(factors: CPFactors, scale: int) -> DenseTensor3:
    """Rebuild ``X[n, t, s] = sum_k A[s, k] B[t, k] C[scale][n, k]``."""
    if not 0 <= scale < factors.L:
        raise ShapeError(f"scale {scale} out of range for L={factors.L}", component=_COMPONENT)
    X = np.einsum("sk,tk,nk->nts", factors.A, factors.B, factors.C[scale], optimize=False)
    return DenseTensor3(X)


def cp_reconstruct_degenerate(factors: DegenerateCPFactors, scale: int, t: int = 0) -> np.ndarray:
    """Per-slice reconstruction ``sum_k a_k b_k C[scale][:, k]``.

    In ``"temporal"`` mode ``b_k`` is read from row ``t`` of ``B``; in
    ``"full"`` mode ``t`` is ignored and the same vector comes back for every
    time and task.
    """
    if not 0 <= scale < factors.L:
        raise ShapeError(f"scale {scale} out of range for L={factors.L}", component=_COMPONENT)
    if factors.mode == TEMPORAL_RETAINED:
        if not 0 <= t < factors.b.shape[0]:
            raise ShapeError(f"time {t} out of range for T={factors.b.shape[0]}", component=_COMPONENT)
        bt = factors.b[t]
    else:
        bt = factors.b
    return factors.C[scale] @ (factors.a * bt)


class ParamSchema:
    """Ordered layout of named parameter blocks inside a flat vector."""

    def __init__(self, blocks: Sequence[tuple[str, tuple]]):
        names = [name for name, _ in blocks]
        if len(set(names)) != len(names):
            raise ShapeError("duplicate block names in schema", component=_COMPONENT)
        self.blocks = tuple((name, tuple(int(d) for d in shape)) for name, shape in blocks)
        self.slices = {}
        offset = 0
        for name, shape in self.blocks:
            size = int(np.prod(shape, dtype=np.int64))
            self.slices[name] = slice(offset, offset + size)
            offset += size
        self.size = offset

    @property
    def names(self):
        return tuple(name for name, _ in self.blocks)

    def shape_of(self, name):
        return dict(self.blocks)[name]

    def block_of(self, index):
        """Name of the block holding flat coordinate ``index``."""
        for name, sl in self.slices.items():
            if sl.start <= index < sl.stop:
                return name
        raise IndexError(index)

    def vectorize(self, params: Mapping[str, np.ndarray]) -> "ParamVector":
        out = np.empty(self.size, dtype=np.float64)
        for name, shape in self.blocks:
            block = np.asarray(params[name], dtype=np.float64)
            if block.shape != shape:
                raise ShapeError(f"block {name!r} has shape {block.shape}, schema says {shape}",
                                 component=_COMPONENT)
            out[self.slices[name]] = block.reshape(-1)
        return ParamVector(out, self)

    def devectorize(self, values) -> dict:
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (self.size,):
            raise ShapeError(f"vector of length {values.shape} does not match schema size {self.size}",
                             component=_COMPONENT)
        return {name: values[self.slices[name]].reshape(shape).copy() for name, shape in self.blocks}

    def __eq__(self, other):
        return isinstance(other, ParamSchema) and self.blocks == other.blocks

    def __repr__(self):
        return f"ParamSchema({list(self.blocks)})"


@dataclass(frozen=True)
class ParamVector:
    values: np.ndarray
    layout: ParamSchema

    def __post_init__(self):
        object.__setattr__(self, "values", _readonly(self.values))

    def blocks(self):
        return self.layout.devectorize(self.values)

    def __getitem__(self, name):
        return self.values[self.layout.slices[name]].reshape(self.layout.shape_of(name))


def vectorize(params: Mapping[str, np.ndarray], schema: ParamSchema | None = None) -> ParamVector:
    """Flatten named blocks in schema order (insertion order when no schema is given)."""
    if schema is None:
        schema = ParamSchema([(name, np.shape(block)) for name, block in params.items()])
    return schema.vectorize(params)


def devectorize(vec: ParamVector) -> dict:
    return vec.layout.devectorize(vec.values)


def frobenius_sq_diff(X, Y) -> float:
    """Sum of squared entrywise differences."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.shape != Y.shape:
        raise ShapeError(f"shape mismatch {X.shape} vs {Y.shape}", component=_COMPONENT)
    d = (X - Y).ravel()
    return float(d @ d)

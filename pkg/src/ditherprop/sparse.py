"""Compressed-row gradients and the two sparse backward products.

A :class:`SparseGrad` stores a quantized preactivation gradient as integer
levels times a step size. The products multiply only stored entries and
record how many multiply-accumulates that took against the dense cost.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .tensor import ShapeError


class QuantizerContractError(RuntimeError):
    """A value handed to the compressed format is not on the quantization grid."""


@dataclass
class SparseGrad:
    rows: int
    cols: int
    row_ptr: np.ndarray
    col_idx: np.ndarray
    data: np.ndarray
    levels: np.ndarray | None = None
    delta: float | None = None
    # full-precision entries (NSD bypass or top-k); ``levels`` is then None
    passthrough: bool = False

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    @property
    def nnz(self) -> int:
        return int(self.row_ptr[-1])

    @property
    def density(self) -> float:
        return self.nnz / (self.rows * self.cols)

    @property
    def sparsity(self) -> float:
        size = self.rows * self.cols
        return (size - self.nnz) / size

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.rows, self.cols))
        r = np.repeat(np.arange(self.rows), np.diff(self.row_ptr))
        out[r, self.col_idx] = self.data
        return out

    def row_nnz(self) -> np.ndarray:
        return np.diff(self.row_ptr)

    def check(self) -> None:
        rp = self.row_ptr
        if len(rp) != self.rows + 1 or rp[0] != 0 or np.any(np.diff(rp) < 0):
            raise AssertionError("row_ptr malformed")
        if rp[-1] != len(self.col_idx) or len(self.col_idx) != len(self.data):
            raise AssertionError("nnz mismatch")
        for i in range(self.rows):
            c = self.col_idx[rp[i]:rp[i + 1]]
            if np.any(np.diff(c) <= 0):
                raise AssertionError(f"row {i}: column indices not strictly increasing")
        if len(self.col_idx) and (self.col_idx.min() < 0 or self.col_idx.max() >= self.cols):
            raise AssertionError("column index out of range")
        if np.any(self.data == 0):
            raise AssertionError("explicit zero stored")
        if self.levels is not None:
            if np.any(self.levels == 0):
                raise AssertionError("zero level stored")
            if not np.array_equal(self.levels * self.delta, self.data):
                raise AssertionError("data != levels * delta")

    @classmethod
    def from_levels(cls, shape, row_ptr, col_idx, levels, delta) -> "SparseGrad":
        levels = np.asarray(levels, dtype=np.int64)
        return cls(shape[0], shape[1], row_ptr, col_idx,
                   levels.astype(np.float64) * delta, levels, float(delta))

    @classmethod
    def from_values(cls, g: np.ndarray) -> "SparseGrad":
        """Stores the nonzeros of ``g`` at full precision."""
        rows, cols = np.nonzero(g)
        row_ptr = np.zeros(g.shape[0] + 1, dtype=np.int64)
        np.cumsum(np.bincount(rows, minlength=g.shape[0]), out=row_ptr[1:])
        return cls(g.shape[0], g.shape[1], row_ptr, cols.astype(np.int64),
                   g[rows, cols].astype(np.float64), passthrough=True)


def from_dense(g: np.ndarray, delta: float, rtol: float = 1e-9) -> SparseGrad:
    """Compresses a matrix whose nonzeros are integer multiples of ``delta``."""
    if not delta > 0:
        raise ValueError(f"delta must be positive, got {delta}")
    rows, cols = np.nonzero(g)
    vals = g[rows, cols]
    q = vals / delta
    lv = np.rint(q)
    bad = np.abs(q - lv) > rtol * np.maximum(1.0, np.abs(q))
    if bad.any() or np.any(lv == 0):
        i = int(np.flatnonzero(bad | (lv == 0))[0])
        raise QuantizerContractError(
            f"entry ({rows[i]}, {cols[i]}) = {vals[i]!r} is not a multiple of delta={delta!r}")
    row_ptr = np.zeros(g.shape[0] + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=g.shape[0]), out=row_ptr[1:])
    return SparseGrad.from_levels(g.shape, row_ptr, cols.astype(np.int64), lv, delta)


@dataclass
class MacCounter:
    macs_performed: int = 0
    macs_dense_equivalent: int = 0
    by_layer: dict = field(default_factory=dict)

    def add(self, performed: int, dense: int, layer=None) -> None:
        self.macs_performed += int(performed)
        self.macs_dense_equivalent += int(dense)
        if layer is not None:
            p, d = self.by_layer.get(layer, (0, 0))
            self.by_layer[layer] = (p + int(performed), d + int(dense))

    def merge(self, other: "MacCounter") -> None:
        self.add(other.macs_performed, other.macs_dense_equivalent)
        for layer, (p, d) in other.by_layer.items():
            q, e = self.by_layer.get(layer, (0, 0))
            self.by_layer[layer] = (p + q, d + e)


def savings_ratio(ctr: MacCounter) -> float:
    if ctr.macs_dense_equivalent <= 0:
        raise ZeroDivisionError("no multiply-accumulates recorded")
    return ctr.macs_performed / ctr.macs_dense_equivalent


def dense_times_sparse_t(w_t: np.ndarray, g: SparseGrad, ctr: MacCounter | None = None,
                         layer=None) -> np.ndarray:
    """``w_t @ g`` touching only the stored entries of ``g``."""
    if w_t.shape[1] != g.rows:
        raise ShapeError(f"dense_times_sparse_t: {w_t.shape} x {g.shape}")
    wT = np.ascontiguousarray(w_t.T, dtype=np.float64)
    outT = kernels.spmm_dense_csr(wT, g.row_ptr, g.col_idx, g.data, g.cols)
    if ctr is not None:
        ctr.add(w_t.shape[0] * g.nnz, w_t.shape[0] * g.rows * g.cols, layer)
    return np.ascontiguousarray(outT.T)


def sparse_times_dense_t(g: SparseGrad, a_t: np.ndarray, ctr: MacCounter | None = None,
                         layer=None) -> np.ndarray:
    """``g @ a_t`` touching only the stored entries of ``g``."""
    if g.cols != a_t.shape[0]:
        raise ShapeError(f"sparse_times_dense_t: {g.shape} x {a_t.shape}")
    b = np.ascontiguousarray(a_t, dtype=np.float64)
    out = kernels.spmm_csr_dense(g.row_ptr, g.col_idx, g.data, b, g.rows)
    if ctr is not None:
        ctr.add(a_t.shape[1] * g.nnz, a_t.shape[1] * g.rows * g.cols, layer)
    return out

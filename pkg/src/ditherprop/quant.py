"""Quantizers: non-subtractive dither for preactivation gradients, the
top-k (meProp) baseline, and the symmetric 8-bit forward quantizer."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .sparse import SparseGrad
from .tensor import Rng, std_dev

# per-element cost of std + dither sampling + rounding
NSD_OPS_PER_ELEMENT = 9


@dataclass(frozen=True)
class NsdConfig:
    scale_factor: float = 3.0
    sigma_floor: float = 1e-12

    def __post_init__(self):
        if not self.scale_factor >= 1:
            raise ValueError(f"scale factor must be >= 1, got {self.scale_factor}")


@dataclass(frozen=True)
class QuantStats:
    sparsity: float
    max_abs_level: int
    nonzero_bitwidth: int
    delta: float
    passthrough: bool = False


def bitwidth_of(levels) -> int:
    """Magnitude bits of the largest level plus one sign bit; 0 if all zero."""
    levels = np.asarray(levels)
    if levels.size == 0:
        return 0
    m = int(np.max(np.abs(levels)))
    return 0 if m == 0 else m.bit_length() + 1


def dithered_levels(x, delta, nu):
    """Integer levels of ``delta * floor((x + nu) / delta + 1/2)``."""
    return np.floor((np.asarray(x, dtype=np.float64) + nu) / delta + 0.5)


def nsd_quantize(g: np.ndarray, s: float, rng: Rng,
                 sigma_floor: float = 1e-12) -> tuple[SparseGrad, QuantStats]:
    """Quantize a gradient tensor with step ``s * std(g)`` and uniform dither.

    A fresh dither value is drawn for every element. When the tensor has no
    usable spread (all zero, or std below ``sigma_floor * max|g|``) it is
    passed through unquantized.
    """
    if g.size == 0:
        raise ValueError("nsd_quantize: empty gradient")
    if not s >= 1:
        raise ValueError(f"scale factor must be >= 1, got {s}")
    g = np.ascontiguousarray(g, dtype=np.float64)
    sigma = std_dev(g)
    peak = float(np.max(np.abs(g)))
    if peak == 0.0 or sigma <= sigma_floor * peak:
        sg = SparseGrad.from_values(g)
        return sg, QuantStats(sg.sparsity, 0, 0, 0.0, passthrough=True)

    delta = s * sigma
    nu = rng.uniform(-delta / 2, delta / 2, size=g.shape)
    row_ptr, col_idx, levels = kernels.nsd_levels_csr(g, nu, delta)
    sg = SparseGrad.from_levels(g.shape, row_ptr, col_idx, levels, delta)
    m = int(np.max(np.abs(levels))) if len(levels) else 0
    return sg, QuantStats(sg.sparsity, m, bitwidth_of(levels), delta)


def meprop_topk(g: np.ndarray, k: int) -> SparseGrad:
    """Keep the ``k`` largest-magnitude entries of every column.

    Ties go to the lower row index. Kept values stay at full precision.
    """
    rows = g.shape[0]
    if not 1 <= k <= rows:
        raise ValueError(f"meprop k must be in [1, {rows}], got {k}")
    if k == rows:
        return SparseGrad.from_values(g)
    order = np.argsort(-np.abs(g), axis=0, kind="stable")[:k]
    mask = np.zeros(g.shape, dtype=bool)
    np.put_along_axis(mask, order, True, axis=0)
    return SparseGrad.from_values(np.where(mask, g, 0.0))


def meprop_k_for(rows: int, target_sparsity: float) -> int:
    return int(min(rows, max(1, round((1.0 - target_sparsity) * rows))))


def quantize_8bit(x: np.ndarray) -> np.ndarray:
    """Per-tensor symmetric mid-tread quantization to levels in [-127, 127]."""
    peak = float(np.max(np.abs(x)))
    if peak == 0.0:
        return x
    step = peak / 127.0
    levels = np.clip(np.floor(x / step + 0.5), -127, 127)
    return levels * step

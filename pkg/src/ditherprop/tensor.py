"""Dense matrix helpers and the seedable random source.

Matrices are plain 2-D ``float64`` numpy arrays. The helpers here add the
shape checks the rest of the package relies on; everything else uses numpy
directly.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Raised when operands have incompatible shapes."""


def as_matrix(a) -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise ShapeError(f"expected a non-empty 2-D matrix, got shape {m.shape}")
    return m


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a, b = as_matrix(a), as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} x {b.shape}")
    return a @ b


def transpose(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(as_matrix(a).T)


def hadamard(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a, b = as_matrix(a), as_matrix(b)
    if a.shape != b.shape:
        raise ShapeError(f"hadamard: {a.shape} vs {b.shape}")
    return a * b


def std_dev(a: np.ndarray) -> float:
    """Population standard deviation over every element, zeros included."""
    return float(np.std(a))


class Rng:
    """Counter-based (Philox) generator with keyed substreams.

    ``Rng(seed).substream(i, j)`` gives a stream that depends only on
    ``(seed, i, j)``, so a dither draw for (iteration, node, layer) is
    reproducible regardless of what else was sampled before it.
    """

    def __init__(self, seed: int = 0, key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.key)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def substream(self, *ids: int) -> "Rng":
        return Rng(self.seed, self.key + tuple(ids))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def uniform(self, lo: float, hi: float, size=None):
        """Draws from the open interval (lo, hi)."""
        if not lo < hi:
            raise ValueError(f"uniform: need lo < hi, got ({lo}, {hi})")
        u = self._gen.random(size)
        # random() is [0, 1); zero and round-up to hi must both be excluded
        if np.ndim(u) == 0:
            while u == 0.0:
                u = self._gen.random()
            v = lo + (hi - lo) * u
            return float(min(max(v, np.nextafter(lo, hi)), np.nextafter(hi, lo)))
        zero = u == 0.0
        while zero.any():
            u[zero] = self._gen.random(int(zero.sum()))
            zero = u == 0.0
        v = lo + (hi - lo) * u
        return np.clip(v, np.nextafter(lo, hi), np.nextafter(hi, lo), out=v)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def integers(self, lo, hi=None, size=None):
        return self._gen.integers(lo, hi, size)

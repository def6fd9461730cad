"""Pure-numpy versions of the compiled kernels in ``_ckernels.pyx``."""

import numpy as np


def nsd_levels_csr(g, dither, delta):
    q = np.floor((g + dither) / delta + 0.5)
    rows, cols = np.nonzero(q)
    row_ptr = np.zeros(g.shape[0] + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=g.shape[0]), out=row_ptr[1:])
    return row_ptr, cols.astype(np.int64), q[rows, cols].astype(np.int64)


def _densify(row_ptr, col_idx, data, n_rows, n_cols):
    # scatter then hand the product to BLAS; cheaper in numpy than segment sums
    d = np.zeros((n_rows, n_cols))
    rows = np.repeat(np.arange(n_rows), np.diff(row_ptr))
    d[rows, col_idx] = data
    return d


def spmm_dense_csr(wT, row_ptr, col_idx, data, n_cols):
    g = _densify(row_ptr, col_idx, data, wT.shape[0], n_cols)
    return g.T @ wT


def spmm_csr_dense(row_ptr, col_idx, data, b, n_rows):
    g = _densify(row_ptr, col_idx, data, n_rows, b.shape[0])
    return g @ b

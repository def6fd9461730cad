# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops: NSD quantization straight into CSR, and the two
sparse backward products. Signatures mirror ``_pykernels``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor

cnp.import_array()


def nsd_levels_csr(const double[:, ::1] g, const double[:, ::1] dither, double delta):
    cdef Py_ssize_t k = g.shape[0], n = g.shape[1]
    cdef Py_ssize_t i, j, nnz = 0
    cdef double q
    cdef long long lv
    row_ptr = np.zeros(k + 1, dtype=np.int64)
    col_idx = np.empty(k * n, dtype=np.int64)
    levels = np.empty(k * n, dtype=np.int64)
    cdef long long[::1] rp = row_ptr
    cdef long long[::1] ci = col_idx
    cdef long long[::1] lvv = levels
    for i in range(k):
        for j in range(n):
            q = floor((g[i, j] + dither[i, j]) / delta + 0.5)
            if q != 0.0:
                lv = <long long>q
                ci[nnz] = j
                lvv[nnz] = lv
                nnz += 1
        rp[i + 1] = nnz
    return row_ptr, col_idx[:nnz].copy(), levels[:nnz].copy()


def spmm_dense_csr(const double[:, ::1] wT, const long long[::1] row_ptr,
                   const long long[::1] col_idx, const double[::1] data,
                   Py_ssize_t n_cols):
    """outT[c, :] += v * wT[r, :] for each stored (r, c, v); returns outT."""
    cdef Py_ssize_t k = wT.shape[0], m = wT.shape[1]
    cdef Py_ssize_t r, p, c, t
    cdef double v
    cdef double* orow
    cdef const double* wrow
    outT = np.zeros((n_cols, m), dtype=np.float64)
    cdef double[:, ::1] o = outT
    if m == 0:
        return outT
    for r in range(k):
        wrow = &wT[r, 0]
        for p in range(row_ptr[r], row_ptr[r + 1]):
            orow = &o[col_idx[p], 0]
            v = data[p]
            for t in range(m):
                orow[t] += v * wrow[t]
    return outT


def spmm_csr_dense(const long long[::1] row_ptr, const long long[::1] col_idx,
                   const double[::1] data, const double[:, ::1] b, Py_ssize_t n_rows):
    """out[r, :] += v * b[c, :] for each stored (r, c, v)."""
    cdef Py_ssize_t pcols = b.shape[1]
    cdef Py_ssize_t r, p, c, t
    cdef double v
    cdef double* orow
    cdef const double* brow
    out = np.zeros((n_rows, pcols), dtype=np.float64)
    cdef double[:, ::1] o = out
    if pcols == 0:
        return out
    for r in range(n_rows):
        orow = &o[r, 0]
        for p in range(row_ptr[r], row_ptr[r + 1]):
            brow = &b[col_idx[p], 0]
            v = data[p]
            for t in range(pcols):
                orow[t] += v * brow[t]
    return out

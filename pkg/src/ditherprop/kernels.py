"""Backend selection for the hot loops.

The compiled extension is used when it was built; set
``DITHERPROP_PURE_PYTHON=1`` to force the numpy fallback.
"""

import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if not os.environ.get("DITHERPROP_PURE_PYTHON"):
    try:
        from . import _ckernels as _impl  # noqa: F811

        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels

# above this density the scatter-into-dense + BLAS path wins over the CSR loop
DENSE_CROSSOVER = 0.1

nsd_levels_csr = _impl.nsd_levels_csr


def _dense_enough(data, n_rows, n_cols) -> bool:
    return _impl is _pykernels or len(data) > DENSE_CROSSOVER * n_rows * n_cols


def spmm_dense_csr(wT, row_ptr, col_idx, data, n_cols):
    if _dense_enough(data, wT.shape[0], n_cols):
        return _pykernels.spmm_dense_csr(wT, row_ptr, col_idx, data, n_cols)
    return _impl.spmm_dense_csr(wT, row_ptr, col_idx, data, n_cols)


def spmm_csr_dense(row_ptr, col_idx, data, b, n_rows):
    if _dense_enough(data, n_rows, b.shape[0]):
        return _pykernels.spmm_csr_dense(row_ptr, col_idx, data, b, n_rows)
    return _impl.spmm_csr_dense(row_ptr, col_idx, data, b, n_rows)

"""Numerical oracles for the statistics of dithered quantization.

Nothing here calls the training code; the quantizer is re-evaluated from its
defining formula so these checks stay independent of the path they verify.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .tensor import Rng

_SQRT2 = math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class MomentReport:
    x: float
    delta: float
    mean_error: float
    second_moment: float
    bound: float
    n_samples: int
    standard_error: float
    max_abs_error: float


@dataclass(frozen=True)
class SparsityPrediction:
    s: float
    predicted_p0: float
    empirical_p0: float | None = None


def _nsd(x, delta, nu):
    return delta * np.floor((x + nu) / delta + 0.5)


def estimate_error_moments(x: float, delta: float, n: int, rng: Rng,
                           quantizer: Callable | None = None) -> MomentReport:
    """Monte-Carlo mean and second moment of ``Q(x + nu) - x``."""
    if not delta > 0:
        raise ValueError("delta must be positive")
    if n < 10_000:
        raise ValueError("need at least 1e4 samples")
    q = quantizer or _nsd
    nu = rng.uniform(-delta / 2, delta / 2, size=n)
    err = q(np.full(n, float(x)), delta, nu) - x
    return MomentReport(float(x), float(delta), float(err.mean()), float(np.mean(err ** 2)),
                        delta ** 2 / 4, n, float(err.std() / math.sqrt(n)),
                        float(np.max(np.abs(err))))


def error_covariance(x1: float, x2: float, delta: float, n: int, rng: Rng,
                     quantizer: Callable | None = None) -> tuple[float, float]:
    """Sample covariance of errors at two inputs with independent dither, and its SE."""
    q = quantizer or _nsd
    nu = rng.uniform(-delta / 2, delta / 2, size=(2, n))
    e1 = q(np.full(n, float(x1)), delta, nu[0]) - x1
    e2 = q(np.full(n, float(x2)), delta, nu[1]) - x2
    prod = (e1 - e1.mean()) * (e2 - e2.mean())
    return float(prod.mean()), float(prod.std() / math.sqrt(n))


# --- quadrature ---------------------------------------------------------------

def adaptive_simpson(f: Callable[[float], float], a: float, b: float, tol: float = 1e-10,
                     max_depth: int = 50) -> float:
    def simpson(fa, fm, fb, a, b):
        return (b - a) / 6.0 * (fa + 4.0 * fm + fb)

    def rec(a, b, fa, fm, fb, whole, tol, depth):
        m = 0.5 * (a + b)
        lm, rm = 0.5 * (a + m), 0.5 * (m + b)
        flm, frm = f(lm), f(rm)
        left = simpson(fa, flm, fm, a, m)
        right = simpson(fm, frm, fb, m, b)
        if depth <= 0 or abs(left + right - whole) <= 15.0 * tol:
            return left + right + (left + right - whole) / 15.0
        return (rec(a, m, fa, flm, fm, left, tol / 2, depth - 1)
                + rec(m, b, fm, frm, fb, right, tol / 2, depth - 1))

    fa, fb, fm = f(a), f(b), f(0.5 * (a + b))
    return rec(a, b, fa, fm, fb, simpson(fa, fm, fb, a, b), tol, max_depth)


def _phi(u: float) -> float:
    return 0.5 * (1.0 + math.erf(u / _SQRT2))


def gaussian_uniform_pdf(t: float, sigma: float, delta: float) -> float:
    """Density of x + nu with x ~ N(0, sigma^2) and nu ~ U(-delta/2, delta/2)."""
    return (_phi((t + delta / 2) / sigma) - _phi((t - delta / 2) / sigma)) / delta


def laplace_uniform_pdf(t: float, b: float, delta: float) -> float:
    """Density of x + nu with x ~ Laplace(0, b) and nu ~ U(-delta/2, delta/2)."""
    def cdf(u):
        return 0.5 * math.exp(u / b) if u < 0 else 1.0 - 0.5 * math.exp(-u / b)
    return (cdf(t + delta / 2) - cdf(t - delta / 2)) / delta


def predict_sparsity(pdf: str, s: float, scale: float = 1.0, tol: float = 1e-8) -> float:
    """P(quantized value == 0) for step ``s * std(x)``.

    ``pdf`` is ``"gaussian"`` (``scale`` = sigma) or ``"laplace"`` (``scale`` = b,
    std = b*sqrt(2)). The zero bucket [-delta/2, delta/2] is integrated in two
    halves so the kinks at the bucket edges and at 0 are interval endpoints.
    """
    if not s > 0:
        raise ValueError("s must be positive")
    if pdf == "gaussian":
        delta = s * scale
        f = lambda t: gaussian_uniform_pdf(t, scale, delta)  # noqa: E731
    elif pdf == "laplace":
        delta = s * scale * _SQRT2
        f = lambda t: laplace_uniform_pdf(t, scale, delta)  # noqa: E731
    else:
        raise ValueError(f"unknown pdf {pdf!r}")
    half = delta / 2
    p = adaptive_simpson(f, -half, 0.0, tol / 4) + adaptive_simpson(f, 0.0, half, tol / 4)
    return min(max(p, 0.0), 1.0)


def gaussian_p0_closed_form(s: float) -> float:
    """2 Phi(s) - 1 + (2/s)(phi(s) - phi(0)), from integrating the Phi antiderivative."""
    pdf_s = _INV_SQRT2PI * math.exp(-0.5 * s * s)
    return 2.0 * _phi(s) - 1.0 + 2.0 / s * (pdf_s - _INV_SQRT2PI)


def laplace_p0_closed_form(s: float) -> float:
    """1 - (b/delta)(1 - exp(-delta/b)) with delta = s*sqrt(2)*b."""
    r = s * _SQRT2
    return 1.0 - (1.0 - math.exp(-r)) / r


# --- fitting ------------------------------------------------------------------

@dataclass(frozen=True)
class LaplaceFit:
    b: float
    degenerate: bool = False


def fit_laplace(samples) -> LaplaceFit:
    """Zero-location maximum-likelihood Laplace scale, b = mean |x|."""
    x = np.asarray(samples, dtype=np.float64).ravel()
    if x.size < 100:
        raise ValueError("need at least 100 samples")
    b = float(np.mean(np.abs(x)))
    return LaplaceFit(b, degenerate=b == 0.0)


def predict_layer_sparsity(grad, s: float) -> float:
    """Predicted NSD sparsity of a recorded preactivation gradient.

    Exact zeros (inactive ReLUs) always quantize to zero; the remaining
    entries are modelled as zero-centred Laplace. The step uses the std of
    the whole tensor, as the quantizer does.
    """
    g = np.asarray(grad, dtype=np.float64).ravel()
    nz = g[g != 0]
    if nz.size < 100:
        return 1.0
    zero_frac = 1.0 - nz.size / g.size
    b = fit_laplace(nz).b
    delta = s * float(np.std(g))
    f = lambda t: laplace_uniform_pdf(t, b, delta)  # noqa: E731
    p_nz = adaptive_simpson(f, -delta / 2, 0.0, 1e-9) + adaptive_simpson(f, 0.0, delta / 2, 1e-9)
    return zero_frac + (1.0 - zero_frac) * p_nz


def variance_slope(n_values, variances) -> float:
    """Least-squares slope of log(variance) against log(N)."""
    n = np.asarray(n_values, dtype=np.float64)
    v = np.asarray(variances, dtype=np.float64)
    if len(np.unique(n)) < 3:
        raise ValueError("need at least three distinct N values")
    if np.any(v <= 0) or np.any(n <= 0):
        raise ValueError("variances and N must be positive")
    slope, _ = np.polyfit(np.log(n), np.log(v), 1)
    return float(slope)

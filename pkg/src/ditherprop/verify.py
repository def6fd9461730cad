"""The statistical self-check run by ``ditherprop verify``."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import theory
from .data import synthetic_gaussian_task
from .distributed import noise_variance
from .model import BackpropMode, mlp, softmax_xent
from .quant import nsd_quantize
from .tensor import Rng

DELTAS = (0.5, 1.0, 2.0)
X_OVER_DELTA = (0.0, 0.25, -0.25, 0.5, -0.5, 0.73, -0.73, 3.0, -3.0)
S_GRID = (1, 2, 3, 4, 6, 8)


@dataclass
class CheckResult:
    name: str
    measured: float
    bound: str
    passed: bool

    def line(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        return f"{flag}  {self.name:<44} measured={self.measured:<12.6g} bound: {self.bound}"


def moment_checks(n: int = 1_000_000, seed: int = 1,
                  quantizer: Callable | None = None) -> list[CheckResult]:
    out = []
    root = Rng(seed, (0x0E,))
    for i, delta in enumerate(DELTAS):
        for j, r in enumerate(X_OVER_DELTA):
            x = r * delta
            rep = theory.estimate_error_moments(x, delta, n, root.substream(i, j), quantizer)
            tag = f"x={r:+g}D D={delta:g}"
            z = abs(rep.mean_error) / rep.standard_error if rep.standard_error > 0 else (
                0.0 if rep.mean_error == 0 else math.inf)
            out.append(CheckResult(f"mean error {tag}", z, "|mean|/SE <= 5", z <= 5.0))
            out.append(CheckResult(f"E[e^2] {tag}", rep.second_moment / rep.bound,
                                   "E[e^2]/(D^2/4) <= 1.01", rep.second_moment <= rep.bound * 1.01))
            out.append(CheckResult(f"|e| <= D {tag}", rep.max_abs_error / delta, "max|e|/D <= 1",
                                   rep.max_abs_error <= delta))
    return out


def _empirical_sparsity(s: float, n: int, rng: Rng, quantizer: Callable | None) -> float:
    g = rng.normal(0.0, 1.0, size=(1000, n // 1000))
    if quantizer is None:
        return nsd_quantize(g, s, rng.substream(1))[1].sparsity
    delta = s * float(np.std(g))
    nu = rng.substream(1).uniform(-delta / 2, delta / 2, size=g.shape)
    return float(np.mean(quantizer(g, delta, nu) == 0))


def sparsity_checks(n: int = 1_000_000, seed: int = 2,
                    quantizer: Callable | None = None) -> list[CheckResult]:
    out = []
    root = Rng(seed, (0x5A,))
    emp = []
    for s in S_GRID:
        pred = theory.predict_sparsity("gaussian", s)
        e = _empirical_sparsity(s, n, root.substream(s), quantizer)
        emp.append(e)
        out.append(CheckResult(f"sparsity vs quadrature s={s}", abs(e - pred),
                               "|emp - pred| <= 0.005", abs(e - pred) <= 0.005))
    inc = bool(np.all(np.diff(emp) > 0))
    out.append(CheckResult("empirical sparsity increasing in s", float(np.min(np.diff(emp))),
                           "min step > 0", inc))
    grid = np.linspace(0.5, 10, 40)
    pred = [theory.predict_sparsity("gaussian", s) for s in grid]
    out.append(CheckResult("predicted sparsity increasing on [0.5, 10]",
                           float(np.min(np.diff(pred))), "min step > 0",
                           bool(np.all(np.diff(pred) > 0))))
    worst = max(abs(theory.predict_sparsity("gaussian", s) - theory.gaussian_p0_closed_form(s))
                for s in S_GRID)
    out.append(CheckResult("quadrature vs closed form (gaussian)", worst, "<= 1e-8", worst <= 1e-8))
    worst = max(abs(theory.predict_sparsity("laplace", s, 1.7) - theory.laplace_p0_closed_form(s))
                for s in S_GRID)
    out.append(CheckResult("quadrature vs closed form (laplace)", worst, "<= 1e-8", worst <= 1e-8))
    return out


def decorrelation_checks(n: int = 1_000_000, seed: int = 3,
                         quantizer: Callable | None = None) -> list[CheckResult]:
    out = []
    root = Rng(seed, (0xC0,))
    for i, (x1, x2) in enumerate(((0.3, 0.3), (0.3, -0.61), (0.5, 1.2))):
        cov, se = theory.error_covariance(x1, x2, 1.0, n, root.substream(i), quantizer)
        z = abs(cov) / se if se > 0 else (0.0 if cov == 0 else math.inf)
        out.append(CheckResult(f"error covariance x=({x1:g},{x2:g})", z, "|cov|/SE <= 5", z <= 5.0))
    return out


def laplace_checks(seed: int = 4) -> list[CheckResult]:
    rng = Rng(seed, (0x1A,)).generator
    b_hat = theory.fit_laplace(rng.laplace(0.0, 2.0, 100_000)).b
    return [CheckResult("laplace fit b=2", abs(b_hat - 2.0) / 2.0, "rel err <= 0.02",
                        abs(b_hat - 2.0) <= 0.04)]


def unbiased_fraction(net, x, y, s: float, reps: int, seed: int) -> float:
    """Fraction of weight/bias gradient entries whose dithered mean over
    ``reps`` seeds lies within 5 standard errors of the exact gradient."""
    _, dlog = softmax_xent(net.forward(x), y)
    net.backward(dlog)
    exact = np.concatenate([g.ravel() for g in net.gradients()])

    mode = BackpropMode("dithered", s=s)
    root = Rng(seed, (0xD1,))
    mean = np.zeros_like(exact)
    m2 = np.zeros_like(exact)
    net.forward(x, mode)
    for r in range(reps):
        net.backward(dlog, mode, root.substream(r))
        g = np.concatenate([g.ravel() for g in net.gradients()])
        d = g - mean
        mean += d / (r + 1)
        m2 += d * (g - mean)
    se = np.sqrt(m2 / (reps - 1) / reps)
    ok = np.where(se > 0, np.abs(mean - exact) <= 5 * se, np.abs(mean - exact) <= 1e-12)
    return float(ok.mean())


def gradient_checks(seed: int = 5, reps: int = 2000) -> list[CheckResult]:
    """Unbiased weight gradients and the 1/N variance law on a small network."""
    ds = synthetic_gaussian_task(64, 20, 4, seed=seed)
    net = mlp([20, 24, 16, 4], seed)
    frac = unbiased_fraction(net, ds.images[:32], ds.labels[:32], 2.0, reps, seed)
    out = [CheckResult("weight gradient unbiased (5 SE)", frac, "fraction >= 0.999", frac >= 0.999)]
    mode = BackpropMode("dithered", s=2.0)

    ns = (1, 2, 4, 8, 16)
    variances = [noise_variance(net, ds.images[:16], ds.labels[:16], mode, n, 200, seed) for n in ns]
    slope = theory.variance_slope(ns, variances)
    out.append(CheckResult("averaged-gradient variance slope vs N", slope, "in [-1.15, -0.85]",
                           -1.15 <= slope <= -0.85))
    return out


def run_checks(quantizer: Callable | None = None, n: int = 1_000_000,
               include_network: bool = True) -> list[CheckResult]:
    """All checks. ``quantizer(x, delta, nu) -> reconstruction`` replaces NSD
    in the scalar checks, which is how a faulty quantizer is caught."""
    results = moment_checks(n, quantizer=quantizer)
    results += sparsity_checks(n, quantizer=quantizer)
    results += decorrelation_checks(n, quantizer=quantizer)
    results += laplace_checks()
    if include_network:
        results += gradient_checks()
    return results


def main(print_fn=print) -> int:
    t0 = time.time()
    results = run_checks()
    for r in results:
        print_fn(r.line())
    failed = [r for r in results if not r.passed]
    print_fn(f"{len(results) - len(failed)}/{len(results)} checks passed in {time.time() - t0:.1f}s")
    return 1 if failed else 0

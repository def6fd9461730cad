"""Compare the compiled kernels with the numpy fallback and the dispatcher.

    python benchmarks/bench_kernels.py [--repeat 5]

Shapes follow the MNIST MLP: a (500, 128) preactivation gradient multiplied
against (784, 128) activations and a (500, 784) weight matrix. The
"dispatch" column is what training uses: the compiled CSR loop below the
density crossover, scatter plus BLAS above it.
"""

import argparse
import timeit

import numpy as np

from ditherprop import _pykernels, kernels

try:
    from ditherprop import _ckernels
except ImportError:
    _ckernels = None


def make_case(units, batch, fan_in, s, seed=0):
    rng = np.random.default_rng(seed)
    g = rng.laplace(0.0, 1.0, size=(units, batch))
    delta = s * g.std()
    nu = rng.uniform(-delta / 2, delta / 2, size=g.shape)
    a_t = rng.normal(size=(batch, fan_in))
    w = rng.normal(size=(units, fan_in))
    return g, nu, delta, a_t, w


def bench(mod, case, repeat):
    g, nu, delta, a_t, w = case
    rp, ci, lv = mod.nsd_levels_csr(g, nu, delta)
    data = lv * delta
    jobs = {
        "nsd_levels_csr": lambda: mod.nsd_levels_csr(g, nu, delta),
        "spmm_csr_dense (grad W)": lambda: mod.spmm_csr_dense(rp, ci, data, a_t, g.shape[0]),
        "spmm_dense_csr (grad a)": lambda: mod.spmm_dense_csr(w, rp, ci, data, g.shape[1]),
    }
    return {name: min(timeit.repeat(fn, number=10, repeat=repeat)) / 10 for name, fn in jobs.items()}


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--s", type=float, nargs="+", default=[1.0, 3.0, 8.0, 32.0])
    args = p.parse_args(argv)

    g, _, _, a_t, w = make_case(500, 128, 784, 1.0)
    dense_w = min(timeit.repeat(lambda: g @ a_t, number=10, repeat=args.repeat)) / 10
    print(f"backend {kernels.BACKEND}, crossover density {kernels.DENSE_CROSSOVER}")
    print(f"dense BLAS reference  g @ a_t: {dense_w * 1e3:8.3f} ms")
    for s in args.s:
        case = make_case(500, 128, 784, s)
        nnz = len(_pykernels.nsd_levels_csr(*case[:3])[2])
        print(f"\ns = {s:g}  density = {nnz / case[0].size:.4f}")
        py = bench(_pykernels, case, args.repeat)
        cy = bench(_ckernels, case, args.repeat) if _ckernels else None
        dp = bench(kernels, case, args.repeat)
        for name, t in py.items():
            line = f"  {name:<24} python {t * 1e3:8.3f} ms"
            if cy:
                line += f"   cython {cy[name] * 1e3:8.3f} ms ({t / cy[name]:5.2f}x)"
            line += f"   dispatch {dp[name] * 1e3:8.3f} ms ({t / dp[name]:5.2f}x)"
            print(line)
    if _ckernels is None:
        print("\ncompiled extension not built; only the fallback was timed")


if __name__ == "__main__":
    main()

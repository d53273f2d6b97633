"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_core.py [--repeat 20]

Prints one line per (kernel, N, d) with both timings and the speedup, and
checks the two backends agree before timing.
"""

import argparse
import timeit

import numpy as np

from svn_ensembles import _pure

try:
    from svn_ensembles import _core
except ImportError:  # extension not built
    _core = None

SHAPES = [(5, 41), (5, 81), (10, 200), (20, 500)]


def cases(n, d, rng):
    phi = rng.standard_normal((n, d))
    a = rng.standard_normal((d, d))
    mphi = phi @ (a @ a.T / d + np.eye(d))
    kvals, kgrads = _pure.kernel_state(phi, mphi, 1.0 / (2 * d))
    grads = rng.standard_normal((n, d))
    alpha = rng.standard_normal((n, d))
    hess = np.ascontiguousarray(np.stack([a @ a.T for _ in range(n)]))
    diag = rng.random((n, d))
    return {
        "kernel_state": (phi, np.ascontiguousarray(mphi), 1.0 / (2 * d)),
        "svgd_direction": (kvals, kgrads, grads),
        "repulsion_matvec": (kgrads, alpha),
        "svn_matvec_dense": (kvals, kgrads, hess, alpha),
        "svn_matvec_diag": (kvals, kgrads, diag, alpha),
    }


def _close(a, b):
    if isinstance(a, tuple):
        return all(_close(x, y) for x, y in zip(a, b))
    return np.allclose(np.asarray(a), np.asarray(b), rtol=1e-10, atol=1e-12)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    p.add_argument("--repeat", type=int, default=20)
    args = p.parse_args(argv)
    if _core is None:
        print("compiled extension not built; only the fallback is available")
        return 1
    rng = np.random.default_rng(0)
    print(f"{'kernel':<18}{'N':>4}{'d':>6}{'pure ms':>11}{'cython ms':>11}{'speedup':>9}")
    for n, d in SHAPES:
        for name, fargs in cases(n, d, rng).items():
            fp, fc = getattr(_pure, name), getattr(_core, name)
            if not _close(fp(*fargs), fc(*fargs)):
                raise SystemExit(f"backends disagree on {name} N={n} d={d}")
            tp = min(timeit.repeat(lambda: fp(*fargs), number=1, repeat=args.repeat)) * 1e3
            tc = min(timeit.repeat(lambda: fc(*fargs), number=1, repeat=args.repeat)) * 1e3
            print(f"{name:<18}{n:>4}{d:>6}{tp:>11.3f}{tc:>11.3f}{tp / tc:>9.1f}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())

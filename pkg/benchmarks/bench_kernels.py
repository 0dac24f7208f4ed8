"""Time the compiled kernels against the pure-Python fallback.

    python benchmarks/bench_kernels.py [--repeat 5]
"""

import argparse
import timeit

import numpy as np

from latent_intervals import kernels
from latent_intervals.synth_gen import Generator


def cases(rng):
    g = Generator()
    v = g.factors(rng.standard_normal((256, g.dim)))
    target = g.render(rng.standard_normal((256, g.dim)))[..., 0]
    n, d = 5000, 8
    f = rng.standard_normal((n, d))
    lo = f - np.abs(rng.standard_normal((n, d)))
    hi = f + np.abs(rng.standard_normal((n, d)))
    zz = f + rng.standard_normal((n, d))
    mask = np.ones(d, dtype=bool)
    grid = np.linspace(0.0, 10.0, 1000)
    return {
        "render (256 x 32x32)": lambda: kernels.render(v, 32, 32),
        "render_vjp (256)": lambda: kernels.render_vjp(v, target),
        "coverage_counts (5000 x 8 x 1000)": lambda: kernels.coverage_counts(f, lo, hi, zz, mask, grid),
        "hb_ucb (n = 40000)": lambda: kernels.hb_ucb(0.08, 40000, 0.1, 1e-9),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    backends = [b for b in ("python", "compiled") if b in kernels.BACKENDS]
    results = {}
    for name in backends:
        kernels.set_backend(name)
        for label, fn in cases(np.random.default_rng(0)).items():
            fn()
            results[label, name] = min(timeit.repeat(fn, number=1, repeat=args.repeat))
    print(f"{'kernel':36s}" + "".join(f"{b:>12s}" for b in backends) + "     speedup")
    for label in cases(np.random.default_rng(0)):
        row = [results[label, b] for b in backends]
        speed = f"{row[0] / row[1]:10.1f}x" if len(row) == 2 else ""
        print(f"{label:36s}" + "".join(f"{t * 1e3:10.2f}ms" for t in row) + speed)


if __name__ == "__main__":
    main()

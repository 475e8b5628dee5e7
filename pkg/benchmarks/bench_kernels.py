"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import sys
import timeit

import numpy as np

from tabperceiver import kernels


def cases(rng):
    boundaries = np.quantile(rng.normal(size=5000), np.linspace(0, 1, 151))
    x = rng.normal(size=20_000)
    scores = rng.normal(size=5000)
    labels = (rng.random(5000) < 0.4).astype(np.int64)
    pos, neg = np.sort(scores[labels == 1]), np.sort(scores[labels == 0])
    pos_idx = rng.integers(0, pos.size, size=(200, pos.size))
    neg_idx = rng.integers(0, neg.size, size=(200, neg.size))
    src = rng.normal(size=(50_000, 32))
    idx = rng.integers(0, 1000, size=50_000)
    return {
        "ple_encode_batch 20k x 150 bins": lambda k: k.ple_encode_batch(x, boundaries),
        "auc_mann_whitney n=5000": lambda k: k.auc_mann_whitney(scores, labels),
        "bootstrap_aucs 200 resamples": lambda k: k.bootstrap_aucs(pos, neg, pos_idx, neg_idx),
        "scatter_add_rows 50k x 32": lambda k: k.scatter_add_rows(np.zeros((1000, 32)), idx, src),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if kernels.compiled_backend is None:
        print("compiled extension not built; nothing to compare", file=sys.stderr)
        return 1
    rng = np.random.default_rng(0)
    print(f"{'kernel':34s} {'python (ms)':>12s} {'compiled (ms)':>14s} {'speedup':>8s}")
    for name, fn in cases(rng).items():
        t = {}
        for label, backend in (("py", kernels.python_backend), ("c", kernels.compiled_backend)):
            fn(backend)  # warm up
            t[label] = min(timeit.repeat(lambda: fn(backend), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:34s} {t['py']:12.2f} {t['c']:14.2f} {t['py'] / t['c']:7.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 20]

The first numba call (compilation) is excluded; results are checked for equality
before timing so a fast-but-wrong kernel cannot win.
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from haludetect import _kernels as K


def cases(rng: np.random.Generator):
    m = rng.normal(size=(20_000, 128))
    m /= np.linalg.norm(m, axis=1, keepdims=True)
    q = m[7].copy()
    ords = rng.integers(0, 50, size=len(m)).astype(np.int64)
    yield "top_k_similar (20k x 128, k=5)", K.top_k_similar_numpy, K.top_k_similar_numba, (m, q, ords, 5)

    s = np.sort(rng.random(5_000))
    qs = rng.random(190)
    yield "linear_quantiles (5k samples, 190 qs)", K.linear_quantiles_numpy, K.linear_quantiles_numba, (s, qs)

    n = 2_000
    starts = np.arange(n + 1, dtype=np.int64)
    args = (rng.integers(0, 3, n), rng.random(n), rng.integers(0, 3, n), rng.random(n),
            starts, rng.integers(0, 2, n), False, rng.random(190), rng.random(190))
    yield "grid_counts (2k samples, 190 cells)", K.grid_counts_numpy, K.grid_counts_numba, args


def same(a, b) -> bool:
    if isinstance(a, tuple):
        return all(np.allclose(x, y) for x, y in zip(a, b))
    return np.allclose(a, b)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    if not K.HAVE_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")
    print(f"{'kernel':40s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for name, np_fn, nb_fn, call_args in cases(np.random.default_rng(args.seed)):
        if not same(np_fn(*call_args), nb_fn(*call_args)):  # also warms up the JIT
            raise SystemExit(f"{name}: numba and numpy disagree")
        t_np = min(timeit.repeat(lambda: np_fn(*call_args), number=1, repeat=args.repeat)) * 1e3
        t_nb = min(timeit.repeat(lambda: nb_fn(*call_args), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:40s} {t_np:10.3f} {t_nb:10.3f} {t_np / t_nb:7.1f}x")


if __name__ == "__main__":
    main()

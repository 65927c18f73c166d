"""Numeric inner loops: similarity top-k, interpolated quantiles, calibration grid.

Each kernel exists twice: a numba ``@njit`` version and a pure-numpy version with
the same contract.  The numba path is used when numba imports cleanly and
``HALUDETECT_DISABLE_NUMBA`` is not set to a truthy value; both are always
importable by name (``*_numpy`` / ``*_numba``) so tests and the benchmark can
compare them directly.

Label codes used by the grid kernel are severities, so a group verdict is just a
max over its members: 0 = CORRECT, 1 = INCONCLUSIVE, 2 = INCORRECT.
"""

from __future__ import annotations

import os

import numpy as np

DISABLE_ENV = "HALUDETECT_DISABLE_NUMBA"

SEV_CORRECT = 0
SEV_INCONCLUSIVE = 1
SEV_INCORRECT = 2

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False


def numba_requested() -> bool:
    return os.environ.get(DISABLE_ENV, "").strip().lower() not in {"1", "true", "yes", "on"}


USE_NUMBA = HAVE_NUMBA and numba_requested()


# ---------------------------------------------------------------------------
# similarity + top-k
# ---------------------------------------------------------------------------


def top_k_similar_numpy(matrix, query, ordinals, k):
    """Row dot products against ``query``; best ``k`` rows by (-score, ordinal, row)."""
    scores = (matrix * query).sum(axis=1)
    rows = np.arange(matrix.shape[0])
    order = np.lexsort((rows, ordinals, -scores))[:k]
    return order.astype(np.int64), scores[order]


def _top_k_similar_py(matrix, query, ordinals, k):
    n, dim = matrix.shape
    scores = np.empty(n, dtype=np.float64)
    for i in range(n):
        acc = 0.0
        for j in range(dim):
            acc += matrix[i, j] * query[j]
        scores[i] = acc
    k = min(k, n)
    taken = np.zeros(n, dtype=np.bool_)
    out = np.empty(k, dtype=np.int64)
    out_scores = np.empty(k, dtype=np.float64)
    for slot in range(k):
        best = -1
        for i in range(n):
            if taken[i]:
                continue
            if best < 0:
                best = i
                continue
            if scores[i] > scores[best] or (
                scores[i] == scores[best] and ordinals[i] < ordinals[best]
            ):
                best = i
        taken[best] = True
        out[slot] = best
        out_scores[slot] = scores[best]
    return out, out_scores


# ---------------------------------------------------------------------------
# linear-interpolation quantile over pre-sorted samples
# ---------------------------------------------------------------------------


def linear_quantiles_numpy(sorted_values, qs):
    n = sorted_values.shape[0]
    h = qs * (n - 1)
    lo = np.floor(h).astype(np.int64)
    lo = np.minimum(lo, n - 1)
    hi = np.minimum(lo + 1, n - 1)
    frac = h - lo
    a = sorted_values[lo]
    b = sorted_values[hi]
    return np.minimum(a + frac * (b - a), b)


def _linear_quantiles_py(sorted_values, qs):
    n = sorted_values.shape[0]
    out = np.empty(qs.shape[0], dtype=np.float64)
    for i in range(qs.shape[0]):
        h = qs[i] * (n - 1)
        lo = int(np.floor(h))
        if lo > n - 1:
            lo = n - 1
        hi = lo + 1 if lo + 1 < n else n - 1
        frac = h - lo
        a = sorted_values[lo]
        b = sorted_values[hi]
        v = a + frac * (b - a)
        out[i] = v if v < b else b
    return out


# ---------------------------------------------------------------------------
# calibration grid: per-cell counts of correctly classified groups
# ---------------------------------------------------------------------------


def grid_counts_numpy(base_sev, base_conf, supp_sev, supp_conf, group_start, group_gold,
                      coerce_inconclusive, delta1s, delta2s):
    """Return (tp, tn) per grid cell.

    Samples must be ordered so each group occupies ``group_start[g]:group_start[g+1]``.
    ``group_gold`` is 1 for hallucinated groups, 0 for faithful ones.
    """
    switch = (base_sev[None, :] == SEV_INCONCLUSIVE) | (
        (base_conf[None, :] < delta1s[:, None]) & (supp_conf[None, :] > delta2s[:, None])
    )
    chosen = np.where(switch, supp_sev[None, :], base_sev[None, :])
    if coerce_inconclusive:
        chosen = np.where(chosen == SEV_INCONCLUSIVE, SEV_INCORRECT, chosen)
    verdict = np.maximum.reduceat(chosen, group_start[:-1], axis=1)
    tp = ((verdict == SEV_INCORRECT) & (group_gold[None, :] == 1)).sum(axis=1)
    tn = ((verdict == SEV_CORRECT) & (group_gold[None, :] == 0)).sum(axis=1)
    return tp.astype(np.int64), tn.astype(np.int64)


def _grid_counts_py(base_sev, base_conf, supp_sev, supp_conf, group_start, group_gold,
                    coerce_inconclusive, delta1s, delta2s):
    n_cells = delta1s.shape[0]
    n_groups = group_gold.shape[0]
    tp = np.zeros(n_cells, dtype=np.int64)
    tn = np.zeros(n_cells, dtype=np.int64)
    for c in range(n_cells):
        d1 = delta1s[c]
        d2 = delta2s[c]
        for g in range(n_groups):
            worst = SEV_CORRECT
            for i in range(group_start[g], group_start[g + 1]):
                if base_sev[i] == SEV_INCONCLUSIVE or (base_conf[i] < d1 and supp_conf[i] > d2):
                    s = supp_sev[i]
                else:
                    s = base_sev[i]
                if coerce_inconclusive and s == SEV_INCONCLUSIVE:
                    s = SEV_INCORRECT
                if s > worst:
                    worst = s
            if group_gold[g] == 1 and worst == SEV_INCORRECT:
                tp[c] += 1
            elif group_gold[g] == 0 and worst == SEV_CORRECT:
                tn[c] += 1
    return tp, tn


if HAVE_NUMBA:
    _jit = numba.njit(cache=True, nogil=True)
    top_k_similar_numba = _jit(_top_k_similar_py)
    linear_quantiles_numba = _jit(_linear_quantiles_py)
    grid_counts_numba = _jit(_grid_counts_py)
else:  # pragma: no cover
    top_k_similar_numba = None
    linear_quantiles_numba = None
    grid_counts_numba = None


def _pick(numpy_fn, numba_fn):
    return numba_fn if USE_NUMBA else numpy_fn


def top_k_similar(matrix: np.ndarray, query: np.ndarray, ordinals: np.ndarray, k: int):
    fn = _pick(top_k_similar_numpy, top_k_similar_numba)
    return fn(
        np.ascontiguousarray(matrix, dtype=np.float64),
        np.ascontiguousarray(query, dtype=np.float64),
        np.ascontiguousarray(ordinals, dtype=np.int64),
        int(k),
    )


def linear_quantiles(sorted_values: np.ndarray, qs: np.ndarray) -> np.ndarray:
    fn = _pick(linear_quantiles_numpy, linear_quantiles_numba)
    return fn(
        np.ascontiguousarray(sorted_values, dtype=np.float64),
        np.ascontiguousarray(qs, dtype=np.float64),
    )


def grid_counts(base_sev, base_conf, supp_sev, supp_conf, group_start, group_gold,
                coerce_inconclusive, delta1s, delta2s):
    fn = _pick(grid_counts_numpy, grid_counts_numba)
    return fn(
        np.ascontiguousarray(base_sev, dtype=np.int64),
        np.ascontiguousarray(base_conf, dtype=np.float64),
        np.ascontiguousarray(supp_sev, dtype=np.int64),
        np.ascontiguousarray(supp_conf, dtype=np.float64),
        np.ascontiguousarray(group_start, dtype=np.int64),
        np.ascontiguousarray(group_gold, dtype=np.int64),
        bool(coerce_inconclusive),
        np.ascontiguousarray(delta1s, dtype=np.float64),
        np.ascontiguousarray(delta2s, dtype=np.float64),
    )

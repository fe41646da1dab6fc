"""Hot numeric kernels: numba-jitted with pure-numpy fallbacks.

The numba path is the default when numba imports. Set the environment
variable ``FAIRCLUST_DISABLE_NUMBA=1`` to force the numpy fallbacks; the
flag is read at call time so tests can flip it without reimporting.

Both paths are importable directly (``_top_n_numpy`` vs ``_top_n_numba``)
so equivalence can be asserted element for element.
"""
from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        # transparent decorator so the jitted names still exist
        if args and callable(args[0]):
            return args[0]

        def wrap(func):
            return func

        return wrap


def numba_enabled() -> bool:
    """True when the jitted kernels are active for dispatch."""
    flag = os.environ.get("FAIRCLUST_DISABLE_NUMBA", "").strip().lower()
    return HAS_NUMBA and flag not in ("1", "true", "yes")


# ---------------------------------------------------------------------------
# top-n selection (descending similarity, ascending index on ties)
# ---------------------------------------------------------------------------


def _top_n_numpy(sims: np.ndarray, exclude: np.ndarray, keep: int):
    """Rows of ``sims`` reduced to their ``keep`` largest entries.

    Stable argsort of the negated row gives descending similarity with
    ascending original index on exact ties; the excluded column (the query
    itself) is dropped before truncation.
    """
    order = np.argsort(-sims, axis=1, kind="stable")
    rows = sims.shape[0]
    idx = np.empty((rows, keep), dtype=np.int64)
    val = np.empty((rows, keep), dtype=np.float64)
    for r in range(rows):
        row = order[r]
        row = row[row != exclude[r]]
        take = row[:keep]
        idx[r] = take
        val[r] = sims[r, take]
    return idx, val


@njit
def _top_n_numba(sims, exclude, keep):  # pragma: no cover - jitted
    rows, cols = sims.shape
    idx = np.empty((rows, keep), dtype=np.int64)
    val = np.empty((rows, keep), dtype=np.float64)
    for r in range(rows):
        count = 0
        for j in range(cols):
            if j == exclude[r]:
                continue
            s = sims[r, j]
            if count < keep:
                p = count
                # strict comparison keeps earlier (smaller) indices ahead on ties
                while p > 0 and val[r, p - 1] < s:
                    val[r, p] = val[r, p - 1]
                    idx[r, p] = idx[r, p - 1]
                    p -= 1
                val[r, p] = s
                idx[r, p] = j
                count += 1
            elif s > val[r, keep - 1]:
                p = keep - 1
                while p > 0 and val[r, p - 1] < s:
                    val[r, p] = val[r, p - 1]
                    idx[r, p] = idx[r, p - 1]
                    p -= 1
                val[r, p] = s
                idx[r, p] = j
    return idx, val


def top_n_desc(sims: np.ndarray, exclude: np.ndarray, keep: int):
    """Top ``keep`` column indices and values per row, self column excluded.

    Ordering is descending by value with ascending column index on exact
    ties, identical across both backends.
    """
    sims = np.ascontiguousarray(sims, dtype=np.float64)
    exclude = np.ascontiguousarray(exclude, dtype=np.int64)
    if keep == 0:
        rows = sims.shape[0]
        return (np.empty((rows, 0), dtype=np.int64),
                np.empty((rows, 0), dtype=np.float64))
    if keep > sims.shape[1] - 1:
        raise ValueError(
            f"keep={keep} exceeds available columns ({sims.shape[1]} minus self)")
    if numba_enabled():
        return _top_n_numba(sims, exclude, keep)
    return _top_n_numpy(sims, exclude, keep)


# ---------------------------------------------------------------------------
# connected components over an undirected edge list
# ---------------------------------------------------------------------------


def _components_numpy(src: np.ndarray, dst: np.ndarray, count: int):
    """Union-find with path halving; root of a component is its smallest
    member, labels are assigned in order of first appearance."""
    parent = np.arange(count, dtype=np.int64)

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for a, b in zip(src, dst):
        ra, rb = find(a), find(b)
        if ra == rb:
            continue
        if ra < rb:
            parent[rb] = ra
        else:
            parent[ra] = rb
    labels = np.full(count, -1, dtype=np.int64)
    next_label = 0
    for i in range(count):
        r = find(i)
        if labels[r] == -1:
            labels[r] = next_label
            next_label += 1
        labels[i] = labels[r]
    return labels, next_label


@njit
def _components_numba(src, dst, count):  # pragma: no cover - jitted
    parent = np.arange(count, dtype=np.int64)
    for t in range(src.size):
        a = src[t]
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        b = dst[t]
        while parent[b] != b:
            parent[b] = parent[parent[b]]
            b = parent[b]
        if a == b:
            continue
        if a < b:
            parent[b] = a
        else:
            parent[a] = b
    labels = np.full(count, -1, dtype=np.int64)
    next_label = 0
    for i in range(count):
        r = i
        while parent[r] != r:
            r = parent[r]
        c = i
        while parent[c] != r:
            step = parent[c]
            parent[c] = r
            c = step
        if labels[r] == -1:
            labels[r] = next_label
            next_label += 1
        labels[i] = labels[r]
    return labels, next_label


def connected_components(src: np.ndarray, dst: np.ndarray, count: int):
    """Component label per node for an undirected edge list.

    Labels form a contiguous range starting at 0, ordered by each
    component's smallest member index, so the output is invariant to edge
    order and orientation.
    """
    src = np.ascontiguousarray(src, dtype=np.int64)
    dst = np.ascontiguousarray(dst, dtype=np.int64)
    if src.shape != dst.shape:
        raise ValueError("edge endpoint arrays differ in length")
    if src.size and (src.min() < 0 or dst.min() < 0
                     or src.max() >= count or dst.max() >= count):
        raise ValueError("edge endpoint out of range")
    if numba_enabled():
        labels, total = _components_numba(src, dst, count)
    else:
        labels, total = _components_numpy(src, dst, count)
    return labels, int(total)

"""Ordered kNN neighbor clusters and their sub-cluster decomposition.

A neighbor cluster of size n around sample i holds i itself at rank 0
(self-similarity 1) followed by the n-1 nearest other samples by cosine
similarity, ordered descending with ascending sample index on exact ties.
Decomposition splits the ranked members into k contiguous blocks of equal
length s = n/k, so block 0 holds the centroid and the closest neighbors
and block k-1 the farthest.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import _kernels
from .data import EmbeddingSet
from .errors import ConfigError


@dataclass
class NeighborCluster:
    """Ranked neighborhood of one centroid sample.

    members[0] == centroid; similarities are cosine similarities of each
    member to the centroid, non-increasing with rank; targets, when labels
    are known, flag members sharing the centroid's identity (1.0/0.0).
    """

    centroid: int
    members: np.ndarray
    similarities: np.ndarray
    targets: Optional[np.ndarray] = None

    @property
    def size(self) -> int:
        return self.members.shape[0]


@dataclass
class SubClusterBatch:
    """The k rank-contiguous token blocks of one decomposed cluster."""

    k: int
    s: int
    sequences: np.ndarray          # (k, s, d) embedding rows in rank order
    source: NeighborCluster


@dataclass
class ClusterCache:
    """Vectorized neighborhoods for a batch of query indices."""

    n: int
    indices: np.ndarray            # (Q,) query sample indices
    members: np.ndarray            # (Q, n) ranked member indices
    similarities: np.ndarray       # (Q, n)
    targets: Optional[np.ndarray]  # (Q, n) or None when labels are unknown


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Dot product of two vectors; inputs are expected unit-norm."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return float(np.dot(a, b))


def knn_batch(dataset: EmbeddingSet, n: int,
              indices: Optional[Sequence[int]] = None,
              threads: int = 1, chunk: int = 1024) -> ClusterCache:
    """Brute-force kNN neighborhoods for the given query indices (default
    all samples).

    Similarities are exact dense dot products against every sample; no
    approximate index is involved, so results are a pure function of the
    inputs. ``threads`` fans independent query chunks out over a thread
    pool; results are assembled by position, so the thread count never
    changes the output.
    """
    count = dataset.count
    if not 1 <= n <= count:
        raise ConfigError(f"cluster size n={n} must satisfy 1 <= n <= N={count}")
    vectors = dataset.vectors
    if indices is None:
        query = np.arange(count, dtype=np.int64)
    else:
        query = np.asarray(indices, dtype=np.int64)
        if query.size and (query.min() < 0 or query.max() >= count):
            raise ConfigError("query index out of range")
    members = np.empty((query.size, n), dtype=np.int64)
    sims = np.empty((query.size, n), dtype=np.float64)
    members[:, 0] = query
    sims[:, 0] = 1.0

    def work(start: int) -> None:
        stop = min(start + chunk, query.size)
        block = query[start:stop]
        scores = vectors[block] @ vectors.T
        if n > 1:
            idx, val = _kernels.top_n_desc(scores, block, n - 1)
            members[start:stop, 1:] = idx
            sims[start:stop, 1:] = val

    starts = range(0, query.size, chunk)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(work, starts))
    else:
        for start in starts:
            work(start)

    targets = None
    if dataset.labels is not None:
        targets = (dataset.labels[members] ==
                   dataset.labels[query][:, None]).astype(np.float64)
    return ClusterCache(n, query, members, sims, targets)


def knn_query(dataset: EmbeddingSet, i: int, n: int) -> NeighborCluster:
    """Ranked neighborhood of sample ``i`` (see module docstring for the
    ordering contract)."""
    if not 0 <= i < dataset.count:
        raise ConfigError(f"sample index {i} out of range for N={dataset.count}")
    cache = knn_batch(dataset, n, indices=[i])
    targets = None if cache.targets is None else cache.targets[0]
    return NeighborCluster(i, cache.members[0], cache.similarities[0], targets)


def cluster_from_cache(cache: ClusterCache, row: int) -> NeighborCluster:
    """View one cache row as a NeighborCluster."""
    targets = None if cache.targets is None else cache.targets[row]
    return NeighborCluster(int(cache.indices[row]), cache.members[row],
                           cache.similarities[row], targets)


def decompose(cluster: NeighborCluster, k: int,
              dataset: EmbeddingSet) -> SubClusterBatch:
    """Split a cluster into k contiguous rank blocks of embedding rows.

    k must divide the cluster size exactly; there is no padding.
    """
    n = cluster.size
    if k < 1 or n % k != 0:
        raise ConfigError(f"k={k} must divide cluster size n={n}")
    s = n // k
    sequences = dataset.vectors[cluster.members].reshape(k, s, dataset.dim)
    return SubClusterBatch(k, s, sequences, cluster)


def verify_order(batch: SubClusterBatch) -> bool:
    """Check the rank-order constraints of a decomposition.

    Within every block similarities to the centroid are non-increasing,
    and the last member of block m is at least as similar as the first
    member of block m+1.
    """
    sims = batch.source.similarities
    k, s = batch.k, batch.s
    for m in range(k):
        block = sims[m * s:(m + 1) * s]
        if np.any(block[:-1] < block[1:]):
            return False
        if m + 1 < k and sims[(m + 1) * s - 1] < sims[(m + 1) * s]:
            return False
    return True

"""From per-cluster predictions to a global partition.

Every neighbor whose probability clears the threshold contributes a link
(centroid, member); duplicate links from overlapping clusters keep the
maximum confidence. The global partition is the connected components of
the resulting undirected graph, with component ids relabeled to a
contiguous range ordered by each component's smallest member index, so
the output is invariant to edge order.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import _kernels
from .errors import DataError
from .neighborhood import NeighborCluster


@dataclass
class LinkSet:
    """Deduplicated undirected links with confidences, sorted by endpoint
    pair; src[t] < dst[t] for every link."""

    src: np.ndarray
    dst: np.ndarray
    confidence: np.ndarray

    @property
    def count(self) -> int:
        return self.src.shape[0]


@dataclass
class Partition:
    """Cluster id per sample; ids form the contiguous range
    0..cluster_count-1."""

    assignment: np.ndarray
    cluster_count: int


def extract_links(clusters: Sequence[NeighborCluster],
                  predictions: Sequence[np.ndarray],
                  threshold: float) -> LinkSet:
    """Links (centroid, member) for every member with q strictly above the
    threshold, rank 0 (the centroid itself) excluded."""
    if len(clusters) != len(predictions):
        raise ValueError(
            f"{len(clusters)} clusters but {len(predictions)} prediction vectors")
    src_parts: List[np.ndarray] = []
    dst_parts: List[np.ndarray] = []
    conf_parts: List[np.ndarray] = []
    for cluster, q in zip(clusters, predictions):
        q = np.asarray(q, dtype=np.float64)
        if q.shape != (cluster.size,):
            raise ValueError(
                f"prediction shape {q.shape} does not match cluster size "
                f"{cluster.size}")
        hit = np.flatnonzero(q[1:] > threshold) + 1
        src_parts.append(np.full(hit.size, cluster.centroid, dtype=np.int64))
        dst_parts.append(cluster.members[hit].astype(np.int64))
        conf_parts.append(q[hit])
    if not src_parts:
        return LinkSet(np.empty(0, np.int64), np.empty(0, np.int64),
                       np.empty(0, np.float64))
    src = np.concatenate(src_parts)
    dst = np.concatenate(dst_parts)
    conf = np.concatenate(conf_parts)
    return _dedup(src, dst, conf)


def extract_links_arrays(members: np.ndarray, predictions: np.ndarray,
                         threshold: float) -> LinkSet:
    """Vectorized variant over a cluster cache: members and predictions
    are both (Q, n) with members[:, 0] the centroids."""
    members = np.asarray(members, dtype=np.int64)
    predictions = np.asarray(predictions, dtype=np.float64)
    if members.shape != predictions.shape or members.ndim != 2:
        raise ValueError(
            f"shape mismatch: members {members.shape} vs predictions "
            f"{predictions.shape}")
    rows, cols = np.nonzero(predictions[:, 1:] > threshold)
    cols = cols + 1
    src = members[rows, 0]
    dst = members[rows, cols]
    conf = predictions[rows, cols]
    return _dedup(src, dst, conf)


def _dedup(src, dst, conf) -> LinkSet:
    lo = np.minimum(src, dst)
    hi = np.maximum(src, dst)
    self_edges = lo == hi
    if self_edges.any():
        lo, hi, conf = lo[~self_edges], hi[~self_edges], conf[~self_edges]
    if lo.size == 0:
        return LinkSet(np.empty(0, np.int64), np.empty(0, np.int64),
                       np.empty(0, np.float64))
    span = int(hi.max()) + 1
    key = lo * span + hi
    # sort by (key, confidence): the last entry per key carries the max
    order = np.lexsort((conf, key))
    key, lo, hi, conf = key[order], lo[order], hi[order], conf[order]
    last = np.r_[key[1:] != key[:-1], True]
    return LinkSet(lo[last], hi[last], conf[last])


def merge(links: LinkSet, count: int) -> Partition:
    """Connected components of the link graph over ``count`` samples.

    Unlinked samples stay singleton clusters. Confidences do not affect
    the merge; they only witness why a link exists.
    """
    labels, total = _kernels.connected_components(links.src, links.dst, count)
    return Partition(labels, total)


def save_partition(partition: Partition, path,
                   header_comment: Optional[str] = None) -> None:
    """Write ``sample_index,cluster_id`` rows, optionally preceded by a
    ``#`` provenance comment."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        fh.write("sample_index,cluster_id\n")
        for i, c in enumerate(partition.assignment):
            fh.write(f"{i},{c}\n")


def load_partition(path) -> Partition:
    """Read a partition CSV written by :func:`save_partition`."""
    path = Path(path)
    rows: List[tuple] = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(line for line in fh if not line.startswith("#"))
        header = next(reader, None)
        if header != ["sample_index", "cluster_id"]:
            raise DataError(f"unexpected partition header {header}", path=str(path))
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 2:
                raise DataError("expected two columns", path=str(path), line=lineno)
            try:
                rows.append((int(row[0]), int(row[1])))
            except ValueError as exc:
                raise DataError(f"unparseable row: {exc}",
                                path=str(path), line=lineno) from exc
    if not rows:
        raise DataError("empty partition", path=str(path))
    rows.sort()
    indices = np.array([r[0] for r in rows], dtype=np.int64)
    if not np.array_equal(indices, np.arange(len(rows))):
        raise DataError("sample indices are not the contiguous range 0..N-1",
                        path=str(path))
    assignment = np.array([r[1] for r in rows], dtype=np.int64)
    return Partition(assignment, int(np.unique(assignment).size))

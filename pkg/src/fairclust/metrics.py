"""Clustering quality and per-group fairness reporting.

Three partition metrics, all invariant to cluster relabeling:

* pairwise F: precision/recall over same-cluster sample pairs,
  F = 2PR/(P+R), 0 when P+R is 0;
* BCubed F: per-sample precision/recall averaged over samples, then
  combined into F;
* NMI: mutual information normalized by the arithmetic mean of the two
  partition entropies (natural log), 0 by convention when either
  partition has a single cluster.

The fairness report evaluates the induced sub-partitions per sensitive
group and aggregates with the cross-group mean, sample standard
deviation, and the demographic-parity gap
delta = 0.5 * sum_ij |m_i - m_j| over one chosen metric.
"""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np


@dataclass
class PartitionMetrics:
    """The three partition scores for one evaluation."""

    pairwise_f: float
    bcubed_f: float
    nmi: float


@dataclass
class FairnessReport:
    """Per-group scores with cross-group aggregates.

    ``std`` is the sample standard deviation (n-1 denominator) across
    groups, 0 when fewer than two groups are present. ``delta_dp`` is the
    demographic-parity gap over ``delta_metric``. Groups with fewer than
    two samples are excluded (and listed in ``excluded_groups``).
    """

    per_group: Dict[str, PartitionMetrics]
    mean: PartitionMetrics
    std: PartitionMetrics
    delta_dp: float
    delta_metric: str
    excluded_groups: List[str]


def _labels(x) -> np.ndarray:
    arr = getattr(x, "assignment", x)
    arr = np.asarray(arr)
    if arr.ndim != 1:
        raise ValueError(f"partition labels must be 1-D, got shape {arr.shape}")
    return arr


def _check_pair(pred, truth) -> Tuple[np.ndarray, np.ndarray]:
    p = _labels(pred)
    t = _labels(truth)
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: pred {p.shape} vs truth {t.shape}")
    if p.size == 0:
        raise ValueError("empty partitions")
    return p, t


def _contingency(pred, truth):
    """Nonzero contingency cells plus marginal counts, via integer
    factorization of the joint codes."""
    _, pi = np.unique(pred, return_inverse=True)
    _, ti = np.unique(truth, return_inverse=True)
    t_count = int(ti.max()) + 1
    joint = pi.astype(np.int64) * t_count + ti
    cells, cell_counts = np.unique(joint, return_counts=True)
    pred_sizes = np.bincount(pi)
    truth_sizes = np.bincount(ti)
    cell_pred = cells // t_count
    cell_truth = cells % t_count
    return cell_counts, cell_pred, cell_truth, pred_sizes, truth_sizes


def pairwise_f(pred, truth) -> float:
    """F-score over unordered same-cluster pairs."""
    p, t = _check_pair(pred, truth)
    cell_counts, _, _, pred_sizes, truth_sizes = _contingency(p, t)
    pairs = lambda c: float(np.sum(c.astype(np.float64) * (c - 1) / 2.0))
    tp = pairs(cell_counts)
    pred_pairs = pairs(pred_sizes)
    truth_pairs = pairs(truth_sizes)
    if pred_pairs == 0.0 or truth_pairs == 0.0:
        # no same-cluster pairs on one side: no pair precision or recall
        return 0.0
    precision = tp / pred_pairs
    recall = tp / truth_pairs
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def bcubed_f(pred, truth) -> float:
    """F-score of the per-sample BCubed precision and recall averages."""
    p, t = _check_pair(pred, truth)
    cell_counts, cell_pred, cell_truth, pred_sizes, truth_sizes = _contingency(p, t)
    c = cell_counts.astype(np.float64)
    n = p.size
    # each cell holds c samples, each scoring c/|pred cluster| precision
    precision = float(np.sum(c * c / pred_sizes[cell_pred])) / n
    recall = float(np.sum(c * c / truth_sizes[cell_truth])) / n
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def nmi(pred, truth) -> float:
    """Normalized mutual information (arithmetic-mean normalization)."""
    p, t = _check_pair(pred, truth)
    cell_counts, cell_pred, cell_truth, pred_sizes, truth_sizes = _contingency(p, t)
    n = float(p.size)
    pa = pred_sizes / n
    pb = truth_sizes / n
    h_pred = float(-np.sum(pa * np.log(pa)))
    h_truth = float(-np.sum(pb * np.log(pb)))
    if h_pred == 0.0 or h_truth == 0.0:
        return 0.0
    pj = cell_counts / n
    mi = float(np.sum(pj * np.log(pj / (pa[cell_pred] * pb[cell_truth]))))
    return mi / (0.5 * (h_pred + h_truth))


def compute_partition_metrics(pred, truth) -> PartitionMetrics:
    """All three metrics for one prediction/truth pair."""
    return PartitionMetrics(pairwise_f(pred, truth), bcubed_f(pred, truth),
                            nmi(pred, truth))


def delta_dp(values: Sequence[float]) -> float:
    """Demographic-parity gap 0.5 * sum_ij |v_i - v_j| over all ordered
    group pairs."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError("values must be 1-D")
    return float(0.5 * np.sum(np.abs(v[:, None] - v[None, :])))


def aggregate_group_metrics(per_group: Dict[str, PartitionMetrics],
                            delta_metric: str = "pairwise_f",
                            excluded: Optional[List[str]] = None
                            ) -> FairnessReport:
    """Cross-group aggregates from already-computed per-group scores.

    Mean and sample std (0 with fewer than two groups) are taken per
    metric; the parity gap uses ``delta_metric``.
    """
    if not per_group:
        raise ValueError("no groups to aggregate")
    if delta_metric not in PartitionMetrics.__dataclass_fields__:
        raise ValueError(f"unknown metric {delta_metric!r}")
    names = list(PartitionMetrics.__dataclass_fields__)
    columns = {name: np.array([getattr(m, name) for m in per_group.values()])
               for name in names}
    mean = PartitionMetrics(**{n: float(np.mean(c)) for n, c in columns.items()})
    if len(per_group) > 1:
        std = PartitionMetrics(
            **{n: float(np.std(c, ddof=1)) for n, c in columns.items()})
    else:
        std = PartitionMetrics(0.0, 0.0, 0.0)
    gap = delta_dp(columns[delta_metric])
    return FairnessReport(dict(per_group), mean, std, gap, delta_metric,
                          list(excluded or []))


def group_report(pred, truth, groups,
                 delta_metric: str = "pairwise_f") -> FairnessReport:
    """Evaluate each sensitive group's induced sub-partition and aggregate.

    Group keys appear in first-occurrence order. A group with fewer than
    two samples has no pair structure to score; it is dropped with a
    warning and recorded in the report.
    """
    p, t = _check_pair(pred, truth)
    g = np.asarray(groups)
    if g.shape != p.shape:
        raise ValueError(f"groups shape {g.shape} does not match {p.shape}")
    order = {}
    for value in g:
        order.setdefault(str(value), value)
    per_group: Dict[str, PartitionMetrics] = {}
    excluded: List[str] = []
    for name, value in order.items():
        mask = g == value
        if int(mask.sum()) < 2:
            warnings.warn(f"group {name!r} has fewer than 2 samples; excluded "
                          "from the fairness report")
            excluded.append(name)
            continue
        per_group[name] = compute_partition_metrics(p[mask], t[mask])
    if not per_group:
        raise ValueError("no group has at least 2 samples")
    return aggregate_group_metrics(per_group, delta_metric, excluded)


def save_report_json(report: FairnessReport, path,
                     overall: Optional[PartitionMetrics] = None,
                     extra: Optional[dict] = None) -> None:
    """Serialize a report (plus optional whole-dataset scores and
    provenance fields) as JSON."""
    payload = {
        "per_group": {k: asdict(v) for k, v in report.per_group.items()},
        "mean": asdict(report.mean),
        "std": asdict(report.std),
        "delta_dp": report.delta_dp,
        "delta_metric": report.delta_metric,
        "excluded_groups": report.excluded_groups,
    }
    if overall is not None:
        payload["overall"] = asdict(overall)
    if extra:
        payload.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def save_report_csv(report: FairnessReport, path,
                    header_comment: Optional[str] = None) -> None:
    """Tabular report: one row per metric, group columns first, then the
    Mean and STD columns, with the parity gap as a final row."""
    names = list(PartitionMetrics.__dataclass_fields__)
    groups = list(report.per_group)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        writer = csv.writer(fh)
        writer.writerow(["metric", *groups, "Mean", "STD"])
        for name in names:
            row = [f"{getattr(report.per_group[g], name):.6f}" for g in groups]
            row.append(f"{getattr(report.mean, name):.6f}")
            row.append(f"{getattr(report.std, name):.6f}")
            writer.writerow([name, *row])
        writer.writerow([f"delta_dp({report.delta_metric})",
                         f"{report.delta_dp:.6f}"])

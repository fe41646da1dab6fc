"""Training losses: pair-count clustering loss, purity, fairness penalty.

The clustering loss is the Fowlkes-Mallows surrogate

    L = (fp + fn) / (2*tp + fn + fp)

over confusion counts against the centroid-identity targets. In soft mode
(no threshold) the counts are computed directly from probabilities, which
keeps the loss differentiable; with S = sum(q), T = sum(targets) and
tp = sum(q * targets) the denominator collapses to S + T, giving the
closed forms used below. In hard mode predictions are first binarized
with a strictly-greater threshold.

Cluster purity is the fraction of predicted-positive mass that is truly
positive, gamma = |N+| / (n - n-): the numerator counts ground-truth
positives in the cluster and the denominator counts members not predicted
negative. The fairness penalty is the mean absolute deviation of
per-cluster purities from a reference purity (by default the batch mean).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

PURITY_EPS = 1e-6
_BCE_CLIP = 1e-12


@dataclass
class ConfusionCounts:
    """Pairwise-style confusion totals over one cluster; tp+fp+fn+tn == n."""

    tp: float
    fp: float
    fn: float
    tn: float


@dataclass
class PurityValue:
    """Cluster purity with its raw numerator and denominator.

    gamma = numerator / max(denominator, eps); the soft denominator is the
    total predicted-positive mass, so gamma can exceed 1 when ground-truth
    positives outnumber it (pass clamp=True to cap at 1).
    """

    gamma: float
    numerator: float
    denominator: float


@dataclass
class ObjectiveValue:
    """Weighted training objective: clustering + lambda * fairness."""

    total: float
    clustering_term: float
    fairness_term: float
    weight: float


def _check_pair(q, targets):
    q = np.asarray(q, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if q.shape != targets.shape or q.ndim != 1:
        raise ValueError(f"shape mismatch: q {q.shape} vs targets {targets.shape}")
    return q, targets


def confusion_counts(q, targets, threshold: Optional[float] = None) -> ConfusionCounts:
    """Soft (threshold=None) or hard confusion counts for one cluster.

    Hard mode binarizes with q > threshold (strictly greater).
    """
    q, targets = _check_pair(q, targets)
    if threshold is not None:
        q = (q > threshold).astype(np.float64)
    tp = float(np.sum(q * targets))
    fp = float(np.sum(q)) - tp
    fn = float(np.sum(targets)) - tp
    tn = q.size - tp - fp - fn
    return ConfusionCounts(tp, fp, fn, tn)


def fmi_loss(counts: ConfusionCounts) -> float:
    """(fp + fn) / (2*tp + fn + fp); 0 by convention when the denominator
    vanishes (nothing predicted or labeled positive)."""
    den = 2.0 * counts.tp + counts.fn + counts.fp
    if den <= 0.0:
        return 0.0
    return (counts.fp + counts.fn) / den


def fmi_loss_grad(q, targets) -> np.ndarray:
    """Gradient of the soft loss with respect to q.

    With S = sum(q), T = sum(targets), tp = sum(q*targets) the loss is
    (S + T - 2*tp) / (S + T) and the quotient rule gives

        dL/dq_j = ((1 - 2*t_j) * (S + T) - (S + T - 2*tp)) / (S + T)^2.

    Zero when the denominator vanishes (the loss is constant 0 there).
    """
    q, targets = _check_pair(q, targets)
    S = float(np.sum(q))
    T = float(np.sum(targets))
    tp = float(np.sum(q * targets))
    den = S + T
    if den <= 0.0:
        return np.zeros_like(q)
    return ((1.0 - 2.0 * targets) * den - (den - 2.0 * tp)) / (den * den)


def bce_loss(q, targets) -> float:
    """Mean binary cross-entropy with probabilities clipped away from 0/1."""
    q, targets = _check_pair(q, targets)
    p = np.clip(q, _BCE_CLIP, 1.0 - _BCE_CLIP)
    return float(-np.mean(targets * np.log(p) + (1.0 - targets) * np.log1p(-p)))


def bce_loss_grad(q, targets) -> np.ndarray:
    """Gradient of the mean BCE with respect to q (zero inside the clipped
    tails, matching the flat clipped loss)."""
    q, targets = _check_pair(q, targets)
    p = np.clip(q, _BCE_CLIP, 1.0 - _BCE_CLIP)
    grad = (p - targets) / (p * (1.0 - p)) / q.size
    grad[(q < _BCE_CLIP) | (q > 1.0 - _BCE_CLIP)] = 0.0
    return grad


def purity(q, targets, threshold: Optional[float] = None,
           clamp: bool = False) -> PurityValue:
    """Cluster purity gamma = |N+| / (n - n-).

    Soft mode (threshold=None): numerator sum(targets), denominator
    sum(q) (members not predicted negative, counted by mass). Hard mode:
    denominator counts members with q > threshold. The denominator is
    floored at PURITY_EPS; clamp=True caps gamma at 1.
    """
    q, targets = _check_pair(q, targets)
    if threshold is not None:
        q = (q > threshold).astype(np.float64)
    numerator = float(np.sum(targets))
    denominator = float(np.sum(q))
    gamma = numerator / max(denominator, PURITY_EPS)
    if clamp:
        gamma = min(gamma, 1.0)
    return PurityValue(gamma, numerator, denominator)


def purity_soft_grad(q, targets) -> np.ndarray:
    """d(gamma)/dq for the soft purity: -numerator / denominator^2 in every
    coordinate, 0 when the denominator sits on the eps floor."""
    q, targets = _check_pair(q, targets)
    numerator = float(np.sum(targets))
    denominator = float(np.sum(q))
    if denominator <= PURITY_EPS:
        return np.zeros_like(q)
    return np.full_like(q, -numerator / (denominator * denominator))


def fairness_loss(gammas: Sequence[float],
                  reference: Optional[float] = None) -> float:
    """Mean absolute deviation of cluster purities from the reference
    purity (batch mean when not given)."""
    g = np.asarray(gammas, dtype=np.float64)
    if g.ndim != 1 or g.size == 0:
        raise ValueError("gammas must be a non-empty 1-D sequence")
    ref = float(np.mean(g)) if reference is None else float(reference)
    return float(np.mean(np.abs(g - ref)))


def fairness_loss_grad(gammas: Sequence[float],
                       reference: Optional[float] = None,
                       differentiate_reference: bool = True) -> np.ndarray:
    """Gradient of the fairness penalty with respect to each purity.

    With a batch-mean reference the mean depends on every gamma, so

        dL/dg_j = (sign(g_j - ref) - mean_i sign(g_i - ref)) / B

    unless differentiate_reference=False, which treats the reference as a
    constant (dL/dg_j = sign(g_j - ref) / B). sign(0) = 0, the usual
    subgradient choice at the kink.
    """
    g = np.asarray(gammas, dtype=np.float64)
    if g.ndim != 1 or g.size == 0:
        raise ValueError("gammas must be a non-empty 1-D sequence")
    external = reference is not None
    ref = float(np.mean(g)) if reference is None else float(reference)
    signs = np.sign(g - ref)
    if external or not differentiate_reference:
        return signs / g.size
    return (signs - np.mean(signs)) / g.size


def combined_objective(clustering: float, fairness: float,
                       weight: float) -> ObjectiveValue:
    """Total objective clustering + weight * fairness."""
    if weight < 0:
        raise ValueError(f"weight must be >= 0, got {weight}")
    total = clustering + weight * fairness
    return ObjectiveValue(total, clustering, fairness, weight)


def lemma1_bound(mu_i: float, mu_j: float) -> bool:
    """Check |mu_i - mu_j| <= mu_i + mu_j for nonnegative inputs.

    True for every valid input pair; exposed so the inequality backing the
    demographic-parity relaxation is testable directly.
    """
    if mu_i < 0 or mu_j < 0:
        raise ValueError(f"inputs must be nonnegative, got ({mu_i}, {mu_j})")
    return abs(mu_i - mu_j) <= mu_i + mu_j

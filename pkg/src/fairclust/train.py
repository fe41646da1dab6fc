"""Training loop: Adam with cosine learning-rate decay and a ramped
fairness weight, plus a finite-difference gradient checker.

Each optimizer step draws a batch of neighbor clusters, runs the model,
and minimizes

    mean_i L_cluster(q_i) + lambda(epoch) * L_fair(gamma_1..gamma_B)

where L_cluster is the pair-count surrogate (or BCE for the baseline arm)
and the purities gamma_i use the soft counts so the fairness term stays
differentiable. lambda is 0 through the warm-up epochs, then ramps
linearly to lambda_max by the final epoch.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import losses
from .data import EmbeddingSet
from .errors import ConfigError, DataError, NumericError
from .model import (Hyper, IntraformerParams, init_params, intraformer_backward,
                    intraformer_forward_batch, param_order)
from .neighborhood import ClusterCache, knn_batch

LOG_FIELDS = ("epoch", "step", "lr", "lambda", "fmi_loss", "fair_loss",
              "total", "gamma_mean", "gamma_std")


@dataclass
class TrainConfig:
    """Optimization settings; defaults follow the reference recipe."""

    epochs: int = 10
    batch_size: int = 16
    lr0: float = 1e-4
    lr_min: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_epochs: int = 2
    lambda_max: float = 1.0
    seed: int = 0
    loss: str = "fmi"
    grad_clip: Optional[float] = None
    detach_reference: bool = False

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 < self.lr0:
            raise ConfigError(f"lr0 must be > 0, got {self.lr0}")
        if not 0.0 <= self.lr_min <= self.lr0:
            raise ConfigError(
                f"need 0 <= lr_min <= lr0, got lr_min={self.lr_min} lr0={self.lr0}")
        for name in ("beta1", "beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must be in [0, 1)")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ConfigError(
                f"warmup_epochs={self.warmup_epochs} must be in [0, epochs]")
        if self.lambda_max < 0:
            raise ConfigError(f"lambda_max must be >= 0, got {self.lambda_max}")
        if self.loss not in ("fmi", "bce"):
            raise ConfigError(f"loss must be 'fmi' or 'bce', got {self.loss!r}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError(f"grad_clip must be > 0, got {self.grad_clip}")


@dataclass
class OptimizerState:
    """Adam moments plus the bias-correction step counter."""

    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int = 0


def init_optimizer(params: IntraformerParams) -> OptimizerState:
    zeros = lambda: {k: np.zeros_like(v) for k, v in params.tensors.items()}
    return OptimizerState(zeros(), zeros())


def cosine_lr(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Cosine decay from lr0 at step 0 to lr_min at step total_steps."""
    if total_steps <= 0:
        raise ValueError(f"total_steps must be > 0, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    span = cfg.lr0 - cfg.lr_min
    return cfg.lr_min + 0.5 * span * (1.0 + math.cos(math.pi * step / total_steps))


def lambda_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Fairness weight: 0 through the warm-up epochs, then a linear ramp
    reaching lambda_max at the final epoch."""
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    if epoch < cfg.warmup_epochs:
        return 0.0
    remaining = cfg.epochs - cfg.warmup_epochs
    if remaining <= 0:
        return 0.0
    return cfg.lambda_max * (epoch - cfg.warmup_epochs + 1) / remaining


def adam_step(params: IntraformerParams, grads: Dict[str, np.ndarray],
              state: OptimizerState, lr: float,
              cfg: TrainConfig) -> Tuple[IntraformerParams, OptimizerState]:
    """One bias-corrected Adam update, in place.

    A non-finite gradient aborts with the offending parameter named.
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    for name in params.tensors:
        g = grads[name]
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient in parameter {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        params.tensors[name] -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
    return params, state


def _clip_grads(grads: Dict[str, np.ndarray], limit: float) -> None:
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > limit:
        scale = limit / total
        for g in grads.values():
            g *= scale


def _batch_losses(q: np.ndarray, targets: np.ndarray, kind: str):
    """Per-cluster clustering losses, their dL/dq rows, and soft purities."""
    rows = q.shape[0]
    loss_vals = np.empty(rows)
    loss_grads = np.empty_like(q)
    gammas = np.empty(rows)
    purity_grads = np.empty(rows)
    for i in range(rows):
        if kind == "fmi":
            loss_vals[i] = losses.fmi_loss(losses.confusion_counts(q[i], targets[i]))
            loss_grads[i] = losses.fmi_loss_grad(q[i], targets[i])
        else:
            loss_vals[i] = losses.bce_loss(q[i], targets[i])
            loss_grads[i] = losses.bce_loss_grad(q[i], targets[i])
        pv = losses.purity(q[i], targets[i])
        gammas[i] = pv.gamma
        purity_grads[i] = losses.purity_soft_grad(q[i], targets[i])[0]
    return loss_vals, loss_grads, gammas, purity_grads


def train(dataset: EmbeddingSet, params: IntraformerParams, cfg: TrainConfig,
          clusters: Optional[ClusterCache] = None,
          threads: int = 1) -> Tuple[IntraformerParams, List[dict]]:
    """Optimize params on the dataset's neighbor clusters.

    Returns the trained params (updated in place) and one log row per
    epoch with the fields in LOG_FIELDS. Epoch ordering is drawn from a
    single seeded generator, so runs are exactly repeatable.
    """
    cfg.validate()
    if dataset.labels is None:
        raise DataError("training requires ground-truth identity labels")
    hyper = params.hyper
    if clusters is None:
        clusters = knn_batch(dataset, hyper.n, threads=threads)
    if clusters.n != hyper.n:
        raise ConfigError(
            f"cluster cache built for n={clusters.n}, model expects n={hyper.n}")
    if clusters.targets is None:
        raise DataError("cluster cache lacks targets; rebuild it with labels")

    count = clusters.indices.size
    steps_per_epoch = (count + cfg.batch_size - 1) // cfg.batch_size
    total_steps = cfg.epochs * steps_per_epoch
    rng = np.random.default_rng(cfg.seed)
    state = init_optimizer(params)
    vectors = dataset.vectors
    k, s, d = hyper.k, hyper.s, hyper.d
    logs: List[dict] = []
    step = 0
    for epoch in range(cfg.epochs):
        lam = lambda_schedule(epoch, cfg)
        perm = rng.permutation(count)
        sum_cluster = sum_fair = sum_total = 0.0
        epoch_gammas: List[np.ndarray] = []
        last_lr = cfg.lr0
        for start in range(0, count, cfg.batch_size):
            rows = perm[start:start + cfg.batch_size]
            tokens = vectors[clusters.members[rows]].reshape(rows.size, k, s, d)
            targets = clusters.targets[rows]
            q, trace = intraformer_forward_batch(tokens, params)
            loss_vals, loss_grads, gammas, purity_grads = _batch_losses(
                q, targets, cfg.loss)
            clustering = float(np.mean(loss_vals))
            fair = losses.fairness_loss(gammas)
            objective = losses.combined_objective(clustering, fair, lam)
            dq = loss_grads / rows.size
            if lam > 0.0:
                dfair = losses.fairness_loss_grad(
                    gammas, differentiate_reference=not cfg.detach_reference)
                dq = dq + lam * (dfair * purity_grads)[:, None]
            grads = intraformer_backward(trace, dq)
            if cfg.grad_clip is not None:
                _clip_grads(grads, cfg.grad_clip)
            last_lr = cosine_lr(step, total_steps, cfg)
            adam_step(params, grads, state, last_lr, cfg)
            step += 1
            sum_cluster += clustering
            sum_fair += fair
            sum_total += objective.total
            epoch_gammas.append(gammas)
        all_gammas = np.concatenate(epoch_gammas)
        logs.append({
            "epoch": epoch,
            "step": step,
            "lr": last_lr,
            "lambda": lam,
            "fmi_loss": sum_cluster / steps_per_epoch,
            "fair_loss": sum_fair / steps_per_epoch,
            "total": sum_total / steps_per_epoch,
            "gamma_mean": float(np.mean(all_gammas)),
            "gamma_std": float(np.std(all_gammas, ddof=1)) if all_gammas.size > 1 else 0.0,
        })
    return params, logs


def write_log_jsonl(rows: List[dict], path, header: Optional[dict] = None) -> None:
    """Write epoch logs as JSON lines, optionally preceded by a header
    record (provenance such as the config hash)."""
    with open(path, "w", encoding="utf-8") as fh:
        if header is not None:
            fh.write(json.dumps(header, sort_keys=True) + "\n")
        for row in rows:
            fh.write(json.dumps({k: row[k] for k in LOG_FIELDS}) + "\n")


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def _composite_objective(tokens, targets, params, lam):
    q, trace = intraformer_forward_batch(tokens, params)
    rows = q.shape[0]
    vals = [losses.fmi_loss(losses.confusion_counts(q[i], targets[i]))
            for i in range(rows)]
    gammas = [losses.purity(q[i], targets[i]).gamma for i in range(rows)]
    total = float(np.mean(vals))
    if lam > 0.0:
        total += lam * losses.fairness_loss(gammas)
    return total, q, trace, np.asarray(gammas)


def _composite_grads(tokens, targets, params, lam):
    _, q, trace, gammas = _composite_objective(tokens, targets, params, lam)
    rows = q.shape[0]
    dq = np.stack([losses.fmi_loss_grad(q[i], targets[i])
                   for i in range(rows)]) / rows
    if lam > 0.0:
        dfair = losses.fairness_loss_grad(gammas)
        pg = np.array([losses.purity_soft_grad(q[i], targets[i])[0]
                       for i in range(rows)])
        dq = dq + lam * (dfair * pg)[:, None]
    return intraformer_backward(trace, dq)


def _gradcheck_instance(hyper, rng, batch_size, params, fd_step):
    """Random cluster batch kept away from the objective's kinks.

    Finite differences assume local smoothness, so instances are resampled
    until (a) every purity is clear of the fairness reference (abs-value
    kink) and (b) every feedforward pre-activation is clear of the ReLU
    corner by a wide multiple of the difference step.
    """
    n = hyper.n
    for _ in range(64):
        tokens = rng.normal(size=(batch_size, hyper.k, hyper.s, hyper.d))
        tokens /= np.linalg.norm(tokens, axis=-1, keepdims=True)
        targets = (rng.random((batch_size, n)) < rng.uniform(
            0.25, 0.75, size=(batch_size, 1))).astype(np.float64)
        targets[:, 0] = 1.0
        if not np.all(targets.sum(axis=1) < n):
            continue
        q, trace = intraformer_forward_batch(tokens, params)
        gammas = np.array([losses.purity(q[i], targets[i]).gamma
                           for i in range(q.shape[0])])
        if np.min(np.abs(gammas - np.mean(gammas))) <= 1e-3:
            continue
        relu_margin = min(float(np.min(np.abs(h)))
                          for h in trace.iter_relu_inputs())
        if relu_margin <= 50.0 * fd_step:
            continue
        return tokens, targets
    raise NumericError("could not sample a gradient-check instance off the kinks")


def gradient_check(hyper: Optional[Hyper] = None, trials: int = 5,
                   seed: int = 0, lam: float = 0.7, batch_size: int = 3,
                   fd_step: float = 1e-5) -> Dict[str, float]:
    """Compare analytic gradients of the composite objective against
    central finite differences.

    Runs ``trials`` random instances (fresh data and params each) and
    returns the max relative error seen per parameter tensor, where
    rel(a, f) = |a - f| / max(|a|, |f|, 1e-6); the floor matches the
    finite-difference noise floor at the default step. trials=0 returns
    an empty report.
    """
    if trials == 0:
        return {}
    if hyper is None:
        hyper = Hyper(d=8, k=2, s=4, n_block=1, n_head=2, ff_dim=16)
    rng = np.random.default_rng(seed)
    report = {name: 0.0 for name, _ in param_order(hyper)}
    for trial in range(trials):
        params = init_params(hyper, seed=int(rng.integers(1 << 31)))
        tokens, targets = _gradcheck_instance(hyper, rng, batch_size, params,
                                              fd_step)
        analytic = _composite_grads(tokens, targets, params, lam)
        for name in report:
            tensor = params.tensors[name]
            flat = tensor.ravel()
            aflat = analytic[name].ravel()
            for idx in range(flat.size):
                keep = flat[idx]
                flat[idx] = keep + fd_step
                hi, *_ = _composite_objective(tokens, targets, params, lam)
                flat[idx] = keep - fd_step
                lo, *_ = _composite_objective(tokens, targets, params, lam)
                flat[idx] = keep
                fd = (hi - lo) / (2.0 * fd_step)
                err = abs(aflat[idx] - fd) / max(abs(aflat[idx]), abs(fd), 1e-6)
                if err > report[name]:
                    report[name] = err
    return report

"""Command-line interface.

Subcommands cover the full run: ``generate`` (synthetic benchmark),
``knn`` (neighborhood cache), ``train``, ``cluster`` (partition via link
extraction + merge), ``evaluate`` (fairness report), ``gradcheck``, and
``pipeline`` (all of the above in order).

Configuration lives in a single TOML or JSON file; a few flags
(--output-dir, --seed, --threshold, --threads) override it. Every
artifact embeds a hash of the resolved configuration so outputs can be
traced back to their settings; the thread count does not participate in
the hash because it never changes results. A failing command removes the
artifacts it was writing, so on-disk state never holds partial output.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import metrics as metrics_mod
from . import postprocess
from .data import (EmbeddingSet, GroupSpec, SyntheticSpec, generate_synthetic,
                   l2_normalize, load_embeddings, save_embeddings)
from .errors import ConfigError, DataError, FairclustError
from .model import (Hyper, init_params, intraformer_forward_batch,
                    load_checkpoint, save_checkpoint)
from .neighborhood import ClusterCache, knn_batch
from .train import (TrainConfig, gradient_check, train as run_training,
                    write_log_jsonl)


@dataclass
class PipelineConfig:
    """Fully resolved run configuration."""

    knn_n: int
    model_k: int
    model_n_block: int = 2
    model_n_head: int = 4
    model_ff_dim: Optional[int] = None
    model_d: Optional[int] = None
    model_seed: Optional[int] = None
    data_path: Optional[str] = None
    data_format: str = "binary"
    synthetic: Optional[SyntheticSpec] = None
    train_cfg: TrainConfig = field(default_factory=TrainConfig)
    threshold: float = 0.5
    delta_metric: str = "pairwise_f"
    group_attribute: str = "group"
    output_dir: str = "out"
    gradcheck_trials: int = 5
    gradcheck_seed: int = 0
    threads: int = 1

    def validate(self) -> None:
        if self.knn_n < 1:
            raise ConfigError(f"knn.n must be >= 1, got {self.knn_n}")
        if self.model_k < 1 or self.knn_n % self.model_k != 0:
            raise ConfigError(
                f"model.k={self.model_k} must divide knn.n={self.knn_n}")
        if not 0.0 <= self.threshold < 1.0:
            raise ConfigError(
                f"postprocess.threshold must be in [0, 1), got {self.threshold}")
        if self.data_path is None and self.synthetic is None:
            raise ConfigError("config needs data.path or a data.synthetic section")
        self.train_cfg.validate()
        if self.synthetic is not None:
            self.synthetic.validate()

    # -- derived paths ----------------------------------------------------

    @property
    def out(self) -> Path:
        return Path(self.output_dir)

    @property
    def embeddings_path(self) -> Path:
        if self.data_path is not None:
            return Path(self.data_path)
        return self.out / "embeddings.fce"

    @property
    def cache_path(self) -> Path:
        return self.out / "clusters.npz"

    @property
    def checkpoint_path(self) -> Path:
        return self.out / "checkpoint.fcpt"

    @property
    def log_path(self) -> Path:
        return self.out / "train_log.jsonl"

    @property
    def partition_path(self) -> Path:
        return self.out / "partition.csv"

    def hyper_for(self, dim: int) -> Hyper:
        if self.model_d is not None and self.model_d != dim:
            raise ConfigError(
                f"model.d={self.model_d} does not match embedding dim {dim}")
        return Hyper(d=dim, k=self.model_k, s=self.knn_n // self.model_k,
                     n_block=self.model_n_block, n_head=self.model_n_head,
                     ff_dim=self.model_ff_dim)

    def config_hash(self) -> str:
        state = {
            "knn_n": self.knn_n,
            "model": [self.model_k, self.model_n_block, self.model_n_head,
                      self.model_ff_dim, self.model_d, self.model_seed],
            "data": [self.data_path, self.data_format],
            "synthetic": None if self.synthetic is None else {
                "dim": self.synthetic.dim,
                "seed": self.synthetic.seed,
                "groups": [[g.group_id, g.identities, list(g.images),
                            g.noise_scale] for g in self.synthetic.groups],
            },
            "train": vars(self.train_cfg),
            "threshold": self.threshold,
            "delta_metric": self.delta_metric,
            "group_attribute": self.group_attribute,
            "output_dir": self.output_dir,
        }
        blob = json.dumps(state, sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]


def _section(raw: dict, name: str, path: str) -> dict:
    value = raw.get(name, {})
    if not isinstance(value, dict):
        raise ConfigError(f"section [{name}] in {path} must be a table")
    return dict(value)


def _take(table: dict, key: str, kind, default, section: str):
    if key not in table:
        if default is Ellipsis:
            raise ConfigError(f"missing required key {key!r} in [{section}]")
        return default
    value = table.pop(key)
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if not isinstance(value, kind) or isinstance(value, bool) and kind is not bool:
        raise ConfigError(
            f"key {key!r} in [{section}] must be {getattr(kind, '__name__', kind)}")
    return value


def _reject_unknown(table: dict, section: str) -> None:
    if table:
        raise ConfigError(f"unknown keys {sorted(table)} in [{section}]")


def parse_config(raw: dict, path: str = "<config>") -> PipelineConfig:
    """Build a validated PipelineConfig from a parsed TOML/JSON document."""
    if not isinstance(raw, dict):
        raise ConfigError(f"config root in {path} must be a table")
    known = {"data", "knn", "model", "train", "postprocess", "evaluate",
             "output", "gradcheck"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)} in {path}")

    data = _section(raw, "data", path)
    synthetic = None
    if "synthetic" in data:
        table = data.pop("synthetic")
        if not isinstance(table, dict):
            raise ConfigError(f"[data.synthetic] in {path} must be a table")
        syn = dict(table)
        groups_raw = syn.pop("groups", None)
        if not isinstance(groups_raw, list) or not groups_raw:
            raise ConfigError("[data.synthetic] needs a non-empty groups array")
        groups = []
        for i, g in enumerate(groups_raw):
            if not isinstance(g, dict):
                raise ConfigError(f"synthetic group #{i} must be a table")
            g = dict(g)
            images = g.pop("images", None)
            if (not isinstance(images, list) or len(images) != 2
                    or not all(isinstance(v, int) for v in images)):
                raise ConfigError(
                    f"synthetic group #{i} needs images = [lo, hi]")
            groups.append(GroupSpec(
                group_id=str(_take(g, "id", (str, int), Ellipsis, "data.synthetic")),
                identities=_take(g, "identities", int, Ellipsis, "data.synthetic"),
                images=(images[0], images[1]),
                noise_scale=_take(g, "noise", float, Ellipsis, "data.synthetic"),
            ))
            _reject_unknown(g, f"data.synthetic.groups[{i}]")
        synthetic = SyntheticSpec(
            dim=_take(syn, "dim", int, Ellipsis, "data.synthetic"),
            seed=_take(syn, "seed", int, 0, "data.synthetic"),
            groups=tuple(groups))
        _reject_unknown(syn, "data.synthetic")
    data_path = _take(data, "path", str, None, "data")
    data_format = _take(data, "format", str, "binary", "data")
    _reject_unknown(data, "data")

    knn = _section(raw, "knn", path)
    knn_n = _take(knn, "n", int, Ellipsis, "knn")
    _reject_unknown(knn, "knn")

    model = _section(raw, "model", path)
    model_k = _take(model, "k", int, Ellipsis, "model")
    model_n_block = _take(model, "n_block", int, 2, "model")
    model_n_head = _take(model, "n_head", int, 4, "model")
    model_ff_dim = _take(model, "ff_dim", int, None, "model")
    model_d = _take(model, "d", int, None, "model")
    model_seed = _take(model, "seed", int, None, "model")
    _reject_unknown(model, "model")

    tr = _section(raw, "train", path)
    train_cfg = TrainConfig(
        epochs=_take(tr, "epochs", int, 10, "train"),
        batch_size=_take(tr, "batch_size", int, 16, "train"),
        lr0=_take(tr, "lr0", float, 1e-4, "train"),
        lr_min=_take(tr, "lr_min", float, 0.0, "train"),
        beta1=_take(tr, "beta1", float, 0.9, "train"),
        beta2=_take(tr, "beta2", float, 0.999, "train"),
        eps=_take(tr, "eps", float, 1e-8, "train"),
        warmup_epochs=_take(tr, "warmup_epochs", int, 2, "train"),
        lambda_max=_take(tr, "lambda_max", float, 1.0, "train"),
        seed=_take(tr, "seed", int, 0, "train"),
        loss=_take(tr, "loss", str, "fmi", "train"),
        grad_clip=_take(tr, "grad_clip", float, None, "train"),
        detach_reference=_take(tr, "detach_reference", bool, False, "train"),
    )
    _reject_unknown(tr, "train")

    post = _section(raw, "postprocess", path)
    threshold = _take(post, "threshold", float, 0.5, "postprocess")
    _reject_unknown(post, "postprocess")

    ev = _section(raw, "evaluate", path)
    delta_metric = _take(ev, "delta_metric", str, "pairwise_f", "evaluate")
    group_attribute = _take(ev, "group_attribute", str, "group", "evaluate")
    _reject_unknown(ev, "evaluate")

    out = _section(raw, "output", path)
    output_dir = _take(out, "dir", str, "out", "output")
    _reject_unknown(out, "output")

    gc = _section(raw, "gradcheck", path)
    gradcheck_trials = _take(gc, "trials", int, 5, "gradcheck")
    gradcheck_seed = _take(gc, "seed", int, 0, "gradcheck")
    _reject_unknown(gc, "gradcheck")

    cfg = PipelineConfig(
        knn_n=knn_n, model_k=model_k, model_n_block=model_n_block,
        model_n_head=model_n_head, model_ff_dim=model_ff_dim, model_d=model_d,
        model_seed=model_seed, data_path=data_path, data_format=data_format,
        synthetic=synthetic, train_cfg=train_cfg, threshold=threshold,
        delta_metric=delta_metric, group_attribute=group_attribute,
        output_dir=output_dir, gradcheck_trials=gradcheck_trials,
        gradcheck_seed=gradcheck_seed)
    cfg.validate()
    return cfg


def load_config(path) -> PipelineConfig:
    """Parse a .toml or .json config file."""
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        if p.suffix == ".json":
            raw = json.loads(p.read_text("utf-8"))
        elif p.suffix == ".toml":
            with open(p, "rb") as fh:
                raw = tomllib.load(fh)
        else:
            raise ConfigError(f"config must be .toml or .json, got {p.suffix!r}")
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot parse {p}: {exc}") from exc
    return parse_config(raw, str(p))


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------


def _load_dataset(cfg: PipelineConfig) -> EmbeddingSet:
    path = cfg.embeddings_path
    if not path.exists():
        raise DataError("embeddings not found; run 'generate' first or set "
                        "data.path", path=str(path))
    return l2_normalize(load_embeddings(path, cfg.data_format))


def _save_cache(cache: ClusterCache, path, config_hash: str) -> None:
    arrays = {
        "n": np.int64(cache.n),
        "indices": cache.indices,
        "members": cache.members,
        "similarities": cache.similarities,
        "config_hash": np.asarray(config_hash),
    }
    if cache.targets is not None:
        arrays["targets"] = cache.targets
    np.savez(path, **arrays)


def _load_cache(cfg: PipelineConfig) -> ClusterCache:
    path = cfg.cache_path
    if not path.exists():
        raise DataError("neighborhood cache not found; run 'knn' first",
                        path=str(path))
    with np.load(path, allow_pickle=False) as blob:
        n = int(blob["n"])
        if n != cfg.knn_n:
            raise ConfigError(
                f"cache at {path} was built for n={n}, config says "
                f"n={cfg.knn_n}; re-run 'knn'")
        targets = blob["targets"] if "targets" in blob.files else None
        return ClusterCache(n, blob["indices"], blob["members"],
                            blob["similarities"], targets)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _cmd_generate(cfg: PipelineConfig, created: List[Path]) -> None:
    if cfg.synthetic is None:
        raise ConfigError("generate needs a [data.synthetic] section")
    dataset = l2_normalize(generate_synthetic(cfg.synthetic))
    path = cfg.embeddings_path
    path.parent.mkdir(parents=True, exist_ok=True)
    created.append(path)
    save_embeddings(dataset, path, cfg.data_format)
    print(f"wrote {dataset.count} x {dataset.dim} embeddings to {path}")


def _cmd_knn(cfg: PipelineConfig, created: List[Path]) -> None:
    dataset = _load_dataset(cfg)
    cache = knn_batch(dataset, cfg.knn_n, threads=cfg.threads)
    cfg.out.mkdir(parents=True, exist_ok=True)
    created.append(cfg.cache_path)
    _save_cache(cache, cfg.cache_path, cfg.config_hash())
    print(f"wrote {cache.indices.size} neighborhoods of size {cache.n} "
          f"to {cfg.cache_path}")


def _cmd_train(cfg: PipelineConfig, created: List[Path]) -> None:
    dataset = _load_dataset(cfg)
    if not cfg.cache_path.exists():
        _cmd_knn(cfg, created)
    cache = _load_cache(cfg)
    hyper = cfg.hyper_for(dataset.dim)
    seed = cfg.model_seed if cfg.model_seed is not None else cfg.train_cfg.seed
    params = init_params(hyper, seed=seed)
    params, logs = run_training(dataset, params, cfg.train_cfg,
                                clusters=cache, threads=cfg.threads)
    cfg.out.mkdir(parents=True, exist_ok=True)
    digest = cfg.config_hash()
    created.append(cfg.checkpoint_path)
    save_checkpoint(params, cfg.checkpoint_path, extra={"config_hash": digest})
    created.append(cfg.log_path)
    write_log_jsonl(logs, cfg.log_path, header={"config_hash": digest})
    final = logs[-1]
    print(f"trained {cfg.train_cfg.epochs} epochs; final loss "
          f"{final['total']:.4f} (clustering {final['fmi_loss']:.4f}, "
          f"fairness {final['fair_loss']:.4f})")


def _cmd_cluster(cfg: PipelineConfig, created: List[Path]) -> None:
    dataset = _load_dataset(cfg)
    if not cfg.cache_path.exists():
        _cmd_knn(cfg, created)
    cache = _load_cache(cfg)
    if not cfg.checkpoint_path.exists():
        raise DataError("checkpoint not found; run 'train' first",
                        path=str(cfg.checkpoint_path))
    params = load_checkpoint(cfg.checkpoint_path)
    if params.hyper.n != cache.n:
        raise ConfigError(
            f"checkpoint expects n={params.hyper.n}, cache has n={cache.n}")
    predictions = predict_all(dataset, cache, params)
    links = postprocess.extract_links_arrays(cache.members, predictions,
                                             cfg.threshold)
    partition = postprocess.merge(links, dataset.count)
    cfg.out.mkdir(parents=True, exist_ok=True)
    created.append(cfg.partition_path)
    postprocess.save_partition(partition, cfg.partition_path,
                               header_comment=f"config_hash={cfg.config_hash()}")
    print(f"merged {links.count} links into {partition.cluster_count} clusters "
          f"at {cfg.partition_path}")


def predict_all(dataset: EmbeddingSet, cache: ClusterCache, params,
                chunk: int = 256) -> np.ndarray:
    """Model probabilities for every cached neighborhood, (Q, n)."""
    hyper = params.hyper
    q_all = np.empty((cache.indices.size, cache.n))
    for start in range(0, cache.indices.size, chunk):
        rows = slice(start, min(start + chunk, cache.indices.size))
        tokens = dataset.vectors[cache.members[rows]].reshape(
            -1, hyper.k, hyper.s, hyper.d)
        q_all[rows], _ = intraformer_forward_batch(tokens, params)
    return q_all


def _cmd_evaluate(cfg: PipelineConfig, created: List[Path]) -> None:
    dataset = _load_dataset(cfg)
    if dataset.labels is None:
        raise DataError("evaluation requires ground-truth labels in the "
                        "embedding metadata")
    if dataset.groups is None:
        raise DataError(f"evaluation requires the {cfg.group_attribute!r} "
                        "attribute in the embedding metadata")
    if not cfg.partition_path.exists():
        raise DataError("partition not found; run 'cluster' first",
                        path=str(cfg.partition_path))
    partition = postprocess.load_partition(cfg.partition_path)
    if partition.assignment.size != dataset.count:
        raise DataError(
            f"partition covers {partition.assignment.size} samples, dataset "
            f"has {dataset.count}", path=str(cfg.partition_path))
    overall = metrics_mod.compute_partition_metrics(partition, dataset.labels)
    report = metrics_mod.group_report(partition, dataset.labels, dataset.groups,
                                      delta_metric=cfg.delta_metric)
    digest = cfg.config_hash()
    cfg.out.mkdir(parents=True, exist_ok=True)
    json_path = cfg.out / "fairness_report.json"
    csv_path = cfg.out / "fairness_report.csv"
    created.extend([json_path, csv_path])
    metrics_mod.save_report_json(report, json_path, overall=overall,
                                 extra={"config_hash": digest,
                                        "group_attribute": cfg.group_attribute})
    metrics_mod.save_report_csv(report, csv_path,
                                header_comment=f"config_hash={digest}")
    print(f"overall pairwise F {overall.pairwise_f:.4f}, "
          f"parity gap {report.delta_dp:.4f}; report at {json_path}")


def _cmd_gradcheck(cfg: PipelineConfig, created: List[Path]) -> None:
    report = gradient_check(trials=cfg.gradcheck_trials, seed=cfg.gradcheck_seed)
    worst = max(report.values()) if report else 0.0
    cfg.out.mkdir(parents=True, exist_ok=True)
    path = cfg.out / "gradcheck_report.json"
    created.append(path)
    payload = {"max_rel_err": worst, "per_param": report,
               "trials": cfg.gradcheck_trials, "config_hash": cfg.config_hash()}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"gradient check max relative error {worst:.3e} over "
          f"{cfg.gradcheck_trials} trials; report at {path}")


def _cmd_pipeline(cfg: PipelineConfig, created: List[Path]) -> None:
    # each stage manages its own artifacts; a failing stage cleans only its own
    if cfg.synthetic is not None and not cfg.embeddings_path.exists():
        _run_stage(_cmd_generate, cfg)
    _run_stage(_cmd_knn, cfg)
    _run_stage(_cmd_train, cfg)
    _run_stage(_cmd_cluster, cfg)
    _run_stage(_cmd_evaluate, cfg)


_COMMANDS: Dict[str, Callable[[PipelineConfig, List[Path]], None]] = {
    "generate": _cmd_generate,
    "knn": _cmd_knn,
    "train": _cmd_train,
    "cluster": _cmd_cluster,
    "evaluate": _cmd_evaluate,
    "gradcheck": _cmd_gradcheck,
    "pipeline": _cmd_pipeline,
}


def _run_stage(command, cfg: PipelineConfig) -> None:
    created: List[Path] = []
    try:
        command(cfg, created)
    except BaseException:
        for artifact in created:
            Path(artifact).unlink(missing_ok=True)
        raise


def run(subcommand: str, cfg: PipelineConfig) -> int:
    """Programmatic entry point; returns the process exit code."""
    if subcommand not in _COMMANDS:
        raise ConfigError(f"unknown subcommand {subcommand!r}")
    cfg.validate()
    _run_stage(_COMMANDS[subcommand], cfg)
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fairclust",
        description="fairness-aware neighborhood clustering")
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name, blurb in (
            ("generate", "synthesize a grouped embedding benchmark"),
            ("knn", "build the ordered neighborhood cache"),
            ("train", "train the cluster model"),
            ("cluster", "predict links and merge into a partition"),
            ("evaluate", "score the partition and write fairness reports"),
            ("gradcheck", "finite-difference gradient verification"),
            ("pipeline", "run every stage in order")):
        p = sub.add_parser(name, help=blurb)
        p.add_argument("--config", required=(name != "gradcheck"),
                       help="TOML or JSON configuration file")
        p.add_argument("--output-dir", help="override output.dir")
        p.add_argument("--seed", type=int,
                       help="override every configured seed (data, model, train)")
        p.add_argument("--threads", type=int, default=1,
                       help="worker threads for the neighborhood search")
        p.add_argument("--threshold", type=float,
                       help="override postprocess.threshold")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.config is not None:
            cfg = load_config(args.config)
        else:
            cfg = PipelineConfig(knn_n=8, model_k=2, data_path="unused",
                                 synthetic=None)
        if args.output_dir is not None:
            cfg.output_dir = args.output_dir
        if args.threshold is not None:
            cfg.threshold = args.threshold
        if args.seed is not None:
            cfg.train_cfg.seed = args.seed
            cfg.model_seed = args.seed
            cfg.gradcheck_seed = args.seed
            if cfg.synthetic is not None:
                cfg.synthetic = SyntheticSpec(cfg.synthetic.dim, args.seed,
                                              cfg.synthetic.groups)
        cfg.threads = max(1, args.threads)
        return run(args.subcommand, cfg)
    except FairclustError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())

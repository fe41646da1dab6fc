"""Embedding sets: container type, disk formats, synthesis, normalization.

Two formats are supported. The binary format is a little-endian layout::

    bytes 0..3    magic b"FCE1"
    bytes 4..11   u64 byte offset of the JSON metadata trailer, 0 if absent
    bytes 12..19  u64 N (rows)
    bytes 20..27  u64 d (columns)
    bytes 28..    N*d float32 values, row-major
    trailer       UTF-8 JSON object with optional "labels" and "groups"

The CSV format is one comma-separated row per line with an optional JSON
sidecar ``<name>.meta.json`` next to it. Vectors are stored as float32 on
disk and widened to float64 for all in-process numerics.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, DataError

MAGIC = b"FCE1"
_HEADER = struct.Struct("<4sQQQ")   # magic, trailer offset, N, d
HEADER_SIZE = _HEADER.size


@dataclass
class EmbeddingSet:
    """Row-major float64 matrix with optional identity labels and group ids.

    ``labels[i]`` is the ground-truth identity of row i; ``groups[i]`` is
    the sensitive-attribute value used for fairness reporting. Both are
    optional and, when present, must match the row count.
    """

    vectors: np.ndarray
    labels: Optional[np.ndarray] = None
    groups: Optional[np.ndarray] = None

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2:
            raise ValueError(f"vectors must be 2-D, got shape {self.vectors.shape}")
        if not np.isfinite(self.vectors).all():
            raise ValueError("vectors contain non-finite entries")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.count,):
                raise ValueError(
                    f"labels length {self.labels.shape} does not match {self.count} rows")
        if self.groups is not None:
            self.groups = np.asarray(self.groups)
            if self.groups.shape != (self.count,):
                raise ValueError(
                    f"groups length {self.groups.shape} does not match {self.count} rows")

    @property
    def count(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def equals(self, other: "EmbeddingSet") -> bool:
        if not np.array_equal(self.vectors, other.vectors):
            return False
        for a, b in ((self.labels, other.labels), (self.groups, other.groups)):
            if (a is None) != (b is None):
                return False
            if a is not None and not np.array_equal(a, b):
                return False
        return True


@dataclass(frozen=True)
class GroupSpec:
    """One demographic group of a synthetic benchmark."""

    group_id: str
    identities: int
    images: Tuple[int, int]        # inclusive per-identity image count range
    noise_scale: float


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a synthetic embedding benchmark with grouped identities."""

    dim: int
    seed: int
    groups: Tuple[GroupSpec, ...]

    def validate(self) -> None:
        if self.dim < 2:
            raise ConfigError(f"embedding dim must be >= 2, got {self.dim}")
        if not self.groups:
            raise ConfigError("at least one group is required")
        ids = [g.group_id for g in self.groups]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"group ids must be distinct, got {ids}")
        for g in self.groups:
            if g.identities < 1:
                raise ConfigError(f"group {g.group_id!r}: identities must be >= 1")
            lo, hi = g.images
            if lo < 1 or hi < lo:
                raise ConfigError(
                    f"group {g.group_id!r}: bad image count range {g.images}")
            if not g.noise_scale > 0:
                raise ConfigError(
                    f"group {g.group_id!r}: noise_scale must be > 0")


def generate_synthetic(spec: SyntheticSpec) -> EmbeddingSet:
    """Sample a grouped identity benchmark.

    Each identity gets a uniformly random unit center; each image is the
    center plus isotropic Gaussian noise whose expected norm equals the
    group's noise_scale (per-coordinate std noise_scale/sqrt(dim)), then
    L2-normalized. Identity labels are globally unique across groups.
    Fully deterministic for a given spec.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    blocks = []
    labels = []
    groups = []
    identity = 0
    sigma_div = math.sqrt(spec.dim)
    for g in spec.groups:
        lo, hi = g.images
        for _ in range(g.identities):
            center = rng.normal(size=spec.dim)
            center /= np.linalg.norm(center)
            count = int(rng.integers(lo, hi + 1))
            noise = rng.normal(size=(count, spec.dim)) * (g.noise_scale / sigma_div)
            rows = center[None, :] + noise
            rows /= np.linalg.norm(rows, axis=1, keepdims=True)
            blocks.append(rows)
            labels.extend([identity] * count)
            groups.extend([g.group_id] * count)
            identity += 1
    return EmbeddingSet(np.vstack(blocks), np.array(labels, dtype=np.int64),
                        np.array(groups))


def l2_normalize(dataset: EmbeddingSet) -> EmbeddingSet:
    """Return a copy whose rows have unit Euclidean norm."""
    norms = np.linalg.norm(dataset.vectors, axis=1)
    bad = np.flatnonzero(norms <= 0.0)
    if bad.size:
        raise DataError(f"cannot normalize all-zero row at index {bad[0]}")
    vectors = dataset.vectors / norms[:, None]
    labels = None if dataset.labels is None else dataset.labels.copy()
    groups = None if dataset.groups is None else dataset.groups.copy()
    return EmbeddingSet(vectors, labels, groups)


def _metadata_dict(dataset: EmbeddingSet) -> Optional[dict]:
    meta = {}
    if dataset.labels is not None:
        meta["labels"] = dataset.labels.tolist()
    if dataset.groups is not None:
        meta["groups"] = dataset.groups.tolist()
    return meta or None


def _apply_metadata(path, meta, count):
    if not isinstance(meta, dict):
        raise DataError("metadata must be a JSON object", path=str(path))
    labels = meta.get("labels")
    groups = meta.get("groups")
    if labels is not None and len(labels) != count:
        raise DataError(
            f"metadata lists {len(labels)} labels for {count} rows", path=str(path))
    if groups is not None and len(groups) != count:
        raise DataError(
            f"metadata lists {len(groups)} groups for {count} rows", path=str(path))
    labels_arr = None if labels is None else np.asarray(labels, dtype=np.int64)
    groups_arr = None if groups is None else np.asarray(groups)
    return labels_arr, groups_arr


def sidecar_path(path) -> Path:
    """Metadata sidecar location for a CSV file: ``<name>.meta.json``."""
    return Path(path).with_suffix(".meta.json")


def save_embeddings(dataset: EmbeddingSet, path, format: str = "binary") -> None:
    """Write an embedding set to disk in the requested format.

    Vectors are stored as float32; an empty set is rejected.
    """
    if dataset.count == 0:
        raise DataError("refusing to save an empty embedding set", path=str(path))
    if format == "binary":
        _save_binary(dataset, path)
    elif format == "csv":
        _save_csv(dataset, path)
    else:
        raise ConfigError(f"unknown embedding format {format!r}")


def load_embeddings(path, format: str = "binary") -> EmbeddingSet:
    """Read an embedding set written by :func:`save_embeddings`.

    Malformed input raises :class:`DataError` naming the byte offset
    (binary) or 1-based line (CSV) of the failure. Values are widened to
    float64.
    """
    if format == "binary":
        return _load_binary(path)
    if format == "csv":
        return _load_csv(path)
    raise ConfigError(f"unknown embedding format {format!r}")


def _save_binary(dataset: EmbeddingSet, path) -> None:
    payload = np.ascontiguousarray(dataset.vectors, dtype="<f4").tobytes()
    meta = _metadata_dict(dataset)
    trailer = b"" if meta is None else json.dumps(meta, sort_keys=True).encode("utf-8")
    trailer_offset = HEADER_SIZE + len(payload) if trailer else 0
    header = _HEADER.pack(MAGIC, trailer_offset, dataset.count, dataset.dim)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)
        fh.write(trailer)


def _load_binary(path) -> EmbeddingSet:
    raw = Path(path).read_bytes()
    if len(raw) < HEADER_SIZE:
        raise DataError(
            f"truncated header: need {HEADER_SIZE} bytes, file has {len(raw)}",
            path=str(path), offset=len(raw))
    magic, trailer_offset, count, dim = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise DataError(
            f"bad magic {magic!r}, expected {MAGIC!r}", path=str(path), offset=0)
    if count == 0 or dim == 0:
        raise DataError(f"empty embedding set ({count} x {dim})", path=str(path))
    need = HEADER_SIZE + count * dim * 4
    if len(raw) < need:
        raise DataError(
            f"truncated payload: expected {need} bytes for {count}x{dim} "
            f"float32 rows, file has {len(raw)}",
            path=str(path), offset=len(raw))
    flat = np.frombuffer(raw, dtype="<f4", count=count * dim, offset=HEADER_SIZE)
    vectors = flat.reshape(count, dim).astype(np.float64)
    finite = np.isfinite(vectors).ravel()
    if not finite.all():
        first = int(np.flatnonzero(~finite)[0])
        raise DataError(
            f"non-finite value in row {first // dim}",
            path=str(path), offset=HEADER_SIZE + first * 4)
    labels = groups = None
    if trailer_offset:
        if trailer_offset < need or trailer_offset >= len(raw):
            raise DataError(
                f"trailer offset {trailer_offset} outside file of {len(raw)} bytes",
                path=str(path), offset=trailer_offset)
        try:
            meta = json.loads(raw[trailer_offset:].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise DataError(f"unreadable metadata trailer: {exc}",
                            path=str(path), offset=trailer_offset) from exc
        labels, groups = _apply_metadata(path, meta, count)
    return EmbeddingSet(vectors, labels, groups)


def _save_csv(dataset: EmbeddingSet, path) -> None:
    f32 = dataset.vectors.astype(np.float32)
    with open(path, "w", encoding="utf-8") as fh:
        for row in f32:
            # %.9g round-trips float32 exactly
            fh.write(",".join(f"{v:.9g}" for v in row))
            fh.write("\n")
    meta = _metadata_dict(dataset)
    if meta is not None:
        sidecar_path(path).write_text(json.dumps(meta, sort_keys=True), "utf-8")


def _load_csv(path) -> EmbeddingSet:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines:
        raise DataError("empty embedding set (no rows)", path=str(path))
    rows = []
    width = None
    for lineno, line in enumerate(lines, start=1):
        parts = line.split(",")
        if width is None:
            width = len(parts)
        elif len(parts) != width:
            raise DataError(
                f"row has {len(parts)} columns, expected {width}",
                path=str(path), line=lineno)
        try:
            row = [float(p) for p in parts]
        except ValueError as exc:
            raise DataError(f"unparseable value: {exc}",
                            path=str(path), line=lineno) from exc
        if not all(math.isfinite(v) for v in row):
            raise DataError("non-finite value", path=str(path), line=lineno)
        rows.append(row)
    vectors = np.asarray(rows, dtype=np.float32).astype(np.float64)
    labels = groups = None
    side = sidecar_path(path)
    if side.exists():
        try:
            meta = json.loads(side.read_text("utf-8"))
        except json.JSONDecodeError as exc:
            raise DataError(f"unreadable metadata sidecar: {exc}",
                            path=str(side)) from exc
        labels, groups = _apply_metadata(side, meta, len(rows))
    return EmbeddingSet(vectors, labels, groups)

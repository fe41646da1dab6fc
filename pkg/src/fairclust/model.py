"""Rank-decomposed transformer over neighbor clusters.

The k token blocks of a decomposed cluster are encoded by two stacks of
pre-norm transformer blocks. Block 0 (the centroid's own sub-cluster)
goes through a plain self-attention stack; its final centroid-position
representation x_o conditions every other sub-cluster through a
cross-attention injection: each cross block first scores its tokens
against x_o through a single learned correlation matrix W, adds the
attention-weighted token mix back to every token, then runs the same
pre-norm self-attention block. A shared affine head plus sigmoid maps
every token to a same-identity probability.

All arithmetic is float64 numpy; the backward pass is the exact reverse
of the forward graph, derived by hand, so gradients match finite
differences to floating-point accuracy.

Checkpoints use a small binary container::

    bytes 0..3   magic b"FCPT"
    bytes 4..7   u32 format version
    bytes 8..15  u64 header length in bytes
    header       UTF-8 JSON: hyperparameters, tensor order, extra metadata
    tensors      float64 little-endian, concatenated in declaration order
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from .errors import ConfigError, DataError
from .neighborhood import SubClusterBatch

LN_EPS = 1e-5
_MAGIC = b"FCPT"
_VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


@dataclass(frozen=True)
class Hyper:
    """Architecture sizes. n = k*s tokens per cluster; d % n_head == 0."""

    d: int
    k: int
    s: int
    n_block: int = 2
    n_head: int = 4
    ff_dim: Optional[int] = None

    def __post_init__(self):
        if self.ff_dim is None:
            object.__setattr__(self, "ff_dim", 4 * self.d)
        if self.d < 1 or self.k < 1 or self.s < 1:
            raise ConfigError(f"bad hyper sizes d={self.d} k={self.k} s={self.s}")
        if self.n_block < 1 or self.n_head < 1:
            raise ConfigError(
                f"bad hyper depth n_block={self.n_block} n_head={self.n_head}")
        if self.d % self.n_head != 0:
            raise ConfigError(f"n_head={self.n_head} must divide d={self.d}")
        if self.ff_dim < 1:
            raise ConfigError(f"bad ff_dim={self.ff_dim}")

    @property
    def n(self) -> int:
        return self.k * self.s


def _block_entries(prefix: str, d: int, ff: int):
    return [
        (f"{prefix}.ln1_g", (d,)), (f"{prefix}.ln1_b", (d,)),
        (f"{prefix}.wq", (d, d)), (f"{prefix}.bq", (d,)),
        (f"{prefix}.wk", (d, d)), (f"{prefix}.bk", (d,)),
        (f"{prefix}.wv", (d, d)), (f"{prefix}.bv", (d,)),
        (f"{prefix}.wo", (d, d)), (f"{prefix}.bo", (d,)),
        (f"{prefix}.ln2_g", (d,)), (f"{prefix}.ln2_b", (d,)),
        (f"{prefix}.w1", (d, ff)), (f"{prefix}.b1", (ff,)),
        (f"{prefix}.w2", (ff, d)), (f"{prefix}.b2", (d,)),
    ]


def param_order(hyper: Hyper) -> List[Tuple[str, Tuple[int, ...]]]:
    """Declaration order of every parameter tensor: the single source of
    truth for initialization, checkpoints and optimizer iteration.

    The cross stack and W are declared even at k=1; they are simply dead
    paths there (zero gradient) so checkpoints stay layout-stable.
    """
    d, ff = hyper.d, hyper.ff_dim
    entries: List[Tuple[str, Tuple[int, ...]]] = [("rank_embed", (hyper.n, d))]
    for b in range(hyper.n_block):
        entries.extend(_block_entries(f"self{b}", d, ff))
    for b in range(hyper.n_block):
        entries.extend(_block_entries(f"cross{b}", d, ff))
    entries.append(("corr_w", (d, d)))
    entries.extend([("ln_f_g", (d,)), ("ln_f_b", (d,)),
                    ("head_w", (d,)), ("head_b", (1,))])
    return entries


@dataclass
class IntraformerParams:
    """All model tensors keyed by declaration name."""

    hyper: Hyper
    tensors: Dict[str, np.ndarray]

    def copy(self) -> "IntraformerParams":
        return IntraformerParams(self.hyper,
                                 {k: v.copy() for k, v in self.tensors.items()})


def init_params(hyper: Hyper, seed: int = 0) -> IntraformerParams:
    """Deterministic initialization.

    Projection matrices, feedforward weights, the head and the rank table
    draw from U(-1/sqrt(fan_in), 1/sqrt(fan_in)); W starts at identity so
    the initial cross scores are plain dot products against x_o; norms
    start at identity (gain 1, bias 0) and every bias at 0.
    """
    rng = np.random.default_rng(seed)
    tensors: Dict[str, np.ndarray] = {}
    for name, shape in param_order(hyper):
        leaf = name.rsplit(".", 1)[-1]
        if name == "corr_w":
            value = np.eye(hyper.d)
        elif leaf in ("ln1_g", "ln2_g") or name == "ln_f_g":
            value = np.ones(shape)
        elif leaf.startswith("b") or name in ("ln_f_b", "head_b"):
            value = np.zeros(shape)
        else:
            fan_in = shape[0] if len(shape) == 2 else hyper.d
            if name == "rank_embed":
                fan_in = hyper.d
            scale = 1.0 / np.sqrt(fan_in)
            value = rng.uniform(-scale, scale, size=shape)
        tensors[name] = np.ascontiguousarray(value, dtype=np.float64)
    return IntraformerParams(hyper, tensors)


# ---------------------------------------------------------------------------
# primitive layers (batched over all leading axes)
# ---------------------------------------------------------------------------


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softmax_last(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _ln_fwd(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xn = xc * inv
    return xn * g + b, (xn, inv, g)


def _ln_bwd(dout, cache):
    xn, inv, g = cache
    axes = tuple(range(dout.ndim - 1))
    dg = np.sum(dout * xn, axis=axes)
    db = np.sum(dout, axis=axes)
    dxn = dout * g
    dx = inv * (dxn - dxn.mean(axis=-1, keepdims=True)
                - xn * np.mean(dxn * xn, axis=-1, keepdims=True))
    return dx, dg, db


def _split_heads(x, n_head):
    b, s, d = x.shape
    return x.reshape(b, s, n_head, d // n_head).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, s, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, s, h * dh)


def _mha_fwd(x, t, prefix, n_head):
    q = x @ t[f"{prefix}.wq"] + t[f"{prefix}.bq"]
    k = x @ t[f"{prefix}.wk"] + t[f"{prefix}.bk"]
    v = x @ t[f"{prefix}.wv"] + t[f"{prefix}.bv"]
    qh, kh, vh = (_split_heads(a, n_head) for a in (q, k, v))
    scale = 1.0 / np.sqrt(qh.shape[-1])
    att = _softmax_last((qh @ kh.swapaxes(-1, -2)) * scale)
    merged = _merge_heads(att @ vh)
    out = merged @ t[f"{prefix}.wo"] + t[f"{prefix}.bo"]
    return out, (x, qh, kh, vh, att, merged, scale)


def _mha_bwd(dout, cache, t, prefix, grads):
    x, qh, kh, vh, att, merged, scale = cache
    b, s, d = x.shape
    n_head = att.shape[1]
    flat = lambda a: a.reshape(-1, a.shape[-1])
    grads[f"{prefix}.wo"] += flat(merged).T @ flat(dout)
    grads[f"{prefix}.bo"] += dout.sum(axis=(0, 1))
    dmerged = dout @ t[f"{prefix}.wo"].T
    dctx = _split_heads(dmerged, n_head)
    datt = dctx @ vh.swapaxes(-1, -2)
    dvh = att.swapaxes(-1, -2) @ dctx
    dscores = att * (datt - np.sum(datt * att, axis=-1, keepdims=True))
    dscores *= scale
    dqh = dscores @ kh
    dkh = dscores.swapaxes(-1, -2) @ qh
    dq, dk, dv = (_merge_heads(a) for a in (dqh, dkh, dvh))
    dx = np.zeros_like(x)
    for mat, dmat in (("wq", dq), ("wk", dk), ("wv", dv)):
        grads[f"{prefix}.{mat}"] += flat(x).T @ flat(dmat)
        grads[f"{prefix}.b{mat[1]}"] += dmat.sum(axis=(0, 1))
        dx += dmat @ t[f"{prefix}.{mat}"].T
    return dx


def _block_fwd(x, t, prefix, n_head):
    a1, c1 = _ln_fwd(x, t[f"{prefix}.ln1_g"], t[f"{prefix}.ln1_b"])
    attn, ca = _mha_fwd(a1, t, prefix, n_head)
    x1 = x + attn
    a2, c2 = _ln_fwd(x1, t[f"{prefix}.ln2_g"], t[f"{prefix}.ln2_b"])
    h = a2 @ t[f"{prefix}.w1"] + t[f"{prefix}.b1"]
    r = np.maximum(h, 0.0)
    out = x1 + r @ t[f"{prefix}.w2"] + t[f"{prefix}.b2"]
    return out, (c1, ca, c2, a2, h, r)


def _block_bwd(dout, cache, t, prefix, grads):
    c1, ca, c2, a2, h, r = cache
    mask = h > 0
    flat = lambda a: a.reshape(-1, a.shape[-1])
    grads[f"{prefix}.w2"] += flat(r).T @ flat(dout)
    grads[f"{prefix}.b2"] += dout.sum(axis=(0, 1))
    dh = (dout @ t[f"{prefix}.w2"].T) * mask
    grads[f"{prefix}.w1"] += flat(a2).T @ flat(dh)
    grads[f"{prefix}.b1"] += dh.sum(axis=(0, 1))
    da2 = dh @ t[f"{prefix}.w1"].T
    dx1_ln, dg2, db2 = _ln_bwd(da2, c2)
    grads[f"{prefix}.ln2_g"] += dg2
    grads[f"{prefix}.ln2_b"] += db2
    dx1 = dout + dx1_ln
    da1 = _mha_bwd(dx1, ca, t, prefix, grads)
    dx_ln, dg1, db1 = _ln_bwd(da1, c1)
    grads[f"{prefix}.ln1_g"] += dg1
    grads[f"{prefix}.ln1_b"] += db1
    return dx1 + dx_ln


def _catt_fwd(xo, tokens, w):
    """Cross-attention injection: score every token against x_o through W,
    add the attention-weighted token mix to every token."""
    u = xo @ w
    z = np.einsum("bd,bsd->bs", u, tokens)
    a = _softmax_last(z)
    h = np.einsum("bs,bsd->bd", a, tokens)
    return tokens + h[:, None, :], (xo, tokens, u, a)


def _catt_bwd(dout, cache, w, grads):
    xo, tokens, u, a = cache
    dt = dout.copy()
    dh = dout.sum(axis=1)
    da = np.einsum("bd,bsd->bs", dh, tokens)
    dt += a[:, :, None] * dh[:, None, :]
    dz = a * (da - np.sum(da * a, axis=-1, keepdims=True))
    du = np.einsum("bs,bsd->bd", dz, tokens)
    dt += dz[:, :, None] * u[:, None, :]
    grads["corr_w"] += xo.T @ du
    dxo = du @ w.T
    return dt, dxo


# ---------------------------------------------------------------------------
# full model
# ---------------------------------------------------------------------------


@dataclass
class ForwardTrace:
    """Every intermediate needed to run the exact backward pass."""

    params: IntraformerParams
    batch_size: int
    self_caches: list
    cross_caches: list
    ln_f_cache: tuple
    y: np.ndarray
    q: np.ndarray

    def iter_softmax_rows(self) -> Iterator[np.ndarray]:
        """Yield every stored softmax distribution as rows of a 2-D array
        (self/cross attention maps and cross-injection scores)."""
        for cache in self.self_caches:
            yield cache[1][4].reshape(-1, cache[1][4].shape[-1])
        for c_catt, c_blk in self.cross_caches:
            yield c_catt[3]
            yield c_blk[1][4].reshape(-1, c_blk[1][4].shape[-1])

    def iter_relu_inputs(self) -> Iterator[np.ndarray]:
        """Yield every cached feedforward pre-activation tensor."""
        for cache in self.self_caches:
            yield cache[4]
        for _, c_blk in self.cross_caches:
            yield c_blk[4]


def intraformer_forward_batch(tokens: np.ndarray, params: IntraformerParams):
    """Forward over a batch of decomposed clusters.

    tokens has shape (B, k, s, d) in rank order; returns per-member
    probabilities (B, n) plus the trace for the backward pass.
    """
    hyper = params.hyper
    t = params.tensors
    tokens = np.asarray(tokens, dtype=np.float64)
    expected = (hyper.k, hyper.s, hyper.d)
    if tokens.ndim != 4 or tokens.shape[1:] != expected:
        raise ValueError(
            f"token batch shape {tokens.shape} does not match hyper (B, {expected})")
    b, k, s, d = tokens.shape
    re = t["rank_embed"].reshape(k, s, d)

    h = tokens[:, 0] + re[0][None]
    self_caches = []
    for blk in range(hyper.n_block):
        h, cache = _block_fwd(h, t, f"self{blk}", hyper.n_head)
        self_caches.append(cache)
    xo = h[:, 0]

    cross_caches = []
    if k > 1:
        flat = (tokens[:, 1:] + re[1:][None]).reshape(b * (k - 1), s, d)
        xo_rep = np.repeat(xo, k - 1, axis=0)
        for blk in range(hyper.n_block):
            injected, c_catt = _catt_fwd(xo_rep, flat, t["corr_w"])
            flat, c_blk = _block_fwd(injected, t, f"cross{blk}", hyper.n_head)
            cross_caches.append((c_catt, c_blk))
        all_tokens = np.concatenate([h, flat.reshape(b, (k - 1) * s, d)], axis=1)
    else:
        all_tokens = h

    y, ln_f_cache = _ln_fwd(all_tokens, t["ln_f_g"], t["ln_f_b"])
    logits = y @ t["head_w"] + t["head_b"][0]
    q = _sigmoid(logits)
    trace = ForwardTrace(params, b, self_caches, cross_caches, ln_f_cache, y, q)
    return q, trace


def intraformer_forward(batch: SubClusterBatch, params: IntraformerParams):
    """Forward for a single decomposed cluster: probabilities (n,) in rank
    order plus the backward trace."""
    q, trace = intraformer_forward_batch(batch.sequences[None], params)
    return q[0], trace


def intraformer_backward(trace: ForwardTrace,
                         loss_grad: np.ndarray) -> Dict[str, np.ndarray]:
    """Exact gradients of the scalar loss with respect to every parameter.

    loss_grad is dL/dq with shape (n,) or (B, n) matching the trace;
    contributions are summed over the batch. Dead paths (the cross stack
    and W at k=1) come back as zeros.
    """
    params = trace.params
    hyper = params.hyper
    t = params.tensors
    k, s, d = hyper.k, hyper.s, hyper.d
    b = trace.batch_size
    dq = np.asarray(loss_grad, dtype=np.float64)
    if dq.ndim == 1:
        dq = dq[None]
    if dq.shape != trace.q.shape:
        raise ValueError(
            f"loss_grad shape {loss_grad.shape} does not match q {trace.q.shape}")

    grads = {name: np.zeros(shape) for name, shape in param_order(hyper)}
    q = trace.q
    dlogits = dq * q * (1.0 - q)
    grads["head_w"] += np.einsum("bn,bnd->d", dlogits, trace.y)
    grads["head_b"] += dlogits.sum()
    dy = dlogits[:, :, None] * t["head_w"][None, None, :]
    dall, dgf, dbf = _ln_bwd(dy, trace.ln_f_cache)
    grads["ln_f_g"] += dgf
    grads["ln_f_b"] += dbf

    dh = np.ascontiguousarray(dall[:, :s])
    if k > 1:
        dflat = np.ascontiguousarray(dall[:, s:]).reshape(b * (k - 1), s, d)
        dxo_rep = np.zeros((b * (k - 1), d))
        for blk in reversed(range(hyper.n_block)):
            c_catt, c_blk = trace.cross_caches[blk]
            dinjected = _block_bwd(dflat, c_blk, t, f"cross{blk}", grads)
            dflat, dxo = _catt_bwd(dinjected, c_catt, t["corr_w"], grads)
            dxo_rep += dxo
        grads["rank_embed"][s:] += dflat.reshape(b, (k - 1) * s, d).sum(axis=0)
        dh[:, 0] += dxo_rep.reshape(b, k - 1, d).sum(axis=1)
    for blk in reversed(range(hyper.n_block)):
        dh = _block_bwd(dh, trace.self_caches[blk], t, f"self{blk}", grads)
    grads["rank_embed"][:s] += dh.sum(axis=0)
    return grads


# ---------------------------------------------------------------------------
# standalone attention ops
# ---------------------------------------------------------------------------


def self_attention(tokens: np.ndarray, params: IntraformerParams,
                   block: str = "self0") -> np.ndarray:
    """Multi-head softmax attention of one block over a single sequence:
    projected queries/keys/values, attention-weighted V, output projection.
    No norms or residuals; exposed for direct verification."""
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim != 2 or tokens.shape[1] != params.hyper.d:
        raise ValueError(f"tokens shape {tokens.shape} does not match d={params.hyper.d}")
    out, _ = _mha_fwd(tokens[None], params.tensors, block, params.hyper.n_head)
    return out[0]


def cross_attention_scores(x_o: np.ndarray, subcluster: np.ndarray,
                           w: np.ndarray) -> np.ndarray:
    """Softmax attention of x_o over sub-cluster tokens through W:
    a_j = softmax_j(x_o W tokens_j^T)."""
    x_o = np.asarray(x_o, dtype=np.float64)
    subcluster = np.asarray(subcluster, dtype=np.float64)
    if x_o.ndim != 1 or subcluster.ndim != 2 or subcluster.shape[1] != x_o.shape[0]:
        raise ValueError(
            f"shape mismatch: x_o {x_o.shape} vs subcluster {subcluster.shape}")
    z = subcluster @ (x_o @ np.asarray(w, dtype=np.float64))
    return _softmax_last(z)


def cross_attention_feature(x_o: np.ndarray, subcluster: np.ndarray,
                            w: np.ndarray) -> np.ndarray:
    """Attention-weighted sub-cluster mix h = sum_j a_j tokens_j."""
    a = cross_attention_scores(x_o, subcluster, w)
    return a @ np.asarray(subcluster, dtype=np.float64)


def cross_transformer_forward(subcluster: np.ndarray, centroid: np.ndarray,
                              params: IntraformerParams,
                              block: str = "cross0") -> np.ndarray:
    """One cross block applied to a single sub-cluster: inject the
    centroid-conditioned context into every token, then run the block's
    pre-norm self-attention and feedforward with residuals."""
    subcluster = np.asarray(subcluster, dtype=np.float64)
    centroid = np.asarray(centroid, dtype=np.float64)
    injected, _ = _catt_fwd(centroid[None], subcluster[None],
                            params.tensors["corr_w"])
    out, _ = _block_fwd(injected, params.tensors, block, params.hyper.n_head)
    return out[0]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(params: IntraformerParams, path,
                    extra: Optional[dict] = None) -> None:
    """Write params to the FCPT container; float64 tensors round-trip
    bit-exactly."""
    order = param_order(params.hyper)
    header = {
        "hyper": asdict(params.hyper),
        "order": [[name, list(shape)] for name, shape in order],
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(_MAGIC, _VERSION, len(blob)))
        fh.write(blob)
        for name, _ in order:
            fh.write(np.ascontiguousarray(params.tensors[name], dtype="<f8").tobytes())


def read_checkpoint_meta(path) -> dict:
    """Header JSON of a checkpoint (hyper, tensor order, extra)."""
    from pathlib import Path

    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        raise DataError("truncated checkpoint header", path=str(path), offset=len(raw))
    magic, version, length = _PREFIX.unpack_from(raw, 0)
    if magic != _MAGIC:
        raise DataError(f"bad checkpoint magic {magic!r}", path=str(path), offset=0)
    if version != _VERSION:
        raise DataError(f"unsupported checkpoint version {version}", path=str(path))
    if len(raw) < _PREFIX.size + length:
        raise DataError("truncated checkpoint header JSON",
                        path=str(path), offset=len(raw))
    try:
        return json.loads(raw[_PREFIX.size:_PREFIX.size + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"unreadable checkpoint header: {exc}",
                        path=str(path)) from exc


def load_checkpoint(path) -> IntraformerParams:
    """Read a checkpoint written by :func:`save_checkpoint`."""
    from pathlib import Path

    header = read_checkpoint_meta(path)
    raw = Path(path).read_bytes()
    _, _, length = _PREFIX.unpack_from(raw, 0)
    hyper = Hyper(**header["hyper"])
    expected = param_order(hyper)
    stored = [(name, tuple(shape)) for name, shape in header["order"]]
    if stored != expected:
        raise DataError("checkpoint tensor order does not match its hyper",
                        path=str(path))
    offset = _PREFIX.size + length
    tensors = {}
    for name, shape in expected:
        size = int(np.prod(shape, dtype=np.int64)) * 8
        if offset + size > len(raw):
            raise DataError(f"truncated tensor data at {name}",
                            path=str(path), offset=offset)
        tensors[name] = np.frombuffer(
            raw, dtype="<f8", count=size // 8, offset=offset,
        ).reshape(shape).copy()
        offset += size
    if offset != len(raw):
        raise DataError(f"{len(raw) - offset} trailing bytes after tensors",
                        path=str(path), offset=offset)
    return IntraformerParams(hyper, tensors)

"""Two-branch model: per-hop transforms, layer attention, per-task heads.

All arithmetic is float64 numpy with hand-written reverse mode. Graphs in a
batch are stacked along the node axis; ``Batch.offsets`` marks where each
graph starts so pooling reduces per segment.

Parameter names::

    W{k}, b{k}         Voronoi per-hop transform (also used by the cell-type
                       branch when weights are shared)
    Wc{k}, bc{k}       cell-type per-hop transform (unshared only)
    Wz, bz / Wcz, bcz  combiners of the concatenated hops
    a                  layer-attention vector (attention fusion)
    Wf, bf             linear map after concatenation (concat fusion)
    {task}.W1 .. b3    3-layer MLP head per task
    slope_h, slope_z   PReLU slopes (prelu activation only)
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .cell_data.tables import TaskSpec
from .errors import BadMagic, ChecksumMismatch, DimMismatch, EmptyGraph, InvalidConfig, TruncatedFile, VersionMismatch

FUSIONS = ("attention", "sum", "concat", "voronoi", "celltype")
ACTIVATIONS = ("relu", "prelu", "identity")
POOLINGS = ("mean", "max", "sum")
ATTENTION_SLOPE = 0.3


@dataclass
class ModelConfig:
    n_features: int
    hidden_dim: int
    hops: int
    tasks: list
    shared: bool = True
    fusion: str = "attention"
    activation: str = "relu"
    pooling: str = "mean"
    dropout: float = 0.0

    def __post_init__(self):
        self.tasks = [t if isinstance(t, TaskSpec) else TaskSpec(**t) for t in self.tasks]
        if self.fusion not in FUSIONS:
            raise InvalidConfig(f"fusion must be one of {FUSIONS}")
        if self.activation not in ACTIVATIONS:
            raise InvalidConfig(f"activation must be one of {ACTIVATIONS}")
        if self.pooling not in POOLINGS:
            raise InvalidConfig(f"pooling must be one of {POOLINGS}")
        if not 0.0 <= self.dropout < 1.0:
            raise InvalidConfig("dropout must be in [0, 1)")
        if self.hops < 0:
            raise InvalidConfig("hops must be non-negative")

    @property
    def uses_voronoi(self):
        return self.fusion != "celltype"

    @property
    def uses_celltype(self):
        return self.fusion != "voronoi"

    def out_dim(self, task):
        return 2 if task.kind == "binary" else 1

    def to_dict(self):
        d = asdict(self)
        d["tasks"] = [asdict(t) for t in self.tasks]
        return d


def _glorot(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def branch_names(cfg, branch):
    """(per-hop weight names, per-hop bias names, combiner weight, combiner bias)."""
    own = branch == "voronoi" or cfg.shared
    W = [f"W{k}" if own else f"Wc{k}" for k in range(cfg.hops + 1)]
    b = [f"b{k}" if own else f"bc{k}" for k in range(cfg.hops + 1)]
    if branch == "voronoi":
        return W, b, "Wz", "bz"
    return W, b, "Wcz", "bcz"


def init_params(cfg: ModelConfig, rng):
    """Glorot-uniform weights, zero biases, in a fixed creation order."""
    F, D, K = cfg.n_features, cfg.hidden_dim, cfg.hops
    p = {}
    branches = [b for b, used in (("voronoi", cfg.uses_voronoi), ("celltype", cfg.uses_celltype)) if used]
    for branch in branches:
        W, b, Wz, bz = branch_names(cfg, branch)
        for k in range(K + 1):
            if W[k] not in p:
                p[W[k]] = _glorot(rng, F, D)
                p[b[k]] = np.zeros(D)
        p[Wz] = _glorot(rng, D * (K + 1), D)
        p[bz] = np.zeros(D)
    if cfg.fusion == "attention":
        p["a"] = _glorot(rng, D, 1)[:, 0]
    elif cfg.fusion == "concat":
        p["Wf"] = _glorot(rng, 2 * D, D)
        p["bf"] = np.zeros(D)
    if cfg.activation == "prelu":
        p["slope_h"] = np.full(1, 0.25)
        p["slope_z"] = np.full(1, 0.25)
    for task in cfg.tasks:
        C = cfg.out_dim(task)
        p[f"{task.name}.W1"], p[f"{task.name}.b1"] = _glorot(rng, D, D), np.zeros(D)
        p[f"{task.name}.W2"], p[f"{task.name}.b2"] = _glorot(rng, D, D), np.zeros(D)
        p[f"{task.name}.W3"], p[f"{task.name}.b3"] = _glorot(rng, D, C), np.zeros(C)
    return p


# activations ---------------------------------------------------------------

def activate(kind, x, slope=None):
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "prelu":
        return np.where(x > 0, x, slope[0] * x)
    return x


def activate_grad(kind, x, g, slope=None):
    """Returns (dL/dx, dL/dslope or None)."""
    if kind == "relu":
        return g * (x > 0), None
    if kind == "prelu":
        neg = x <= 0
        return np.where(neg, slope[0] * g, g), np.array([np.sum(g * x * neg)])
    return g, None


def leaky_relu(x, slope=ATTENTION_SLOPE):
    return np.where(x > 0, x, slope * x)


# batches -------------------------------------------------------------------

@dataclass
class Batch:
    voronoi_hops: list
    celltype_hops: list
    offsets: np.ndarray
    image_ids: list = field(default_factory=list)

    @property
    def n_graphs(self):
        return len(self.offsets) - 1

    @property
    def counts(self):
        return np.diff(self.offsets)

    @classmethod
    def from_features(cls, features):
        features = list(features)
        if not features:
            raise EmptyGraph("empty batch")
        K = features[0].K
        for pf in features:
            if pf.K != K or len(pf.voronoi_hops) != K + 1 or len(pf.celltype_hops) != K + 1:
                raise DimMismatch("all graphs in a batch need K+1 hop matrices with the same K")
        sizes = [pf.n for pf in features]
        offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)

        def stack(attr):
            return [np.concatenate([np.asarray(getattr(pf, attr)[k], dtype=np.float64) for pf in features])
                    for k in range(K + 1)]

        return cls(stack("voronoi_hops"), stack("celltype_hops"), offsets,
                   [getattr(pf, "image_id", "") for pf in features])


def pool(values, offsets, kind="mean"):
    """Per-graph reduction of node rows; returns (pooled, argmax rows or None)."""
    counts = np.diff(offsets)
    if len(counts) == 0 or (counts <= 0).any():
        raise EmptyGraph("cannot pool a graph with no nodes")
    starts = offsets[:-1]
    if kind == "max":
        pooled = np.maximum.reduceat(values, starts, axis=0)
        arg = np.stack([offsets[g] + values[offsets[g]:offsets[g + 1]].argmax(axis=0)
                        for g in range(len(counts))])
        return pooled, arg
    summed = np.add.reduceat(values, starts, axis=0)
    if kind == "sum":
        return summed, None
    return summed / counts[:, None], None


def pool_grad(g_pooled, offsets, kind="mean", arg=None):
    counts = np.diff(offsets)
    n, C = offsets[-1], g_pooled.shape[1]
    if kind == "max":
        out = np.zeros((n, C))
        cols = np.arange(C)
        for g in range(len(counts)):
            out[arg[g], cols] += g_pooled[g]
        return out
    scale = g_pooled if kind == "sum" else g_pooled / counts[:, None]
    return np.repeat(scale, counts, axis=0)


# forward -------------------------------------------------------------------

@dataclass
class BranchTrace:
    pre_h: np.ndarray
    H: np.ndarray
    mask: np.ndarray | None
    H_in: np.ndarray
    pre_z: np.ndarray
    Z: np.ndarray


@dataclass
class HeadTrace:
    a1: np.ndarray
    h1_in: np.ndarray
    m1: np.ndarray | None
    a2: np.ndarray
    h2_in: np.ndarray
    m2: np.ndarray | None
    P: np.ndarray
    pooled: np.ndarray
    arg: np.ndarray | None


@dataclass
class ForwardTrace:
    batch: Batch
    voronoi: BranchTrace | None
    celltype: BranchTrace | None
    fused: np.ndarray
    alpha_voronoi: np.ndarray | None = None
    alpha_celltype: np.ndarray | None = None
    scores: tuple | None = None
    heads: dict = field(default_factory=dict)

    @property
    def pooled(self):
        return {t: h.pooled for t, h in self.heads.items()}


def _dropout_mask(rng, shape, rate):
    return (rng.random(shape) >= rate) / (1.0 - rate)


def branch_forward(hops, Ws, bs, Wz, bz, activation="relu", dropout=0.0, rng=None, params=None):
    """H = act([X W0, A X W1, ...]), Z = act(H Wz); dropout on H when ``rng`` is given."""
    if len(hops) != len(Ws):
        raise DimMismatch(f"{len(hops)} hop matrices for {len(Ws)} weights")
    slope_h = slope_z = None
    if activation == "prelu":
        slope_h, slope_z = params["slope_h"], params["slope_z"]
    pre_h = np.concatenate([X @ W + b for X, W, b in zip(hops, Ws, bs)], axis=1)
    H = activate(activation, pre_h, slope_h)
    mask = None
    H_in = H
    if rng is not None and dropout > 0:
        mask = _dropout_mask(rng, H.shape, dropout)
        H_in = H * mask
    pre_z = H_in @ Wz + bz
    Z = activate(activation, pre_z, slope_z)
    return BranchTrace(pre_h, H, mask, H_in, pre_z, Z)


def attention_fuse(Z, Zc, a):
    """Per-node two-way softmax over LeakyReLU(a.z) scores of the two layers."""
    s_v, s_c = Z @ a, Zc @ a
    e_v, e_c = leaky_relu(s_v), leaky_relu(s_c)
    alpha_v = expit(e_v - e_c)
    alpha_c = expit(e_c - e_v)
    fused = alpha_v[:, None] * Z + alpha_c[:, None] * Zc
    return fused, alpha_v, alpha_c, (s_v, s_c)


def forward(params, cfg: ModelConfig, batch: Batch, train=False, rng=None):
    drop_rng = rng if (train and cfg.dropout > 0) else None
    traces = {}
    for branch, hops, used in (("voronoi", batch.voronoi_hops, cfg.uses_voronoi),
                               ("celltype", batch.celltype_hops, cfg.uses_celltype)):
        if not used:
            traces[branch] = None
            continue
        if len(hops) != cfg.hops + 1:
            raise DimMismatch(f"model expects K={cfg.hops}, features have K={len(hops) - 1}")
        W, b, Wz, bz = branch_names(cfg, branch)
        traces[branch] = branch_forward(hops, [params[k] for k in W], [params[k] for k in b],
                                        params[Wz], params[bz], cfg.activation, cfg.dropout,
                                        drop_rng, params)
    tv, tc = traces["voronoi"], traces["celltype"]
    trace = ForwardTrace(batch, tv, tc, None)
    if cfg.fusion == "attention":
        trace.fused, trace.alpha_voronoi, trace.alpha_celltype, trace.scores = attention_fuse(tv.Z, tc.Z, params["a"])
    elif cfg.fusion == "sum":
        trace.fused = tv.Z + tc.Z
    elif cfg.fusion == "concat":
        trace.fused = np.concatenate([tv.Z, tc.Z], axis=1) @ params["Wf"] + params["bf"]
    elif cfg.fusion == "voronoi":
        trace.fused = tv.Z
    else:
        trace.fused = tc.Z

    for task in cfg.tasks:
        pre = task.name + "."
        a1 = trace.fused @ params[pre + "W1"] + params[pre + "b1"]
        h1 = np.maximum(a1, 0.0)
        m1 = _dropout_mask(drop_rng, h1.shape, cfg.dropout) if drop_rng is not None else None
        h1_in = h1 if m1 is None else h1 * m1
        a2 = h1_in @ params[pre + "W2"] + params[pre + "b2"]
        h2 = np.maximum(a2, 0.0)
        m2 = _dropout_mask(drop_rng, h2.shape, cfg.dropout) if drop_rng is not None else None
        h2_in = h2 if m2 is None else h2 * m2
        P = h2_in @ params[pre + "W3"] + params[pre + "b3"]
        pooled, arg = pool(P, batch.offsets, cfg.pooling)
        trace.heads[task.name] = HeadTrace(a1, h1_in, m1, a2, h2_in, m2, P, pooled, arg)
    return trace


def full_forward(pf, params, cfg, mode="eval", rng=None):
    return forward(params, cfg, Batch.from_features([pf]), train=(mode == "train"), rng=rng)


# backward ------------------------------------------------------------------

def _add(grads, name, value):
    if name in grads:
        grads[name] = grads[name] + value
    else:
        grads[name] = value


def _branch_backward(params, cfg, branch, tr: BranchTrace, hops, dZ, grads):
    W, b, Wz, bz = branch_names(cfg, branch)
    slope_h = params.get("slope_h")
    slope_z = params.get("slope_z")
    d_pre_z, d_slope = activate_grad(cfg.activation, tr.pre_z, dZ, slope_z)
    if d_slope is not None:
        _add(grads, "slope_z", d_slope)
    _add(grads, Wz, tr.H_in.T @ d_pre_z)
    _add(grads, bz, d_pre_z.sum(axis=0))
    dH = d_pre_z @ params[Wz].T
    if tr.mask is not None:
        dH = dH * tr.mask
    d_pre_h, d_slope = activate_grad(cfg.activation, tr.pre_h, dH, slope_h)
    if d_slope is not None:
        _add(grads, "slope_h", d_slope)
    D = cfg.hidden_dim
    for k, X in enumerate(hops):
        g = d_pre_h[:, k * D:(k + 1) * D]
        _add(grads, W[k], X.T @ g)
        _add(grads, b[k], g.sum(axis=0))


def backward(params, cfg: ModelConfig, trace: ForwardTrace, d_pooled):
    """Gradients of a scalar loss given dL/d(pooled head output) per task."""
    grads = {}
    offsets = trace.batch.offsets
    d_fused = np.zeros_like(trace.fused)
    for task in cfg.tasks:
        if task.name not in d_pooled:
            continue
        pre = task.name + "."
        h = trace.heads[task.name]
        dP = pool_grad(np.asarray(d_pooled[task.name], dtype=np.float64), offsets, cfg.pooling, h.arg)
        _add(grads, pre + "W3", h.h2_in.T @ dP)
        _add(grads, pre + "b3", dP.sum(axis=0))
        dh2 = dP @ params[pre + "W3"].T
        if h.m2 is not None:
            dh2 = dh2 * h.m2
        da2 = dh2 * (h.a2 > 0)
        _add(grads, pre + "W2", h.h1_in.T @ da2)
        _add(grads, pre + "b2", da2.sum(axis=0))
        dh1 = da2 @ params[pre + "W2"].T
        if h.m1 is not None:
            dh1 = dh1 * h.m1
        da1 = dh1 * (h.a1 > 0)
        _add(grads, pre + "W1", trace.fused.T @ da1)
        _add(grads, pre + "b1", da1.sum(axis=0))
        d_fused += da1 @ params[pre + "W1"].T

    tv, tc = trace.voronoi, trace.celltype
    dZ = dZc = None
    if cfg.fusion == "attention":
        av, ac = trace.alpha_voronoi, trace.alpha_celltype
        s_v, s_c = trace.scores
        dZ = av[:, None] * d_fused
        dZc = ac[:, None] * d_fused
        d_alpha_v = np.sum((tv.Z - tc.Z) * d_fused, axis=1)
        d_gap = d_alpha_v * av * ac  # gap = e_v - e_c
        ds_v = d_gap * np.where(s_v > 0, 1.0, ATTENTION_SLOPE)
        ds_c = -d_gap * np.where(s_c > 0, 1.0, ATTENTION_SLOPE)
        a = params["a"]
        _add(grads, "a", tv.Z.T @ ds_v + tc.Z.T @ ds_c)
        dZ = dZ + ds_v[:, None] * a[None, :]
        dZc = dZc + ds_c[:, None] * a[None, :]
    elif cfg.fusion == "sum":
        dZ, dZc = d_fused, d_fused
    elif cfg.fusion == "concat":
        cat = np.concatenate([tv.Z, tc.Z], axis=1)
        _add(grads, "Wf", cat.T @ d_fused)
        _add(grads, "bf", d_fused.sum(axis=0))
        dcat = d_fused @ params["Wf"].T
        D = cfg.hidden_dim
        dZ, dZc = dcat[:, :D], dcat[:, D:]
    elif cfg.fusion == "voronoi":
        dZ = d_fused
    else:
        dZc = d_fused

    if dZ is not None:
        _branch_backward(params, cfg, "voronoi", tv, trace.batch.voronoi_hops, dZ, grads)
    if dZc is not None:
        _branch_backward(params, cfg, "celltype", tc, trace.batch.celltype_hops, dZc, grads)
    for name, value in params.items():
        if name not in grads:
            grads[name] = np.zeros_like(value)
    return grads


# checkpoints ---------------------------------------------------------------

CKPT_MAGIC = b"MEWC"
CKPT_VERSION = 1
_CKPT_HEAD = struct.Struct("<4sHHI")  # magic, version, reserved, json length


def save_checkpoint(path, cfg: ModelConfig, params, meta=None):
    """Layout: head | JSON header | float32 LE blocks in header order | sha256 of all prior bytes."""
    names = list(params)
    header = {
        "model": cfg.to_dict(),
        "params": [{"name": n, "shape": list(np.shape(params[n]))} for n in names],
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    body = bytearray(_CKPT_HEAD.pack(CKPT_MAGIC, CKPT_VERSION, 0, len(blob)))
    body += blob
    for n in names:
        body += np.ascontiguousarray(params[n], dtype="<f4").tobytes()
    digest = hashlib.sha256(body).digest()
    Path(path).write_bytes(bytes(body) + digest)
    return digest.hex()


def load_checkpoint(path):
    raw = Path(path).read_bytes()
    if len(raw) < _CKPT_HEAD.size + 32:
        raise TruncatedFile(f"{path}: too short for a checkpoint", path=str(path))
    magic, version, _, n_json = _CKPT_HEAD.unpack_from(raw)
    if magic != CKPT_MAGIC:
        raise BadMagic(f"{path}: not a checkpoint", path=str(path))
    if version != CKPT_VERSION:
        raise VersionMismatch(f"{path}: checkpoint version {version}", path=str(path))
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumMismatch(f"{path}: content hash does not match", path=str(path))
    header = json.loads(body[_CKPT_HEAD.size:_CKPT_HEAD.size + n_json])
    pos = _CKPT_HEAD.size + n_json
    params = {}
    for entry in header["params"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        if pos + 4 * count > len(body):
            raise TruncatedFile(f"{path}: parameter block {entry['name']} is cut short", path=str(path))
        arr = np.frombuffer(body, dtype="<f4", count=count, offset=pos).astype(np.float64)
        params[entry["name"]] = arr.reshape(entry["shape"])
        pos += 4 * count
    return ModelConfig(**header["model"]), params, header["meta"]

"""K-hop feature precomputation for both layers, and the ``.mewp`` cache.

Hop products are accumulated in float64 and stored as float32. The cell-type
layer is a union of cliques; with sampling on, each hop draws its own
Bernoulli-thinned copy of those cliques, keeping closer pairs more often.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import (
    BadMagic,
    CacheError,
    DimMismatch,
    IndexOutOfRange,
    MissingCache,
    TruncatedFile,
    VersionMismatch,
)
from .geometry import KEEP_FLOOR, EdgeList
from .multiplex import CellTypePairs, MultiplexGraph

MAGIC = b"MEWP"
FORMAT_VERSION = 1
HEADER = struct.Struct("<4sHHQIIQ")  # magic, version, flags, n, F, K, seed
FLAG_STOCHASTIC = 1
FLAG_RESAMPLE_EACH_EPOCH = 2


@dataclass
class SparseMatrix:
    """Square compressed-row matrix; column indices sorted within each row."""

    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray
    n: int

    @property
    def nnz(self):
        return len(self.data)

    def to_scipy(self):
        return sp.csr_matrix((self.data, self.indices, self.indptr), shape=(self.n, self.n))

    def to_dense(self):
        return self.to_scipy().toarray()


def normalize_adjacency(edges, n):
    """``D^-1/2 (A + I) D^-1/2`` for an undirected edge set on ``n`` nodes.

    ``edges`` is an :class:`EdgeList` or a pair of index arrays.
    """
    if isinstance(edges, EdgeList):
        i, j = edges.i, edges.j
    else:
        i, j = (np.asarray(a, dtype=np.int64) for a in edges)
    if len(i) and (min(i.min(), j.min()) < 0 or max(i.max(), j.max()) >= n):
        raise IndexOutOfRange(f"edge index outside [0, {n})", n=int(n))
    diag = np.arange(n, dtype=np.int64)
    keys = np.unique(np.concatenate([i * n + j, j * n + i, diag * n + diag]))
    rows, cols = keys // n, keys % n
    counts = np.bincount(rows, minlength=n)
    dinv = 1.0 / np.sqrt(counts.astype(np.float64))
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])
    return SparseMatrix(indptr, cols, dinv[rows] * dinv[cols], int(n))


def spmm(A: SparseMatrix, X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != A.n:
        raise DimMismatch(f"cannot multiply {A.n}x{A.n} by {X.shape}")
    return np.asarray(A.to_scipy() @ X)


def pair_keep_probabilities(pairs: CellTypePairs, i, j, d_max, floor=KEEP_FLOOR):
    if d_max <= 0:
        return np.ones(len(i))
    p = np.clip(pairs.distances(i, j) / d_max, 0.0, 1.0)
    return np.maximum(1.0 - p, floor)


def sample_celltype_adjacency(pairs: CellTypePairs, rng, keep_prob=None, d_max=None, floor=KEEP_FLOOR):
    """Keep each same-type pair with its own probability, then normalize.

    ``keep_prob`` may be supplied aligned with the pair order; otherwise it is
    derived block by block from centroid distances scaled by ``d_max``. One
    uniform draw is consumed per pair, in pair order.
    """
    n = len(pairs.type_codes)
    kept_i, kept_j = [], []
    offset = 0
    if keep_prob is None and d_max is None:
        d_max = pairs.max_distance()
    for i, j in pairs.blocks():
        if keep_prob is None:
            q = pair_keep_probabilities(pairs, i, j, d_max, floor)
        else:
            q = keep_prob[offset:offset + len(i)]
        offset += len(i)
        keep = rng.random(len(i)) < q
        kept_i.append(i[keep])
        kept_j.append(j[keep])
    if kept_i:
        edges = (np.concatenate(kept_i), np.concatenate(kept_j))
    else:
        edges = (np.zeros(0, np.int64), np.zeros(0, np.int64))
    return normalize_adjacency(edges, n)


def clique_mean(pairs: CellTypePairs, X):
    """Product with the normalized, unsampled cell-type adjacency: per-type means."""
    out = np.empty_like(X, dtype=np.float64)
    for idx in pairs.groups.values():
        out[idx] = X[idx].mean(axis=0)
    return out


@dataclass
class PrecomputedFeatures:
    voronoi_hops: list
    celltype_hops: list
    K: int
    seed: int
    stochastic: bool = True
    resample_each_epoch: bool = False
    image_id: str = field(default="")

    @property
    def n(self):
        return self.voronoi_hops[0].shape[0]

    @property
    def n_features(self):
        return self.voronoi_hops[0].shape[1]

    @property
    def flags(self):
        return (FLAG_STOCHASTIC if self.stochastic else 0) | (FLAG_RESAMPLE_EACH_EPOCH if self.resample_each_epoch else 0)


def celltype_hops(g: MultiplexGraph, K, rng, stochastic=True):
    X = np.asarray(g.features, dtype=np.float64)
    hops = [X]
    pairs = g.celltype
    if not stochastic:
        for _ in range(K):
            hops.append(clique_mean(pairs, hops[-1]))
        return hops
    d_max = pairs.max_distance() if pairs.count else 0.0
    keep_prob = None
    if pairs.materializable and pairs.count:
        i, j = pairs.materialize()
        keep_prob = pair_keep_probabilities(pairs, i, j, d_max)
    for _ in range(K):
        A = sample_celltype_adjacency(pairs, rng, keep_prob=keep_prob, d_max=d_max)
        hops.append(spmm(A, hops[-1]))
    return hops


def voronoi_hops(g: MultiplexGraph, K):
    A = normalize_adjacency(g.voronoi, g.n)
    hops = [np.asarray(g.features, dtype=np.float64)]
    for _ in range(K):
        hops.append(spmm(A, hops[-1]))
    return hops


def precompute_image(g: MultiplexGraph, K, seed, stochastic=True, resample_each_epoch=False):
    if K < 1:
        raise DimMismatch("K must be at least 1")
    rng = np.random.default_rng(seed)
    return PrecomputedFeatures(
        voronoi_hops=voronoi_hops(g, K),
        celltype_hops=celltype_hops(g, K, rng, stochastic),
        K=int(K), seed=int(seed), stochastic=bool(stochastic),
        resample_each_epoch=bool(resample_each_epoch), image_id=g.image_id,
    )


def image_seed(base_seed, image_id):
    """Per-image 63-bit seed derived from the run seed and the image id."""
    ss = np.random.SeedSequence(entropy=int(base_seed), spawn_key=(zlib.crc32(str(image_id).encode()),))
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


def epoch_seed(seed, epoch):
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(epoch) + 1,))
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


def cache_nbytes(n, F, K):
    return HEADER.size + 2 * (K + 1) * n * F * 4


def cache_write(pf: PrecomputedFeatures, path):
    header = HEADER.pack(MAGIC, FORMAT_VERSION, pf.flags, pf.n, pf.n_features, pf.K, pf.seed)
    with open(path, "wb") as fh:
        fh.write(header)
        for M in list(pf.voronoi_hops) + list(pf.celltype_hops):
            fh.write(np.ascontiguousarray(M, dtype="<f4").tobytes())


def cache_read(path):
    raw = Path(path).read_bytes()
    if len(raw) < HEADER.size:
        raise TruncatedFile(f"{path}: header is incomplete", path=str(path))
    magic, version, flags, n, F, K, seed = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise BadMagic(f"{path}: not a precompute cache (magic {magic!r})", path=str(path))
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"{path}: format version {version}, expected {FORMAT_VERSION}", path=str(path))
    expected = cache_nbytes(n, F, K)
    if len(raw) < expected:
        raise TruncatedFile(f"{path}: {len(raw)} bytes, expected {expected}", path=str(path))
    if len(raw) > expected:
        raise CacheError(f"{path}: {len(raw) - expected} trailing bytes", path=str(path))
    mats = np.frombuffer(raw, dtype="<f4", offset=HEADER.size).reshape(2 * (K + 1), n, F)
    return PrecomputedFeatures(
        voronoi_hops=[m for m in mats[:K + 1]],
        celltype_hops=[m for m in mats[K + 1:]],
        K=K, seed=seed, stochastic=bool(flags & FLAG_STOCHASTIC),
        resample_each_epoch=bool(flags & FLAG_RESAMPLE_EACH_EPOCH),
        image_id=Path(path).stem,
    )


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_index(cache_dir, entries, meta):
    """``entries`` maps image_id to cache file name (relative to ``cache_dir``)."""
    cache_dir = Path(cache_dir)
    images = {iid: {"path": name, "sha256": file_sha256(cache_dir / name)} for iid, name in sorted(entries.items())}
    doc = {"format": "mewp-index", "version": FORMAT_VERSION, **meta, "images": images}
    (cache_dir / "index.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return doc


def read_index(cache_dir):
    path = Path(cache_dir) / "index.json"
    if not path.exists():
        raise MissingCache(f"no cache index at {path}", path=str(path))
    return json.loads(path.read_text())

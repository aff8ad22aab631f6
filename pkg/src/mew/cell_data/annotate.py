"""Cell-type fallbacks for tables without (complete) cell-type labels."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from ..errors import NoSeedLabels, TooFewCells
from .tables import CellTable, TypeCodebook


@dataclass
class KMeansResult:
    labels: np.ndarray
    centers: np.ndarray
    objective: list  # within-cluster sum of squares after each iteration
    iterations: int
    # column standardization applied before clustering, and the type-name prefix
    shift: np.ndarray | None = None
    scale: np.ndarray | None = None
    prefix: str = "K"

    def to_dict(self):
        n = self.centers.shape[1]
        return {"centers": self.centers.tolist(),
                "shift": (np.zeros(n) if self.shift is None else self.shift).tolist(),
                "scale": (np.ones(n) if self.scale is None else self.scale).tolist(),
                "prefix": self.prefix}


def assign_kmeans_types(table, model):
    """Type a new table with the nearest stored center (``KMeansResult.to_dict`` form)."""
    centers = np.asarray(model["centers"])
    X = (table.biomarkers - np.asarray(model["shift"])) / np.asarray(model["scale"])
    labels, _ = _assign(X, centers)
    return table.with_types([f"{model['prefix']}{c}" for c in labels])


def _kmeanspp(X, k, rng):
    n = len(X)
    centers = [int(rng.integers(n))]
    d2 = ((X - X[centers[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            c = int(rng.choice(n, p=d2 / total))
        else:
            # every remaining point coincides with a center
            c = int(rng.choice(np.setdiff1d(np.arange(n), centers)))
        centers.append(c)
        d2 = np.minimum(d2, ((X - X[c]) ** 2).sum(axis=1))
    return X[centers].copy()


def _assign(X, centers):
    d2 = (X * X).sum(1)[:, None] - 2 * X @ centers.T + (centers * centers).sum(1)[None, :]
    d2 = np.maximum(d2, 0.0)
    labels = d2.argmin(axis=1)
    return labels, float(d2[np.arange(len(X)), labels].sum())


def kmeans(X, k, seed=0, max_iter=100):
    """Lloyd iterations from a k-means++ start; stops once assignments are stable."""
    X = np.asarray(X, dtype=np.float64)
    if k < 1:
        raise ValueError("k must be positive")
    if len(X) < k:
        raise TooFewCells(f"{len(X)} cells cannot form {k} clusters", n=len(X), k=int(k))
    rng = np.random.default_rng(seed)
    centers = _kmeanspp(X, k, rng)
    labels, obj = _assign(X, centers)
    history = [obj]
    it = 0
    for it in range(1, max_iter + 1):
        for c in range(k):
            members = labels == c
            if members.any():
                centers[c] = X[members].mean(axis=0)
        new, obj = _assign(X, centers)
        history.append(obj)
        if np.array_equal(new, labels):
            break
        labels = new
    return KMeansResult(labels, centers, history, it)


def kmeans_celltype(tables, k, seed=0, max_iter=100, standardize=True, prefix="K"):
    """Cluster biomarker vectors pooled over all tables; cluster c becomes type ``K{c}``.

    ``standardize`` z-scores each biomarker column over the pooled cells first.
    Returns the relabelled tables and the :class:`KMeansResult`.
    """
    tables = list(tables)
    if k < 2:
        raise ValueError("k must be at least 2")
    X = np.concatenate([t.biomarkers for t in tables]) if tables else np.zeros((0, 1))
    if len(X) < k:
        raise TooFewCells(f"{len(X)} cells cannot form {k} clusters", n=len(X), k=int(k))
    mean, std = np.zeros(X.shape[1]), np.ones(X.shape[1])
    if standardize:
        mean, std = X.mean(axis=0), X.std(axis=0)
        std = np.where(std > 0, std, 1.0)
        X = (X - mean) / std
    result = kmeans(X, k, seed, max_iter)
    result.shift, result.scale, result.prefix = mean, std, prefix
    out, start = [], 0
    for t in tables:
        labels = result.labels[start:start + t.n]
        out.append(t.with_types([f"{prefix}{c}" for c in labels]))
        start += t.n
    return out, result


def propagate_labels(table: CellTable, voronoi_edges, max_iter=1000, tol=1e-9):
    """Spread seed labels over the row-normalized Voronoi adjacency.

    Seed rows are clamped to their one-hot label every iteration. Each
    unlabeled cell takes the argmax of its propagated distribution, with ties
    going to the label seen first in the table. Cells unreachable from any
    seed end with an all-zero row and so take that first label.
    """
    types = table.cell_types
    if types is None or all(t is None for t in types):
        raise NoSeedLabels(f"image {table.image_id!r} has no labeled cells", image_id=table.image_id)
    if all(t is not None for t in types):
        return table
    book = TypeCodebook(t for t in types if t is not None)
    codes = book.encode(types)
    n, L = table.n, len(book.labels)
    seeds = codes >= 0
    Y = np.zeros((n, L))
    Y[np.flatnonzero(seeds), codes[seeds]] = 1.0
    i, j = voronoi_edges.i, voronoi_edges.j
    A = sp.coo_matrix((np.ones(2 * len(i)), (np.concatenate([i, j]), np.concatenate([j, i]))), shape=(n, n)).tocsr()
    deg = np.asarray(A.sum(axis=1)).ravel()
    P = sp.diags(np.where(deg > 0, 1.0 / np.maximum(deg, 1), 0.0)) @ A
    F = Y.copy()
    for _ in range(max_iter):
        new = P @ F
        new[seeds] = Y[seeds]
        delta = np.abs(new - F).max()
        F = new
        if delta < tol:
            break
    labels = book.labels
    filled = [types[r] if seeds[r] else labels[int(np.argmax(F[r]))] for r in range(n)]
    return table.with_types(filled)

"""Cell-type layer, multiplex assembly and homophily diagnostics."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from .cell_data.tables import CellTable, TypeCodebook
from .errors import EmptyEdgeList, UntypedNode
from .geometry import EdgeList

DEFAULT_PAIR_CAP = 2_000_000
BLOCK_PAIRS = 1 << 20


def _convex_hull(points):
    """Andrew's monotone chain; returns hull vertex indices."""
    order = np.lexsort((points[:, 1], points[:, 0]))
    if len(order) <= 2:
        return order
    pts = points.tolist()

    def cross(o, a, b):
        return (pts[a][0] - pts[o][0]) * (pts[b][1] - pts[o][1]) - (pts[a][1] - pts[o][1]) * (pts[b][0] - pts[o][0])

    lower, upper = [], []
    for k in order.tolist():
        while len(lower) >= 2 and cross(lower[-2], lower[-1], k) <= 0:
            lower.pop()
        lower.append(k)
    for k in reversed(order.tolist()):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], k) <= 0:
            upper.pop()
        upper.append(k)
    return np.array(lower[:-1] + upper[:-1], dtype=np.int64)


def point_set_diameter(points):
    points = np.asarray(points, dtype=np.float64)
    if len(points) < 2:
        return 0.0
    hull = points[_convex_hull(points)]
    diff = hull[:, None, :] - hull[None, :, :]
    return float(np.sqrt((diff ** 2).sum(-1).max()))


def _upper_pairs(m, r0, r1):
    """Pairs (a, b) with r0 <= a < r1 and a < b < m, row-major."""
    rows = np.arange(r0, r1, dtype=np.int64)
    counts = m - 1 - rows
    total = int(counts.sum())
    a = np.repeat(rows, counts)
    starts = np.cumsum(counts) - counts
    b = np.arange(total, dtype=np.int64) - np.repeat(starts, counts) + a + 1
    return a, b


class CellTypePairs:
    """Lazy enumeration of same-type node pairs ``i < j``.

    Pairs are produced type by type (ascending code), row-major within a type,
    so any consumer drawing one random number per pair sees a fixed order.
    """

    def __init__(self, type_codes, coords=None, cap=DEFAULT_PAIR_CAP):
        codes = np.asarray(type_codes, dtype=np.int64)
        bad = np.flatnonzero(codes < 0)
        if bad.size:
            raise UntypedNode(int(bad[0]))
        self.type_codes = codes
        self.coords = None if coords is None else np.asarray(coords, dtype=np.float64)
        self.cap = cap
        self.groups = {int(t): np.flatnonzero(codes == t) for t in np.unique(codes)}

    @property
    def per_type_counts(self):
        return {t: len(idx) * (len(idx) - 1) // 2 for t, idx in self.groups.items()}

    @property
    def count(self):
        return sum(self.per_type_counts.values())

    def __len__(self):
        return self.count

    def blocks(self, max_pairs=BLOCK_PAIRS):
        for t, idx in self.groups.items():
            m = len(idx)
            r0 = 0
            while r0 < m - 1:
                # grow the row range until the block holds ~max_pairs pairs
                r1, acc = r0, 0
                while r1 < m - 1 and (acc == 0 or acc + (m - 1 - r1) <= max_pairs):
                    acc += m - 1 - r1
                    r1 += 1
                a, b = _upper_pairs(m, r0, r1)
                yield idx[a], idx[b]
                r0 = r1

    def __iter__(self):
        for i, j in self.blocks():
            yield from zip(i.tolist(), j.tolist())

    @property
    def materializable(self):
        return self.count <= self.cap

    def materialize(self):
        if not self.materializable:
            raise MemoryError(f"{self.count} cell-type pairs exceed the cap of {self.cap}")
        parts = list(self.blocks())
        if not parts:
            return np.zeros(0, np.int64), np.zeros(0, np.int64)
        return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])

    def max_distance(self):
        """Largest same-type centroid distance (each type's diameter, via its hull)."""
        if self.coords is None:
            raise ValueError("pair distances need coordinates")
        return max((point_set_diameter(self.coords[idx]) for idx in self.groups.values() if len(idx) > 1),
                   default=0.0)

    def distances(self, i, j):
        return np.hypot(*(self.coords[i] - self.coords[j]).T)


def build_celltype_pairs(type_codes, coords=None, cap=DEFAULT_PAIR_CAP):
    return CellTypePairs(type_codes, coords, cap)


@dataclass
class MultiplexGraph:
    image_id: str
    features: np.ndarray
    coords: np.ndarray
    voronoi: EdgeList
    type_codes: np.ndarray
    celltype: CellTypePairs

    @property
    def n(self):
        return len(self.features)

    @property
    def n_features(self):
        return self.features.shape[1]


def assemble_multiplex(table: CellTable, voronoi: EdgeList, codebook: TypeCodebook | None = None,
                       scaler=None, cap=DEFAULT_PAIR_CAP):
    """Combine the Voronoi layer with the same-type layer on the table's node order.

    ``scaler`` is an optional ``(mean, std)`` pair applied to the features.
    Cell types only shape the second layer; they never enter the features.
    """
    if table.cell_types is None:
        raise UntypedNode(0)
    codebook = codebook if codebook is not None else TypeCodebook()
    codes = codebook.encode(table.cell_types)
    features = table.features()
    if scaler is not None:
        mean, std = scaler
        features = (features - mean) / std
    coords = table.coords
    return MultiplexGraph(table.image_id, features, coords, voronoi, codes,
                          CellTypePairs(codes, coords, cap))


def homophily_ratio(voronoi: EdgeList, type_codes):
    """Fraction of edges whose endpoints share a cell type."""
    if len(voronoi) == 0:
        raise EmptyEdgeList("homophily ratio of an empty edge list")
    codes = np.asarray(type_codes)
    return float(np.mean(codes[voronoi.i] == codes[voronoi.j]))


def graph_stats(g: MultiplexGraph, labels=None):
    hist = Counter(g.type_codes.tolist())
    names = labels or {}
    return {
        "image_id": g.image_id,
        "n": g.n,
        "voronoi_edges": len(g.voronoi),
        "celltype_pairs": g.celltype.count,
        "homophily_ratio": homophily_ratio(g.voronoi, g.type_codes) if len(g.voronoi) else None,
        "type_histogram": {str(names.get(k, k)): v for k, v in sorted(hist.items())},
    }

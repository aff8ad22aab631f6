"""Delaunay adjacency and inter-cell distances from 2D centroids.

The triangulation is incremental Bowyer-Watson. Instead of a finite
super-triangle, the hull is closed with "ghost" triangles that share one
symbolic vertex at infinity; a ghost's circumcircle degenerates to the open
half-plane outside its hull edge, so hull edges are never lost to a
super-triangle that is too small.

Orientation and in-circle tests use a floating-point filter with Shewchuk's
static error bounds and fall back to exact rational arithmetic when the
filter cannot certify the sign. A point exactly on a circumcircle is treated
as outside it, so co-circular configurations keep the triangle that already
exists: the result depends only on the (deterministic) insertion order.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import DegenerateInput, EmptyEdgeList

GHOST = -1
DUPLICATE_TOL = 1e-9
KEEP_FLOOR = 0.01

_EPS = 2.0 ** -53
_CCW_BOUND = (3.0 + 16.0 * _EPS) * _EPS
_ICC_BOUND = (10.0 + 96.0 * _EPS) * _EPS


def orient2d(ax, ay, bx, by, cx, cy):
    """Positive if a, b, c turn counter-clockwise, negative if clockwise, 0 if collinear."""
    detleft = (ax - cx) * (by - cy)
    detright = (ay - cy) * (bx - cx)
    det = detleft - detright
    if abs(det) > _CCW_BOUND * (abs(detleft) + abs(detright)):
        return det
    fa, fb, fc = (Fraction(ax), Fraction(ay)), (Fraction(bx), Fraction(by)), (Fraction(cx), Fraction(cy))
    exact = (fa[0] - fc[0]) * (fb[1] - fc[1]) - (fa[1] - fc[1]) * (fb[0] - fc[0])
    return float((exact > 0) - (exact < 0))


def incircle(ax, ay, bx, by, cx, cy, dx, dy):
    """Positive if d lies strictly inside the circumcircle of counter-clockwise a, b, c."""
    adx, ady = ax - dx, ay - dy
    bdx, bdy = bx - dx, by - dy
    cdx, cdy = cx - dx, cy - dy
    bdxcdy, cdxbdy = bdx * cdy, cdx * bdy
    cdxady, adxcdy = cdx * ady, adx * cdy
    adxbdy, bdxady = adx * bdy, bdx * ady
    alift = adx * adx + ady * ady
    blift = bdx * bdx + bdy * bdy
    clift = cdx * cdx + cdy * cdy
    det = alift * (bdxcdy - cdxbdy) + blift * (cdxady - adxcdy) + clift * (adxbdy - bdxady)
    permanent = ((abs(bdxcdy) + abs(cdxbdy)) * alift
                 + (abs(cdxady) + abs(adxcdy)) * blift
                 + (abs(adxbdy) + abs(bdxady)) * clift)
    if abs(det) > _ICC_BOUND * permanent:
        return det
    F = Fraction
    adx, ady = F(ax) - F(dx), F(ay) - F(dy)
    bdx, bdy = F(bx) - F(dx), F(by) - F(dy)
    cdx, cdy = F(cx) - F(dx), F(cy) - F(dy)
    exact = ((adx * adx + ady * ady) * (bdx * cdy - cdx * bdy)
             + (bdx * bdx + bdy * bdy) * (cdx * ady - adx * cdy)
             + (cdx * cdx + cdy * cdy) * (adx * bdy - bdx * ady))
    return float((exact > 0) - (exact < 0))


@dataclass
class EdgeList:
    """Undirected edges ``i < j`` with their Euclidean lengths."""

    i: np.ndarray
    j: np.ndarray
    d: np.ndarray

    def __post_init__(self):
        self.i = np.asarray(self.i, dtype=np.int64)
        self.j = np.asarray(self.j, dtype=np.int64)
        self.d = np.asarray(self.d, dtype=np.float64)

    def __len__(self):
        return len(self.i)

    @classmethod
    def from_pairs(cls, points, pairs):
        points = np.asarray(points, dtype=np.float64)
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        lo, hi = pairs.min(axis=1), pairs.max(axis=1)
        key = np.unique(lo * (len(points) + 1) + hi)
        i, j = key // (len(points) + 1), key % (len(points) + 1)
        d = np.hypot(*(points[i] - points[j]).T)
        return cls(i, j, d)

    def as_set(self):
        return set(zip(self.i.tolist(), self.j.tolist()))


@dataclass
class NormalizedDistances:
    p: np.ndarray
    d_max: float
    floor: float = KEEP_FLOOR

    @property
    def keep_prob(self):
        """Bernoulli retention probability: closer pairs are kept more often."""
        return np.maximum(1.0 - self.p, self.floor)


def normalize_distances(edges, d_max=None, floor=KEEP_FLOOR):
    """Scale distances into [0, 1] by the largest distance (or a supplied ``d_max``)."""
    d = edges.d if isinstance(edges, EdgeList) else np.asarray(edges, dtype=np.float64)
    if len(d) == 0:
        raise EmptyEdgeList("cannot normalize an empty edge list")
    if d_max is None:
        d_max = float(d.max())
    if d_max <= 0:
        return NormalizedDistances(np.zeros_like(d), float(d_max), floor)
    return NormalizedDistances(np.clip(d / d_max, 0.0, 1.0), float(d_max), floor)


def hilbert_order(points, bits=16):
    """Permutation that visits points along a Hilbert curve (locality for the walk)."""
    pts = np.asarray(points, dtype=np.float64)
    lo = pts.min(axis=0)
    span = max(float((pts.max(axis=0) - lo).max()), 1e-300)
    side = 1 << bits
    q = np.minimum(((pts - lo) / span * (side - 1)).astype(np.int64), side - 1)
    x, y = q[:, 0].copy(), q[:, 1].copy()
    d = np.zeros(len(pts), dtype=np.int64)
    s = side >> 1
    while s > 0:
        rx = (x & s) > 0
        ry = (y & s) > 0
        d += s * s * ((3 * rx.astype(np.int64)) ^ ry.astype(np.int64))
        flip = ~ry & rx
        x[flip] = side - 1 - x[flip]
        y[flip] = side - 1 - y[flip]
        swap = ~ry
        x[swap], y[swap] = y[swap], x[swap].copy()
        s >>= 1
    return np.argsort(d, kind="stable")


def find_duplicates(points, tol=DUPLICATE_TOL):
    """Index pairs of points closer than ``tol`` in both coordinates."""
    pts = np.asarray(points, dtype=np.float64)
    order = np.argsort(pts[:, 0], kind="stable")
    xs, ys = pts[order, 0], pts[order, 1]
    out = []
    k = 1
    while k < len(pts):
        close = xs[k:] - xs[:-k] <= tol
        if not close.any():
            break
        hit = np.flatnonzero(close & (np.abs(ys[k:] - ys[:-k]) <= tol))
        out.extend((int(order[h]), int(order[h + k])) for h in hit)
        k += 1
    return out


class _Triangulation:
    """Mutable triangle soup; vertex ``GHOST`` is always stored last in a ghost."""

    def __init__(self, xs, ys):
        self.xs = xs
        self.ys = ys
        self.tri = []
        self.nbr = []
        self.alive = []
        self._turn = 0

    def add(self, a, b, c):
        if a == GHOST:
            a, b, c = b, c, a
        elif b == GHOST:
            a, b, c = c, a, b
        self.tri.append([a, b, c])
        self.nbr.append([-1, -1, -1])
        self.alive.append(True)
        return len(self.tri) - 1

    def orient(self, a, b, p):
        xs, ys = self.xs, self.ys
        return orient2d(xs[a], ys[a], xs[b], ys[b], xs[p], ys[p])

    def conflict(self, t, p):
        a, b, c = self.tri[t]
        xs, ys = self.xs, self.ys
        if c == GHOST:
            o = self.orient(a, b, p)
            if o > 0:
                return True
            if o < 0:
                return False
            # collinear with the hull edge: conflict only strictly inside the segment
            ux, uy = xs[b] - xs[a], ys[b] - ys[a]
            return ((xs[p] - xs[a]) * ux + (ys[p] - ys[a]) * uy > 0
                    and (xs[p] - xs[b]) * -ux + (ys[p] - ys[b]) * -uy > 0)
        return incircle(xs[a], ys[a], xs[b], ys[b], xs[c], ys[c], xs[p], ys[p]) > 0

    def locate(self, p, start):
        t = start
        for _ in range(4 * len(self.tri) + 16):
            v = self.tri[t]
            if v[2] == GHOST:
                if self.conflict(t, p):
                    return t
                t = self.nbr[t][2]
                continue
            self._turn = (self._turn + 1) % 3
            for r in range(3):
                i = (self._turn + r) % 3
                if self.orient(v[(i + 1) % 3], v[(i + 2) % 3], p) < 0:
                    t = self.nbr[t][i]
                    break
            else:
                return t
        # walk failed to terminate; fall back to a scan
        for t, ok in enumerate(self.alive):
            if ok and self.conflict(t, p):
                return t
        raise DegenerateInput(f"could not locate point {p}")

    def insert(self, p, start):
        t0 = self.locate(p, start)
        cavity = {t0}
        rejected = set()
        stack = [t0]
        boundary = []
        while stack:
            t = stack.pop()
            for i, u in enumerate(self.nbr[t]):
                if u in cavity:
                    continue
                if u not in rejected and self.conflict(u, p):
                    cavity.add(u)
                    stack.append(u)
                else:
                    rejected.add(u)
                    boundary.append((t, i, u))
        for t in cavity:
            self.alive[t] = False
        edge_map = {}
        last = t0
        for t, i, u in boundary:
            v = self.tri[t]
            s, d = v[(i + 1) % 3], v[(i + 2) % 3]
            nt = self.add(s, d, p)
            nv = self.tri[nt]
            for k in range(3):
                x, y = nv[(k + 1) % 3], nv[(k + 2) % 3]
                if (x, y) == (s, d):
                    self.nbr[nt][k] = u
                    self.nbr[u][self.nbr[u].index(t)] = nt
                else:
                    edge_map[(x, y)] = (nt, k)
                    other = edge_map.get((y, x))
                    if other is not None:
                        self.nbr[nt][k] = other[0]
                        self.nbr[other[0]][other[1]] = nt
            if nv[2] != GHOST:
                last = nt
        return last

    def edges(self):
        out = set()
        for v, ok in zip(self.tri, self.alive):
            if ok and v[2] != GHOST:
                a, b, c = v
                out.add((min(a, b), max(a, b)))
                out.add((min(b, c), max(b, c)))
                out.add((min(a, c), max(a, c)))
        return out

    def triangles(self):
        return [tuple(v) for v, ok in zip(self.tri, self.alive) if ok and v[2] != GHOST]


def delaunay_triangles(points):
    """Counter-clockwise Delaunay triangles as index triples."""
    return _triangulate(points).triangles()


def _triangulate(points):
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise DegenerateInput("points must be an (n, 2) array")
    n = len(pts)
    if n < 3:
        raise DegenerateInput(f"need at least 3 points, got {n}")
    if not np.isfinite(pts).all():
        raise DegenerateInput("points must be finite")
    dups = find_duplicates(pts)
    if dups:
        a, b = dups[0]
        raise DegenerateInput(f"duplicate points {a} and {b}", pair=[a, b])

    order = hilbert_order(pts).tolist()
    xs, ys = pts[:, 0].tolist(), pts[:, 1].tolist()
    tr = _Triangulation(xs, ys)

    a, b = order[0], order[1]
    c = None
    for k in range(2, n):
        if tr.orient(a, b, order[k]) != 0:
            c = order[k]
            break
    if c is None:
        raise DegenerateInput("all points are collinear")
    if tr.orient(a, b, c) < 0:
        a, b = b, a
    t = tr.add(a, b, c)
    g_ab, g_bc, g_ca = tr.add(b, a, GHOST), tr.add(c, b, GHOST), tr.add(a, c, GHOST)
    tr.nbr[t] = [g_bc, g_ca, g_ab]
    # ghost (x, y, G): nbr[2] is the real triangle, nbr[0]/nbr[1] are the adjacent ghosts
    tr.nbr[g_ab] = [g_ca, g_bc, t]
    tr.nbr[g_bc] = [g_ab, g_ca, t]
    tr.nbr[g_ca] = [g_bc, g_ab, t]

    start = t
    seeded = {a, b, c}
    for p in order:
        if p not in seeded:
            start = tr.insert(p, start)
    return tr


def delaunay_adjacency(points):
    """Voronoi-neighbour edges (Delaunay edges) with centroid distances."""
    pts = np.asarray(points, dtype=np.float64)
    edges = sorted(_triangulate(pts).edges())
    return EdgeList.from_pairs(pts, edges)

"""Desk-scale synthetic cohorts with controllable spatial mixing.

Each image is a W x W square. A cell of type t lands uniformly with
probability lambda and otherwise near one of type t's patch centers, so
lambda=0 gives segregated blobs and lambda=1 full mixing. Labels come from
either the designated type's abundance or the spatial extent of its largest
same-type cluster.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from ..errors import InvalidConfig
from .tables import (
    SPLITS,
    CellTable,
    ColumnMapping,
    DatasetManifest,
    HazardLabel,
    ImageEntry,
    TaskSpec,
    write_cell_table,
)

MECHANISMS = ("composition", "geometry")


@dataclass
class SynthTask:
    name: str
    kind: str = "binary"
    mechanism: str = "composition"
    # composition: designated-type fraction; geometry: cluster radius as a fraction of W
    threshold: float = 0.25
    # hazard only
    base_rate: float = 0.1
    beta: float = 4.0
    censor_max: float = 30.0


@dataclass
class SynthConfig:
    n_images: int = 10
    cells_min: int = 100
    cells_max: int = 200
    n_types: int = 3
    type_names: list | None = None
    biomarker_means: list | None = None  # n_types rows of length Fb
    biomarker_dim: int = 4  # used only when means are generated
    type_separation: float = 2.0
    biomarker_std: float | list = 1.0
    size_mean: float = 50.0
    size_cv: float = 0.2
    mixing: float = 0.2
    mixing_jitter: float = 0.0
    mixing_levels: list | None = None  # per-image lambda drawn from these instead
    width: float = 500.0
    patches_per_type: int = 2
    patch_sigma: float = 0.08  # fraction of W
    designated_type: int = 0
    designated_fraction: tuple = (0.05, 0.45)
    tasks: list = field(default_factory=lambda: [SynthTask("composition")])
    groups: list | None = None  # [{id, split, n_images}]

    def __post_init__(self):
        self.tasks = [t if isinstance(t, SynthTask) else SynthTask(**t) for t in self.tasks]
        self.designated_fraction = tuple(self.designated_fraction)
        self.validate()

    def validate(self):
        if self.n_images < 1:
            raise InvalidConfig("n_images must be at least 1")
        if not 3 <= self.cells_min <= self.cells_max:
            raise InvalidConfig("need 3 <= cells_min <= cells_max")
        if self.n_types < 1:
            raise InvalidConfig("n_types must be at least 1")
        if self.type_names is not None and len(self.type_names) != self.n_types:
            raise InvalidConfig("type_names must have n_types entries")
        if self.biomarker_means is not None:
            means = np.asarray(self.biomarker_means, dtype=float)
            if means.ndim != 2 or means.shape[0] != self.n_types or means.shape[1] < 1:
                raise InvalidConfig("biomarker_means must be n_types x Fb")
        std = np.asarray(self.biomarker_std, dtype=float)
        if (std <= 0).any() or std.ndim > 1:
            raise InvalidConfig("biomarker_std must be positive")
        if std.ndim == 1 and len(std) != self.n_types:
            raise InvalidConfig("per-type biomarker_std needs n_types entries")
        if not 0.0 <= self.mixing <= 1.0:
            raise InvalidConfig("mixing must be in [0, 1]", mixing=self.mixing)
        if self.mixing_levels is not None and (
                not self.mixing_levels or any(not 0.0 <= v <= 1.0 for v in self.mixing_levels)):
            raise InvalidConfig("mixing_levels must be a non-empty list of values in [0, 1]")
        if self.mixing_jitter < 0 or self.width <= 0 or self.patch_sigma <= 0 or self.patches_per_type < 1:
            raise InvalidConfig("mixing_jitter, width, patch_sigma and patches_per_type must be positive")
        if self.size_mean <= 0 or self.size_cv < 0:
            raise InvalidConfig("size_mean must be positive and size_cv non-negative")
        if not 0 <= self.designated_type < self.n_types:
            raise InvalidConfig("designated_type out of range")
        lo, hi = self.designated_fraction
        if not 0.0 <= lo <= hi <= 1.0:
            raise InvalidConfig("designated_fraction must satisfy 0 <= lo <= hi <= 1")
        if not self.tasks:
            raise InvalidConfig("at least one task is required")
        names = [t.name for t in self.tasks]
        if len(set(names)) != len(names):
            raise InvalidConfig("task names must be unique")
        for t in self.tasks:
            if t.kind not in ("binary", "hazard"):
                raise InvalidConfig(f"task {t.name!r}: unknown kind {t.kind!r}")
            if t.kind == "binary":
                if t.mechanism not in MECHANISMS:
                    raise InvalidConfig(f"task {t.name!r}: mechanism must be one of {MECHANISMS}")
                if not 0.0 < t.threshold < 1.0:
                    raise InvalidConfig(f"task {t.name!r}: threshold must be in (0, 1)", threshold=t.threshold)
            elif t.base_rate <= 0 or t.censor_max <= 0:
                raise InvalidConfig(f"task {t.name!r}: base_rate and censor_max must be positive")
        if self.groups is not None:
            total = 0
            for g in self.groups:
                if g.get("split") not in SPLITS or int(g.get("n_images", 0)) < 1:
                    raise InvalidConfig(f"bad group {g!r}")
                total += int(g["n_images"])
            if total != self.n_images:
                raise InvalidConfig(f"groups hold {total} images but n_images is {self.n_images}")

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig(f"unknown synth config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise InvalidConfig(str(exc)) from None

    @classmethod
    def load(cls, path):
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise InvalidConfig(f"{path}: {exc}") from None

    def to_dict(self):
        d = asdict(self)
        d["designated_fraction"] = list(self.designated_fraction)
        return d

    @property
    def names(self):
        return list(self.type_names) if self.type_names else [f"T{t}" for t in range(self.n_types)]


def _type_means(cfg: SynthConfig, rng):
    if cfg.biomarker_means is not None:
        return np.asarray(cfg.biomarker_means, dtype=np.float64)
    return rng.normal(0.0, cfg.type_separation, size=(cfg.n_types, cfg.biomarker_dim))


def _group_plan(cfg: SynthConfig):
    """(group ids, split per group, group of each image)."""
    if cfg.groups is not None:
        gids = [str(g["id"]) for g in cfg.groups]
        splits = {str(g["id"]): g["split"] for g in cfg.groups}
        members = [str(g["id"]) for g in cfg.groups for _ in range(int(g["n_images"]))]
        return gids, splits, members
    # seven coverslips, four for training, one for validation, two for testing
    layout = ["train"] * 4 + ["val"] + ["test"] * 2
    gids = [f"cs{g}" for g in range(len(layout))]
    splits = dict(zip(gids, layout))
    members = [gids[i % len(gids)] for i in range(cfg.n_images)]
    return gids, splits, members


def _reflect(v, w):
    v = np.mod(v, 2 * w)
    return np.where(v > w, 2 * w - v, v)


def _type_counts(cfg: SynthConfig, n, rng):
    lo, hi = cfg.designated_fraction
    counts = np.zeros(cfg.n_types, dtype=np.int64)
    if cfg.n_types == 1:
        counts[0] = n
        return counts
    d = cfg.designated_type
    counts[d] = int(round(rng.uniform(lo, hi) * n))
    others = [t for t in range(cfg.n_types) if t != d]
    share = rng.dirichlet(np.full(len(others), 4.0))
    counts[others] = rng.multinomial(n - counts[d], share)
    return counts


def largest_cluster_radius(coords, codes, designated, edges=None):
    """Radius of gyration of the largest same-type connected component of one type.

    Connectivity follows Delaunay edges whose endpoints both carry
    ``designated``. Returns 0 when the type is absent.
    """
    from ..geometry import delaunay_adjacency

    coords = np.asarray(coords, dtype=np.float64)
    codes = np.asarray(codes)
    members = np.flatnonzero(codes == designated)
    if len(members) < 2:
        return 0.0
    if edges is None:
        edges = delaunay_adjacency(coords)
    keep = (codes[edges.i] == designated) & (codes[edges.j] == designated)
    n = len(coords)
    adj = coo_matrix((np.ones(int(keep.sum())), (edges.i[keep], edges.j[keep])), shape=(n, n))
    _, comp = connected_components(adj, directed=False)
    sizes = np.bincount(comp[members])
    best = members[comp[members] == np.argmax(sizes)]
    pts = coords[best]
    return float(np.sqrt(((pts - pts.mean(axis=0)) ** 2).sum(axis=1).mean()))


def _make_image(cfg: SynthConfig, image_id, means, rng):
    n = int(rng.integers(cfg.cells_min, cfg.cells_max + 1))
    counts = _type_counts(cfg, n, rng)
    codes = np.repeat(np.arange(cfg.n_types), counts)
    rng.shuffle(codes)
    base = cfg.mixing if cfg.mixing_levels is None else cfg.mixing_levels[int(rng.integers(len(cfg.mixing_levels)))]
    lam = float(np.clip(base + rng.uniform(-cfg.mixing_jitter, cfg.mixing_jitter), 0.0, 1.0))
    W = cfg.width
    centers = rng.uniform(0.0, W, size=(cfg.n_types, cfg.patches_per_type, 2))
    uniform = rng.random(n) < lam
    patch = rng.integers(0, cfg.patches_per_type, size=n)
    around = centers[codes, patch] + rng.normal(0.0, cfg.patch_sigma * W, size=(n, 2))
    xy = np.where(uniform[:, None], rng.uniform(0.0, W, size=(n, 2)), _reflect(around, W))
    std = np.asarray(cfg.biomarker_std, dtype=np.float64)
    scale = std[codes][:, None] if std.ndim == 1 else std
    markers = means[codes] + rng.normal(size=(n, means.shape[1])) * scale
    sigma = np.sqrt(np.log1p(cfg.size_cv ** 2))
    size = cfg.size_mean * np.exp(rng.normal(-0.5 * sigma ** 2, sigma, size=n))
    names = cfg.names
    types = np.empty(n, dtype=object)
    types[:] = [names[c] for c in codes]
    table = CellTable(
        image_id=image_id,
        cell_ids=np.arange(n, dtype=np.int64),
        x=xy[:, 0].copy(), y=xy[:, 1].copy(), size=size,
        biomarkers=markers,
        biomarker_names=tuple(f"b{j}" for j in range(means.shape[1])),
        cell_types=types,
    )
    return table, codes, lam


def designated_fraction_of(table: CellTable, type_name):
    return float(np.mean([t == type_name for t in table.cell_types]))


def _labels(cfg: SynthConfig, table, codes, rng):
    frac = float(np.mean(codes == cfg.designated_type))
    out = {}
    radius = None
    for t in cfg.tasks:
        if t.kind == "binary":
            if t.mechanism == "composition":
                out[t.name] = int(frac > t.threshold)
            else:
                if radius is None:
                    radius = largest_cluster_radius(table.coords, codes, cfg.designated_type)
                out[t.name] = int(radius > t.threshold * cfg.width)
        else:
            event_time = rng.exponential(1.0 / (t.base_rate * np.exp(t.beta * frac)))
            censor = rng.uniform(0.0, t.censor_max)
            time = max(min(event_time, censor), 1e-6)
            out[t.name] = HazardLabel(float(time), int(event_time <= censor))
    return out


def generate_synthetic(config: SynthConfig, seed):
    """Return ``(tables, manifest)``; identical for identical ``(config, seed)``.

    The manifest's image paths are ``cells/<image_id>.csv`` relative to
    wherever :func:`write_synthetic` puts it.
    """
    if not isinstance(config, SynthConfig):
        config = SynthConfig.from_dict(config)
    rng = np.random.default_rng(int(seed))
    means = _type_means(config, rng)
    _, splits, members = _group_plan(config)
    tables, entries, labels = [], [], {}
    width = len(str(config.n_images - 1))
    for i in range(config.n_images):
        image_id = f"img{i:0{width}d}"
        table, codes, _ = _make_image(config, image_id, means, rng)
        labels[image_id] = _labels(config, table, codes, rng)
        tables.append(table)
        entries.append(ImageEntry(image_id, f"cells/{image_id}.csv", members[i]))
    manifest = DatasetManifest(
        images=entries,
        splits=splits,
        tasks=[TaskSpec(t.name, t.kind) for t in config.tasks],
        labels=labels,
        columns=ColumnMapping(biomarkers=tables[0].biomarker_names),
    )
    return tables, manifest


def write_synthetic(tables, manifest: DatasetManifest, out_dir):
    out = Path(out_dir)
    (out / "cells").mkdir(parents=True, exist_ok=True)
    for table in tables:
        write_cell_table(table, out / "cells" / f"{table.image_id}.csv", manifest.columns)
    manifest.root = out
    manifest.save(out / "manifest.json")
    return out / "manifest.json"


def mean_homophily(config: SynthConfig, seed):
    """Mean Voronoi homophily ratio over the images a config generates."""
    from ..geometry import delaunay_adjacency
    from ..multiplex import homophily_ratio

    tables, _ = generate_synthetic(config, seed)
    vals = []
    for t in tables:
        codes = np.array([config.names.index(c) for c in t.cell_types])
        vals.append(homophily_ratio(delaunay_adjacency(t.coords), codes))
    return float(np.mean(vals))


def calibrate_mixing(config: SynthConfig, target, seeds=(0,), tol=1e-3, max_iter=30):
    """Bisect lambda so the mean homophily over ``seeds`` hits ``target``.

    Homophily falls as lambda grows, so the bracket [0, 1] is searched
    directly. Returns ``(lambda, achieved)``; the closest end is returned when
    the target lies outside what the config can produce.
    """
    def measure(lam):
        cfg = SynthConfig.from_dict({**config.to_dict(), "mixing": lam})
        return float(np.mean([mean_homophily(cfg, s) for s in seeds]))

    lo, hi = 0.0, 1.0
    h_lo, h_hi = measure(lo), measure(hi)
    if target >= h_lo:
        return lo, h_lo
    if target <= h_hi:
        return hi, h_hi
    best = (lo, h_lo)
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        h = measure(mid)
        if abs(h - target) < abs(best[1] - target):
            best = (mid, h)
        if abs(h - target) <= tol or hi - lo < 1e-4:
            break
        if h > target:
            lo = mid
        else:
            hi = mid
    return best


def preset(name):
    """Named configurations used by the examples and the acceptance suite."""
    if name not in PRESETS:
        raise InvalidConfig(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return SynthConfig.from_dict(json.loads(json.dumps(PRESETS[name])))


_SPLIT_300 = [
    {"id": "cs0", "split": "train", "n_images": 50},
    {"id": "cs1", "split": "train", "n_images": 50},
    {"id": "cs2", "split": "train", "n_images": 50},
    {"id": "cs3", "split": "train", "n_images": 50},
    {"id": "cs4", "split": "val", "n_images": 50},
    {"id": "cs5", "split": "test", "n_images": 25},
    {"id": "cs6", "split": "test", "n_images": 25},
]

# the designated type T3 sits halfway between T0 and T1, so its abundance is
# hard to read from mixed neighborhoods but exact from per-type means
_MIDPOINT_MEANS = [[0.5, 0.0], [-0.5, 0.0], [0.0, 0.5], [0.0, 0.0]]

PRESETS = {
    "homophily": {
        "n_images": 50, "cells_min": 400, "cells_max": 600, "n_types": 6,
        "biomarker_dim": 4, "mixing": 0.61, "designated_fraction": [0.1, 0.25],
        "tasks": [{"name": "composition", "threshold": 0.17}],
    },
    "composition": {
        "n_images": 300, "cells_min": 450, "cells_max": 550, "n_types": 4,
        "biomarker_means": _MIDPOINT_MEANS, "biomarker_std": 1.0,
        "mixing": 0.85, "designated_type": 3, "designated_fraction": [0.05, 0.45],
        "tasks": [{"name": "composition", "mechanism": "composition", "threshold": 0.25}],
        "groups": _SPLIT_300,
    },
    "geometry": {
        "n_images": 300, "cells_min": 450, "cells_max": 550, "n_types": 4,
        "biomarker_means": _MIDPOINT_MEANS, "biomarker_std": 1.0,
        "mixing_levels": [0.05, 1.0], "designated_type": 3, "designated_fraction": [0.12, 0.18],
        "patches_per_type": 1, "patch_sigma": 0.1,
        "tasks": [{"name": "geometry", "mechanism": "geometry", "threshold": 0.095}],
        "groups": _SPLIT_300,
    },
}

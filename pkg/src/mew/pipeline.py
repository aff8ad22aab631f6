"""Glue between manifests on disk and the per-image graph/precompute steps."""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cell_data.annotate import assign_kmeans_types, kmeans_celltype, propagate_labels
from .cell_data.tables import DatasetManifest, TypeCodebook
from .errors import ChecksumMismatch, InvalidConfig, MissingCache, NoSeedLabels, UntypedNode
from .geometry import delaunay_adjacency
from .multiplex import DEFAULT_PAIR_CAP, assemble_multiplex
from .precompute import (
    cache_read,
    cache_write,
    celltype_hops,
    epoch_seed,
    file_sha256,
    image_seed,
    precompute_image,
    read_index,
    write_index,
)


def worker_count(requested=None):
    env = os.environ.get("MEW_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise InvalidConfig(f"MEW_THREADS must be an integer, got {env!r}") from None
    return max(1, int(requested or 1))


def load_tables(manifest: DatasetManifest, image_ids=None):
    ids = image_ids if image_ids is not None else manifest.image_ids()
    return {iid: manifest.load_table(iid) for iid in ids}


def resolve_cell_types(tables, cell_typing=None, voronoi=None):
    """Fill in cell types according to ``cell_typing`` (given / kmeans / propagate).

    ``voronoi`` optionally maps image id to a precomputed edge list for
    propagation. With ``given``, partially typed images are completed by
    propagation and untyped images are an error. A stored k-means model
    (``cell_typing["model"]``) is applied as is instead of refitting.
    Returns the typed tables and the resolved typing settings, which include
    any fitted k-means model.
    """
    cell_typing = dict(cell_typing or {"method": "given"})
    method = cell_typing.get("method", "given")
    ids = list(tables)
    if method == "kmeans":
        if "model" in cell_typing:
            return {i: assign_kmeans_types(tables[i], cell_typing["model"]) for i in ids}, cell_typing
        k = int(cell_typing.get("k", 8))
        typed, result = kmeans_celltype([tables[i] for i in ids], k, seed=int(cell_typing.get("seed", 0)),
                                        max_iter=int(cell_typing.get("max_iter", 100)),
                                        standardize=bool(cell_typing.get("standardize", True)))
        cell_typing["model"] = result.to_dict()
        return dict(zip(ids, typed)), cell_typing
    if method not in ("given", "propagate"):
        raise InvalidConfig(f"unknown cell_typing method {method!r}")
    out = {}
    for iid, t in tables.items():
        if t.is_fully_typed():
            out[iid] = t
            continue
        if t.cell_types is None or all(c is None for c in t.cell_types):
            if method == "given":
                raise UntypedNode(0)
            raise NoSeedLabels(f"image {iid!r} has no labeled cells", image_id=iid)
        edges = voronoi[iid] if voronoi and iid in voronoi else delaunay_adjacency(t.coords)
        out[iid] = propagate_labels(t, edges)
    return out, cell_typing


def fit_scaler(tables):
    X = np.concatenate([t.features() for t in tables])
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    return mean, np.where(std > 0, std, 1.0)


@dataclass
class BuildSettings:
    hops: int
    seed: int
    stochastic: bool = True
    resample_each_epoch: bool = False
    standardize: bool = True
    pair_cap: int = DEFAULT_PAIR_CAP


def prepare(manifest: DatasetManifest, standardize=True, tables=None):
    """Typed tables, a dataset codebook, the train-split scaler and the typing settings."""
    tables = tables if tables is not None else load_tables(manifest)
    tables, typing = resolve_cell_types(tables, manifest.cell_typing)
    codebook = TypeCodebook().extend(tables[i] for i in manifest.image_ids() if i in tables)
    scaler = None
    if standardize:
        train = [tables[i] for i in manifest.image_ids("train") if i in tables] or list(tables.values())
        scaler = fit_scaler(train)
    return tables, codebook, scaler, typing


def build_graph(table, codebook, scaler=None, cap=DEFAULT_PAIR_CAP):
    return assemble_multiplex(table, delaunay_adjacency(table.coords), codebook, scaler, cap)


def _build_one(args):
    table, codebook, scaler, settings, path = args
    g = build_graph(table, codebook, scaler, settings.pair_cap)
    pf = precompute_image(g, settings.hops, image_seed(settings.seed, table.image_id),
                          settings.stochastic, settings.resample_each_epoch)
    cache_write(pf, path)
    return table.image_id, Path(path).name


def build_caches(manifest: DatasetManifest, settings: BuildSettings, cache_dir, workers=1, tables=None):
    """Precompute every image of the manifest into ``cache_dir`` and write the index."""
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    tables, codebook, scaler, typing = prepare(manifest, settings.standardize, tables)
    jobs = [(tables[i], codebook, scaler, settings, cache_dir / f"{i}.mewp") for i in manifest.image_ids()]
    workers = worker_count(workers)
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            entries = dict(pool.map(_build_one, jobs))
    else:
        entries = dict(map(_build_one, jobs))
    meta = {
        "hops": settings.hops,
        "seed": settings.seed,
        "stochastic": settings.stochastic,
        "resample_each_epoch": settings.resample_each_epoch,
        "standardize": settings.standardize,
        "scaler": None if scaler is None else {"mean": scaler[0].tolist(), "std": scaler[1].tolist()},
        "cell_types": codebook.labels,
        "cell_typing": typing,
        "columns": manifest.columns.to_dict(),
        "feature_names": list(next(iter(tables.values())).biomarker_names) + ["size"],
    }
    return write_index(cache_dir, entries, meta)


def load_caches(cache_dir, image_ids=None, verify=True):
    """Read cached features (checking their recorded hashes) into a dict by image id."""
    cache_dir = Path(cache_dir)
    index = read_index(cache_dir)
    images = index["images"]
    ids = image_ids if image_ids is not None else list(images)
    out = {}
    for iid in ids:
        if iid not in images:
            raise MissingCache(f"image {iid!r} is not in the cache index", image_id=iid)
        path = cache_dir / images[iid]["path"]
        if not path.exists():
            raise MissingCache(f"cache file {path} is missing", image_id=iid)
        if verify and file_sha256(path) != images[iid]["sha256"]:
            raise ChecksumMismatch(f"{path} does not match its recorded hash", image_id=iid)
        pf = cache_read(path)
        pf.image_id = iid
        out[iid] = pf
    return out, index


def scaler_from_index(index):
    s = index.get("scaler")
    return None if s is None else (np.asarray(s["mean"]), np.asarray(s["std"]))


def recompute_features(manifest, index, image_ids):
    """Rebuild graphs and K-hop features from the cell tables, as the cache would hold them."""
    tables, _ = resolve_cell_types(load_tables(manifest, image_ids), index.get("cell_typing", manifest.cell_typing))
    codebook = TypeCodebook(index.get("cell_types", []))
    scaler = scaler_from_index(index)
    out = {}
    for iid in image_ids:
        g = build_graph(tables[iid], codebook, scaler)
        pf = precompute_image(g, int(index["hops"]), image_seed(int(index["seed"]), iid),
                              bool(index["stochastic"]), bool(index.get("resample_each_epoch", False)))
        out[iid] = pf
    return out


class EpochResampler:
    """Fresh cell-type hops per epoch for training images; Voronoi hops come from the cache."""

    def __init__(self, manifest, index, features, image_ids):
        tables, _ = resolve_cell_types(load_tables(manifest, image_ids), index.get("cell_typing", manifest.cell_typing))
        codebook = TypeCodebook(index.get("cell_types", []))
        scaler = scaler_from_index(index)
        self.graphs = {iid: build_graph(tables[iid], codebook, scaler) for iid in image_ids}
        self.features = features
        self.seed = int(index["seed"])
        self.K = int(index["hops"])

    def __call__(self, image_id, epoch):
        base = self.features[image_id]
        g = self.graphs[image_id]
        rng = np.random.default_rng(epoch_seed(image_seed(self.seed, image_id), epoch))
        hops = celltype_hops(g, self.K, rng, stochastic=True)
        return type(base)(base.voronoi_hops, hops, base.K, base.seed, base.stochastic,
                          base.resample_each_epoch, image_id)

"""Command-line entry point: ``mew <command> ...``.

Every command prints one JSON document on stdout. Failures print
``{"error", "message", "details"}`` on stderr and exit with 2 for invalid
input and 3 for runtime failures.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .cell_data.synthetic import PRESETS, SynthConfig, generate_synthetic, preset, write_synthetic
from .cell_data.tables import ColumnMapping, DatasetManifest, TypeCodebook, load_cell_table
from .errors import InvalidConfig, MewError
from .model import FUSIONS, forward, load_checkpoint, save_checkpoint, Batch
from .multiplex import graph_stats
from .pipeline import (
    BuildSettings,
    EpochResampler,
    build_caches,
    build_graph,
    load_caches,
    load_tables,
    prepare,
    recompute_features,
    resolve_cell_types,
    scaler_from_index,
    worker_count,
)
from .precompute import file_sha256, image_seed, precompute_image
from .training import (
    LabelArrays,
    TrainConfig,
    graph_scores,
    mean_attention,
    task_metrics,
    train,
    evaluate_split,
    write_history,
)

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 2, 3


@dataclass
class RunManifest:
    command: str
    config: dict
    seeds: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    version: str = __version__

    @contextmanager
    def stage(self, name):
        start = time.perf_counter()
        try:
            yield
        finally:
            self.timings[name] = self.timings.get(name, 0.0) + time.perf_counter() - start

    def hash_input(self, path):
        path = Path(path)
        if path.is_file():
            self.inputs[str(path)] = file_sha256(path)

    def to_dict(self):
        return asdict(self)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")


def _read_json(path, error=InvalidConfig):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise error(f"{path}: {exc}") from None


def _emit(doc):
    sys.stdout.write(json.dumps(doc, indent=1, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(type(o).__name__)


def _load_manifest(path, run):
    manifest = DatasetManifest.load(path)
    run.hash_input(path)
    return manifest


# commands ------------------------------------------------------------------

def cmd_synth(args, run):
    if args.preset:
        cfg = preset(args.preset)
    elif args.config:
        cfg = SynthConfig.from_dict(_read_json(args.config))
        run.hash_input(args.config)
    else:
        cfg = SynthConfig()
    if args.n_images is not None:
        cfg = SynthConfig.from_dict({**cfg.to_dict(), "n_images": args.n_images, "groups": None})
    run.config = cfg.to_dict()
    run.seeds = {"seed": args.seed}
    with run.stage("generate"):
        tables, manifest = generate_synthetic(cfg, args.seed)
    with run.stage("write"):
        path = write_synthetic(tables, manifest, args.out)
    run.outputs = {"manifest": str(path)}
    run.save(Path(args.out) / "run.json")
    return {"manifest": str(path), "n_images": len(tables), "tasks": manifest.task_names}


def cmd_ingest(args, run):
    manifest = _load_manifest(args.manifest, run)
    images, errors = [], []
    for iid in manifest.image_ids():
        entry = {"image_id": iid, "split": manifest.split_of(iid)}
        try:
            t = manifest.load_table(iid)
            run.hash_input(manifest.table_path(iid))
        except MewError as exc:
            errors.append({"image_id": iid, **exc.to_json()})
            images.append(entry)
            continue
        except OSError as exc:
            errors.append({"image_id": iid, "error": type(exc).__name__, "message": str(exc), "details": {}})
            images.append(entry)
            continue
        untyped = 0 if t.cell_types is None else sum(c is None for c in t.cell_types)
        entry.update(n_cells=t.n, n_features=t.n_features, has_cell_types=t.has_types, untyped_cells=untyped,
                     missing_labels=[k for k in manifest.task_names if manifest.label(iid, k) is None])
        images.append(entry)
    feature_dims = {e["n_features"] for e in images if "n_features" in e}
    if len(feature_dims) > 1:
        errors.append({"error": "DimMismatch", "message": f"images disagree on feature count {sorted(feature_dims)}",
                       "details": {}})
    return {"ok": not errors, "n_images": len(images), "images": images, "errors": errors}, (
        EXIT_OK if not errors else EXIT_VALIDATION)


def cmd_build(args, run):
    manifest = _load_manifest(args.manifest, run)
    settings = BuildSettings(hops=args.hops, seed=args.seed, stochastic=not args.no_stochastic,
                             resample_each_epoch=args.resample_each_epoch, standardize=not args.no_standardize)
    if settings.hops < 1:
        raise InvalidConfig("--hops must be at least 1")
    workers = worker_count(args.workers)
    run.config = {**asdict(settings), "workers": workers}
    run.seeds = {"seed": args.seed}
    with run.stage("load"):
        tables = load_tables(manifest)
    for iid in tables:
        run.hash_input(manifest.table_path(iid))
    with run.stage("precompute"):
        index = build_caches(manifest, settings, args.cache, workers=workers, tables=tables)
    run.outputs = {"index": str(Path(args.cache) / "index.json"), "n_images": len(index["images"])}
    run.save(Path(args.cache) / "run.json")
    return {"cache": str(args.cache), "n_images": len(index["images"]), "hops": settings.hops}


def _train_config(args):
    d = _read_json(args.config) if args.config else {}
    return TrainConfig.from_dict(d)


def _fit(manifest, cache, config, run):
    with run.stage("load"):
        features, index = load_caches(cache, manifest.image_ids("train") + manifest.image_ids("val"))
    resampler = None
    if index.get("resample_each_epoch"):
        with run.stage("graphs"):
            resampler = EpochResampler(manifest, index, features, manifest.image_ids("train"))
    with run.stage("train"):
        result = train(manifest, features, config, resampler=resampler)
    meta = {
        "train_config": config.to_dict(),
        "best_epoch": result.best_epoch,
        "build": {k: v for k, v in index.items() if k != "images"},
    }
    return result, meta


def _write_model(result, meta, ckpt_path, history_path, run):
    with run.stage("write"):
        Path(ckpt_path).parent.mkdir(parents=True, exist_ok=True)
        Path(history_path).parent.mkdir(parents=True, exist_ok=True)
        digest = save_checkpoint(ckpt_path, result.model, result.params, meta)
        write_history(result.history, history_path)
    return digest


def cmd_train(args, run):
    manifest = _load_manifest(args.manifest, run)
    config = _train_config(args)
    if args.config:
        run.hash_input(args.config)
    run.hash_input(Path(args.cache) / "index.json")
    run.config = config.to_dict()
    run.seeds = {"seed": config.seed}
    result, meta = _fit(manifest, args.cache, config, run)
    out = Path(args.out)
    history = Path(args.history) if args.history else out.parent / "history.csv"
    digest = _write_model(result, meta, out, history, run)
    run.outputs = {"checkpoint": str(out), "sha256": digest, "history": str(history)}
    run.save(out.with_name(out.name + ".run.json"))
    last = result.history[result.best_epoch]
    return {"checkpoint": str(out), "history": str(history), "best_epoch": result.best_epoch,
            "best_val": {k: v for k, v in last.items() if k.startswith("val_")}, "sha256": digest}


def cmd_eval(args, run):
    manifest = _load_manifest(args.manifest, run)
    cfg, params, meta = load_checkpoint(args.ckpt)
    run.hash_input(args.ckpt)
    ids = manifest.image_ids(args.split)
    run.config = {"split": args.split, "recompute_on_the_fly": args.recompute_on_the_fly}
    if args.recompute_on_the_fly:
        index = meta["build"]
        with run.stage("recompute"):
            features = recompute_features(manifest, index, ids)
    else:
        with run.stage("load"):
            features, _ = load_caches(args.cache, ids)
    with run.stage("evaluate"):
        report = evaluate_split(params, cfg, manifest, features, args.split)
    doc = report.to_dict()
    doc["split"] = args.split
    if args.time:
        doc["timings"] = dict(run.timings)
    if args.scores:
        with open(args.scores, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["image_id", *cfg_task_names(cfg)])
            for iid, s in report.scores.items():
                w.writerow([iid, *(repr(float(s[k])) for k in cfg_task_names(cfg))])
    if args.out:
        Path(args.out).write_text(json.dumps(doc, indent=1, sort_keys=True, default=_json_default) + "\n")
    return doc


def cfg_task_names(cfg):
    return [t.name for t in cfg.tasks]


def _histogram_svg(values, path, xlabel, bins):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "mew"
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.hist(values, bins=bins, color="#4c72b0", edgecolor="white")
    ax.set_xlabel(xlabel)
    ax.set_ylabel("images")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def cmd_diagnose(args, run):
    manifest = _load_manifest(args.manifest, run)
    with run.stage("load"):
        tables, codebook, _, _ = prepare(manifest, standardize=False)
    per_image = []
    edge_dir = Path(args.edges) if args.edges else None
    if edge_dir:
        edge_dir.mkdir(parents=True, exist_ok=True)
    with run.stage("graphs"):
        for iid in manifest.image_ids():
            g = build_graph(tables[iid], codebook)
            stats = graph_stats(g, dict(enumerate(codebook.labels)))
            stats["split"] = manifest.split_of(iid)
            per_image.append(stats)
            if edge_dir:
                with open(edge_dir / f"{iid}.edges.csv", "w", newline="") as fh:
                    w = csv.writer(fh, lineterminator="\n")
                    w.writerow(["i", "j", "d"])
                    for a, b, d in zip(g.voronoi.i.tolist(), g.voronoi.j.tolist(), g.voronoi.d.tolist()):
                        w.writerow([a, b, repr(d)])
    ratios = np.array([s["homophily_ratio"] for s in per_image if s["homophily_ratio"] is not None])
    counts = np.array([s["n"] for s in per_image])
    edges = np.linspace(0.0, 1.0, 21)
    summary = {
        "n_images": len(per_image),
        "homophily_mean": float(ratios.mean()) if len(ratios) else None,
        "homophily_median": float(np.median(ratios)) if len(ratios) else None,
        "homophily_histogram": {"edges": edges.tolist(), "counts": np.histogram(ratios, edges)[0].tolist()},
        "cells_mean": float(counts.mean()),
        "cells_min": int(counts.min()),
        "cells_max": int(counts.max()),
        "cell_types": codebook.labels,
    }
    doc = {"dataset": summary, "images": per_image}
    if args.svg:
        out = Path(args.svg)
        out.mkdir(parents=True, exist_ok=True)
        with run.stage("plots"):
            _histogram_svg(ratios, out / "homophily.svg", "homophily ratio", edges)
            _histogram_svg(counts, out / "cell_counts.svg", "number of cells", 20)
        doc["plots"] = [str(out / "homophily.svg"), str(out / "cell_counts.svg")]
    return doc


def cmd_predict(args, run):
    cfg, params, meta = load_checkpoint(args.ckpt)
    run.hash_input(args.ckpt)
    run.hash_input(args.cells)
    build = meta["build"]
    columns = ColumnMapping.from_dict(build.get("columns"))
    with run.stage("load"):
        table = load_cell_table(args.cells, columns, image_id=args.image_id)
        tables, _ = resolve_cell_types({table.image_id: table}, build.get("cell_typing"))
        table = tables[table.image_id]
    seed = int(build["seed"])
    run.seeds = {"seed": seed, "image_seed": image_seed(seed, table.image_id)}
    with run.stage("precompute"):
        g = build_graph(table, TypeCodebook(build.get("cell_types", [])), scaler_from_index(build))
        pf = precompute_image(g, int(build["hops"]), image_seed(seed, table.image_id), bool(build["stochastic"]))
    with run.stage("forward"):
        trace = forward(params, cfg, Batch.from_features([pf]))
    scores = {k: float(v[0]) for k, v in graph_scores(trace, cfg).items()}
    doc = {"image_id": table.image_id, "n_cells": table.n, "scores": scores}
    att = mean_attention(trace)
    if att is not None:
        doc["attention"] = {"voronoi": att["voronoi"], "celltype": att["celltype"]}
    return doc


def cmd_ablate(args, run):
    manifest = _load_manifest(args.manifest, run)
    base = _train_config(args)
    variants = list(FUSIONS) if "all" in args.variant else list(dict.fromkeys(args.variant))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run.config = {"variants": variants, "train": base.to_dict()}
    run.seeds = {"seed": base.seed}
    results = {}
    for variant in variants:
        config = TrainConfig.from_dict({**base.to_dict(), "fusion": variant})
        result, meta = _fit(manifest, args.cache, config, run)
        ckpt = out / f"{variant}.mew"
        digest = _write_model(result, meta, ckpt, out / f"{variant}.history.csv", run)
        entry = {"checkpoint": str(ckpt), "sha256": digest, "best_epoch": result.best_epoch}
        if manifest.image_ids(args.split):
            with run.stage("evaluate"):
                features, _ = load_caches(args.cache, manifest.image_ids(args.split))
                report = evaluate_split(result.params, result.model, manifest, features, args.split)
            entry["metrics"] = report.metrics
            if report.attention:
                entry["attention"] = {k: report.attention[k] for k in ("voronoi", "celltype")}
        results[variant] = entry
    return {"split": args.split, "variants": results}


# parser --------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="mew", description="Multiplex spatial cell-graph pipeline")
    p.add_argument("--version", action="version", version=f"mew {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--config")
    s.add_argument("--preset", choices=sorted(PRESETS))
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n-images", type=int, help="override the image count (default coverslip split)")

    s = sub.add_parser("ingest", help="validate a manifest and its cell tables")
    s.add_argument("--manifest", required=True)

    s = sub.add_parser("build", help="precompute K-hop features into a cache")
    s.add_argument("--manifest", required=True)
    s.add_argument("--hops", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--cache", required=True)
    s.add_argument("--no-stochastic", action="store_true")
    s.add_argument("--resample-each-epoch", action="store_true")
    s.add_argument("--no-standardize", action="store_true")
    s.add_argument("--workers", type=int, default=1)

    for name in ("train", "ablate"):
        s = sub.add_parser(name, help="train a model" if name == "train" else "train fusion variants")
        s.add_argument("--manifest", required=True)
        s.add_argument("--cache", required=True)
        s.add_argument("--config")
        s.add_argument("--out", required=True)
        if name == "train":
            s.add_argument("--history")
        else:
            s.add_argument("--variant", nargs="+", required=True, choices=[*FUSIONS, "all"])
            s.add_argument("--split", default="test", choices=["train", "val", "test"])

    s = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    s.add_argument("--manifest", required=True)
    s.add_argument("--cache")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--split", default="test", choices=["train", "val", "test"])
    s.add_argument("--time", action="store_true")
    s.add_argument("--recompute-on-the-fly", action="store_true")
    s.add_argument("--scores", help="per-image score CSV")
    s.add_argument("--out", help="also write the report JSON here")

    s = sub.add_parser("diagnose", help="graph statistics and homophily")
    s.add_argument("--manifest", required=True)
    s.add_argument("--svg", help="directory for SVG histograms")
    s.add_argument("--edges", help="directory for per-image Voronoi edge CSVs")

    s = sub.add_parser("predict", help="score one cell table with a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--cells", required=True)
    s.add_argument("--image-id")
    return p


COMMANDS = {
    "synth": cmd_synth, "ingest": cmd_ingest, "build": cmd_build, "train": cmd_train, "eval": cmd_eval,
    "diagnose": cmd_diagnose, "predict": cmd_predict, "ablate": cmd_ablate,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    run = RunManifest(command=args.command, config={})
    try:
        if args.command == "eval" and not args.recompute_on_the_fly and not args.cache:
            raise InvalidConfig("eval needs --cache unless --recompute-on-the-fly is given")
        with run.stage("total"):
            result = COMMANDS[args.command](args, run)
    except MewError as exc:
        sys.stderr.write(json.dumps(exc.to_json(), default=_json_default) + "\n")
        return exc.exit_code
    except (FileNotFoundError, IsADirectoryError, NotADirectoryError) as exc:
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc),
                                     "details": {"path": exc.filename}}, default=_json_default) + "\n")
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001 - surface anything else as a runtime failure
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc), "details": {}}) + "\n")
        return EXIT_RUNTIME
    code = EXIT_OK
    if isinstance(result, tuple):
        result, code = result
    result["run"] = run.to_dict()
    _emit(result)
    return code


if __name__ == "__main__":
    raise SystemExit(main())

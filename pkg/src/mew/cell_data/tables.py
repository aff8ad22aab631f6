"""Cell tables, dataset manifests and task labels.

A cell table is one CSV per image with one row per segmented cell. Column
names are resolved through a :class:`ColumnMapping` so arbitrary biomarker
panels can be read without renaming files.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import pandas as pd

from ..errors import (
    DuplicateCellId,
    EmptyTable,
    InvalidManifest,
    InvalidValue,
    MissingColumn,
    NonFiniteValue,
)

SPLITS = ("train", "val", "test")
TASK_KINDS = ("binary", "hazard")


@dataclass(frozen=True)
class ColumnMapping:
    cell_id: str = "cell_id"
    x: str = "x"
    y: str = "y"
    size: str = "size"
    # None means every column not claimed by another field, in file order
    biomarkers: tuple[str, ...] | None = None
    cell_type: str | None = "cell_type"

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        if d.get("biomarkers") is not None:
            d["biomarkers"] = tuple(d["biomarkers"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidManifest(f"unknown column mapping keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        d = asdict(self)
        if d["biomarkers"] is not None:
            d["biomarkers"] = list(d["biomarkers"])
        return d


@dataclass
class CellTable:
    image_id: str
    cell_ids: np.ndarray
    x: np.ndarray
    y: np.ndarray
    size: np.ndarray
    biomarkers: np.ndarray
    biomarker_names: tuple[str, ...]
    # object array of str, None marks an unlabeled cell; None overall = column absent
    cell_types: np.ndarray | None = None

    @property
    def n(self):
        return len(self.cell_ids)

    @property
    def n_features(self):
        return self.biomarkers.shape[1] + 1

    @property
    def coords(self):
        return np.column_stack([self.x, self.y])

    @property
    def has_types(self):
        return self.cell_types is not None

    def is_fully_typed(self):
        return self.cell_types is not None and all(t is not None for t in self.cell_types)

    def features(self):
        """Node features: biomarkers followed by cell size."""
        return np.column_stack([self.biomarkers, self.size]).astype(np.float64)

    def with_types(self, cell_types):
        types = np.empty(self.n, dtype=object)
        types[:] = [None if t is None else str(t) for t in cell_types]
        return CellTable(self.image_id, self.cell_ids, self.x, self.y, self.size,
                         self.biomarkers, self.biomarker_names, types)

    def validate(self):
        if self.n == 0:
            raise EmptyTable(f"image {self.image_id!r} has no cells", image_id=self.image_id)
        seen = {}
        for row, cid in enumerate(self.cell_ids.tolist()):
            if cid in seen:
                raise DuplicateCellId(cid, row=row)
            seen[cid] = row
        for name, col in (("x", self.x), ("y", self.y), ("size", self.size)):
            bad = np.flatnonzero(~np.isfinite(col))
            if bad.size:
                raise NonFiniteValue(int(bad[0]), name)
        bad = np.flatnonzero(self.size <= 0)
        if bad.size:
            raise InvalidValue(f"size must be positive (row {int(bad[0])})", row=int(bad[0]), column="size")
        finite = np.isfinite(self.biomarkers)
        if not finite.all():
            row, col = np.argwhere(~finite)[0]
            raise NonFiniteValue(int(row), self.biomarker_names[col])
        return self


def _numeric_column(df, name):
    # float() is correctly rounded, so repr-written values read back bit-exact;
    # empty cells and literal "nan" are left for the finiteness check
    out = np.empty(len(df), dtype=np.float64)
    for row, v in enumerate(df[name].tolist()):
        if v is None or (isinstance(v, float) and math.isnan(v)):
            out[row] = np.nan
            continue
        try:
            out[row] = float(v)
        except ValueError:
            raise InvalidValue(f"non-numeric value in column {name!r} at row {row}",
                               row=row, column=name) from None
    return out


def load_cell_table(path, schema: ColumnMapping | None = None, image_id=None):
    """Read and validate one segmented-cell CSV.

    Rows are 0-indexed data rows (the header is not counted) in error reports.
    """
    schema = schema or ColumnMapping()
    path = Path(path)
    df = pd.read_csv(path, dtype=str, keep_default_na=False, na_values=[""])
    if image_id is None:
        image_id = path.stem
    for name in (schema.cell_id, schema.x, schema.y, schema.size):
        if name not in df.columns:
            raise MissingColumn(name, path=str(path))
    claimed = {schema.cell_id, schema.x, schema.y, schema.size, schema.cell_type}
    if schema.biomarkers is None:
        markers = tuple(c for c in df.columns if c not in claimed)
    else:
        markers = tuple(schema.biomarkers)
        for name in markers:
            if name not in df.columns:
                raise MissingColumn(name, path=str(path))
    if not markers:
        raise MissingColumn("<biomarkers>", path=str(path))
    if len(df) == 0:
        raise EmptyTable(f"{path} has no rows", image_id=image_id)

    ids = _numeric_column(df, schema.cell_id)
    bad = np.flatnonzero(~np.isfinite(ids) | (ids != np.round(ids)))
    if bad.size:
        raise InvalidValue(f"cell_id must be an integer (row {int(bad[0])})", row=int(bad[0]), column=schema.cell_id)

    cell_types = None
    if schema.cell_type is not None and schema.cell_type in df.columns:
        raw = df[schema.cell_type]
        cell_types = np.empty(len(df), dtype=object)
        cell_types[:] = [None if pd.isna(v) or str(v).strip() == "" else str(v) for v in raw]

    table = CellTable(
        image_id=str(image_id),
        cell_ids=ids.astype(np.int64),
        x=_numeric_column(df, schema.x),
        y=_numeric_column(df, schema.y),
        size=_numeric_column(df, schema.size),
        biomarkers=np.column_stack([_numeric_column(df, m) for m in markers]),
        biomarker_names=markers,
        cell_types=cell_types,
    )
    return table.validate()


def write_cell_table(table: CellTable, path, schema: ColumnMapping | None = None):
    """Write a table as CSV using ``repr`` floats so the bytes are reproducible."""
    schema = schema or ColumnMapping(biomarkers=table.biomarker_names)
    header = [schema.cell_id, schema.x, schema.y, schema.size, *table.biomarker_names]
    if table.cell_types is not None:
        header.append(schema.cell_type or "cell_type")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in range(table.n):
            row = [int(table.cell_ids[r]), repr(float(table.x[r])), repr(float(table.y[r])),
                   repr(float(table.size[r]))]
            row += [repr(float(v)) for v in table.biomarkers[r]]
            if table.cell_types is not None:
                t = table.cell_types[r]
                row.append("" if t is None else t)
            w.writerow(row)


@dataclass(frozen=True)
class TaskSpec:
    name: str
    kind: str

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise InvalidManifest(f"task {self.name!r}: kind must be one of {TASK_KINDS}")


@dataclass(frozen=True)
class HazardLabel:
    time: float
    event: int


@dataclass(frozen=True)
class ImageEntry:
    image_id: str
    path: str
    group_id: str


@dataclass
class DatasetManifest:
    images: list[ImageEntry]
    splits: dict[str, str]
    tasks: list[TaskSpec]
    labels: dict[str, dict]
    columns: ColumnMapping = field(default_factory=ColumnMapping)
    cell_typing: dict = field(default_factory=lambda: {"method": "given"})
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not self.tasks:
            raise InvalidManifest("at least one task is required")
        names = [t.name for t in self.tasks]
        if len(set(names)) != len(names):
            raise InvalidManifest(f"task names must be unique: {names}")
        ids = [e.image_id for e in self.images]
        if len(set(ids)) != len(ids):
            raise InvalidManifest("image ids must be unique")
        for split in self.splits.values():
            if split not in SPLITS:
                raise InvalidManifest(f"unknown split {split!r}")
        kinds = {t.name: t.kind for t in self.tasks}
        for e in self.images:
            if e.group_id not in self.splits:
                raise InvalidManifest(f"image {e.image_id!r}: group {e.group_id!r} has no split")
        for image_id, per_task in self.labels.items():
            if image_id not in set(ids):
                raise InvalidManifest(f"labels for unknown image {image_id!r}")
            for task, value in per_task.items():
                if task not in kinds:
                    raise InvalidManifest(f"labels for unknown task {task!r}")
                _check_label(image_id, task, kinds[task], value)
        return self

    @property
    def task_names(self):
        return [t.name for t in self.tasks]

    def split_of(self, image_id):
        return self.splits[self.entry(image_id).group_id]

    def entry(self, image_id):
        for e in self.images:
            if e.image_id == image_id:
                return e
        raise KeyError(image_id)

    def image_ids(self, split=None):
        return [e.image_id for e in self.images if split is None or self.splits[e.group_id] == split]

    def label(self, image_id, task):
        return self.labels.get(image_id, {}).get(task)

    def table_path(self, image_id):
        p = Path(self.entry(image_id).path)
        return p if p.is_absolute() else self.root / p

    def load_table(self, image_id):
        return load_cell_table(self.table_path(image_id), self.columns, image_id=image_id)

    def to_dict(self):
        labels = {}
        for image_id, per_task in self.labels.items():
            labels[image_id] = {k: (asdict(v) if isinstance(v, HazardLabel) else v) for k, v in per_task.items()}
        return {
            "images": [asdict(e) for e in self.images],
            "splits": dict(self.splits),
            "tasks": [asdict(t) for t in self.tasks],
            "labels": labels,
            "columns": self.columns.to_dict(),
            "cell_typing": dict(self.cell_typing),
        }

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def from_dict(cls, d, root="."):
        missing = [k for k in ("images", "splits", "tasks", "labels") if k not in d]
        if missing:
            raise InvalidManifest(f"manifest lacks keys {missing}")
        tasks = [TaskSpec(t["name"], t["kind"]) for t in d["tasks"]]
        kinds = {t.name: t.kind for t in tasks}
        labels = {}
        for image_id, per_task in d["labels"].items():
            parsed = {}
            for task, value in (per_task or {}).items():
                if value is None:
                    continue
                if kinds.get(task) == "hazard" and isinstance(value, dict):
                    value = HazardLabel(float(value["time"]), int(value["event"]))
                parsed[task] = value
            labels[image_id] = parsed
        try:
            images = [ImageEntry(str(e["image_id"]), str(e["path"]), str(e["group_id"])) for e in d["images"]]
        except KeyError as exc:
            raise InvalidManifest(f"image entry lacks key {exc}") from None
        return cls(
            images=images,
            splits={str(k): v for k, v in d["splits"].items()},
            tasks=tasks,
            labels=labels,
            columns=ColumnMapping.from_dict(d.get("columns")),
            cell_typing=d.get("cell_typing") or {"method": "given"},
            root=Path(root),
        )

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise InvalidManifest(f"{path}: {exc}") from None
        return cls.from_dict(d, root=path.parent)


def _check_label(image_id, task, kind, value):
    if kind == "binary":
        if value not in (0, 1) or isinstance(value, bool):
            raise InvalidManifest(f"{image_id}/{task}: binary label must be 0 or 1, got {value!r}")
    else:
        if not isinstance(value, HazardLabel):
            raise InvalidManifest(f"{image_id}/{task}: hazard label must be {{time, event}}")
        if not (math.isfinite(value.time) and value.time > 0) or value.event not in (0, 1):
            raise InvalidManifest(f"{image_id}/{task}: need time > 0 and event in {{0,1}}")


class TypeCodebook:
    """Dense integer codes for opaque cell-type labels, in first-appearance order."""

    def __init__(self, labels=()):
        self.codes = {}
        for t in labels:
            self.add(t)

    def add(self, label):
        if label is not None and label not in self.codes:
            self.codes[label] = len(self.codes)

    def extend(self, tables):
        for table in tables:
            if table.cell_types is not None:
                for t in table.cell_types:
                    self.add(t)
        return self

    @property
    def labels(self):
        return list(self.codes)

    def encode(self, cell_types):
        """-1 marks unlabeled cells."""
        out = np.full(len(cell_types), -1, dtype=np.int64)
        for i, t in enumerate(cell_types):
            if t is not None:
                self.add(t)
                out[i] = self.codes[t]
        return out

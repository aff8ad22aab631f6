"""Cell tables, manifests, synthetic cohorts and cell-type fallbacks."""

from .annotate import KMeansResult, kmeans, kmeans_celltype, propagate_labels
from .synthetic import SynthConfig, SynthTask, calibrate_mixing, generate_synthetic, preset, write_synthetic
from .tables import (
    CellTable,
    ColumnMapping,
    DatasetManifest,
    HazardLabel,
    ImageEntry,
    TaskSpec,
    TypeCodebook,
    load_cell_table,
    write_cell_table,
)

import os

# single-threaded BLAS so timings and bit-level comparisons are stable
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from mew.cell_data.tables import CellTable, TaskSpec  # noqa: E402


def make_table(n, rng, n_types=3, fb=2, image_id="img", types=None):
    types_arr = np.empty(n, dtype=object)
    if types is None:
        types = [f"T{c}" for c in rng.integers(0, n_types, n)]
    types_arr[:] = list(types)
    return CellTable(
        image_id=image_id,
        cell_ids=np.arange(n, dtype=np.int64),
        x=rng.uniform(0, 100, n),
        y=rng.uniform(0, 100, n),
        size=rng.uniform(20, 80, n),
        biomarkers=rng.normal(size=(n, fb)),
        biomarker_names=tuple(f"b{j}" for j in range(fb)),
        cell_types=types_arr,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


BOTH_TASKS = [TaskSpec("cls", "binary"), TaskSpec("surv", "hazard")]


# acceptance verdicts, echoed in the terminal summary so they show even when output is captured
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)

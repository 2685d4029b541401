import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from itebands.data import Dataset
from itebands.simulate import DgpConfig, draw_sample

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def random_dataset(rng: np.random.Generator, n: int, n_cells: int = 1) -> Dataset:
    """Small IV dataset where every cell has both instruments and both treatments."""
    while True:
        x = rng.integers(0, n_cells, n) if n_cells > 1 else None
        z = rng.integers(0, 2, n)
        d = (rng.random(n) < 0.3 + 0.4 * z).astype(int)
        y = np.round(rng.normal(2.0 + d, 1.0, n), 2)
        ds = Dataset.from_arrays(y, d, z, x)
        if all(not ds.cells[k].flags and min(min(r) for r in ds.cells[k].n_dzx) > 0 for k in ds.keys):
            return ds


@pytest.fixture(scope="session")
def small_sample():
    return draw_sample(DgpConfig(n=300, seed=11))


@pytest.fixture(scope="session")
def medium_sample():
    return draw_sample(DgpConfig(n=2000, seed=5))


ACCEPTANCE_LINES: list = []


@pytest.fixture
def acceptance_report():
    """Collects one ``PASS``/``FAIL`` line per acceptance criterion."""
    def record(label: str, ok: bool, detail: str) -> bool:
        ACCEPTANCE_LINES.append(f"{'PASS' if ok else 'FAIL'}  {label}: {detail}")
        print(ACCEPTANCE_LINES[-1])
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

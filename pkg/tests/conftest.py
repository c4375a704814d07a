import numpy as np
import pytest

from crbmsim import pipeline as pl
from crbmsim import schema as sc
from crbmsim import synthgen as sg
from crbmsim.crbm import CRBM, CrbmParams
from crbmsim.layout import VisibleLayout


@pytest.fixture(scope="session")
def schema():
    return sc.build_schema()


@pytest.fixture(scope="session")
def small_cohort(schema):
    events, sidecar = sg.generate_cohort(sg.SynthConfig(n_patients=240, seed=11))
    return events, sidecar, pl.bucket_events(events, schema)


@pytest.fixture(scope="session")
def small_dataset(small_cohort):
    return pl.assemble_dataset(small_cohort[2], pl.DatasetConfig(split_seed=5))


def random_params(layout, n_hidden, seed, scale=0.5):
    rng = np.random.default_rng(seed)
    n = layout.n_visible
    log_sigma = np.where(layout.is_continuous, rng.normal(0, 0.2, n), 0.0)
    return CrbmParams(rng.normal(0, scale, (n, n_hidden)), rng.normal(0, 0.5, n), log_sigma,
                      rng.normal(0, 0.5, n_hidden), np.zeros(n_hidden))


def mixed_model(seed=0, n_hidden=3):
    """6 visible units: 2 continuous, 1 binary, one 3-wide one-hot block."""
    layout = VisibleLayout([("c1", "continuous", 1), ("c2", "continuous", 1), ("b", "binary", 1),
                            ("o", "onehot", 3)])
    return CRBM(layout, random_params(layout, n_hidden, seed, scale=0.3))


def binary_model(n_visible=3, n_hidden=2, seed=0, scale=0.8):
    layout = VisibleLayout([(f"b{i}", "binary", 1) for i in range(n_visible)])
    return CRBM(layout, random_params(layout, n_hidden, seed, scale))


# acceptance results, printed once at the end of the session
CRITERIA: dict = {}


def record_criterion(number: int, ok: bool, detail: str):
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    CRITERIA[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[n])

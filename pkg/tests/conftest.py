import numpy as np
import pytest

from latentvi.models import LgParams, LinearGaussianModel
from latentvi.numkit import RngStream


@pytest.fixture
def rng():
    return RngStream(2024)


def make_lg(rng: RngStream, d: int = 3, k: int = 1):
    model = LinearGaussianModel(d, k)
    theta = model.pack(LgParams(rng.normal((d, k)), rng.normal(d), float(0.2 + rng.uniform())))
    return model, theta


@pytest.fixture
def lg31(rng):
    return make_lg(rng, 3, 1)


def assert_rel(actual, expected, tol):
    a, b = np.ravel(actual), np.ravel(expected)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    assert np.linalg.norm(a - b) / scale < tol, f"relative error {np.linalg.norm(a - b) / scale:.3e} >= {tol}"


# acceptance verdicts, filled by tests/test_acceptance.py and echoed after the run
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])

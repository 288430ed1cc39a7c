import numpy as np
import pytest
from hypothesis import settings

from fedsim import counterexample as ce

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")

_ACCEPTANCE = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" in report.nodeid and report.when == "call":
        num = int(report.nodeid.split("test_criterion_")[1].split("_")[0])
        _ACCEPTANCE[num] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_ACCEPTANCE):
        terminalreporter.write_line(f"criterion {num:2d}: {'PASS' if _ACCEPTANCE[num] == 'passed' else 'FAIL'}")


@pytest.fixture(scope="session")
def ridge():
    """The 5-device, block-4 tridiagonal problem with mu = 2e-4."""
    prob = ce.build(5, 4, 2e-4)
    return prob, ce.optimum(prob)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)

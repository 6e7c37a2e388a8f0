import numpy as np
import pytest
import torch

from priorhead.prior import SyntheticMorphableModel

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def morph():
    return SyntheticMorphableModel(0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance criteria report ---------------------------------------------------

ACCEPTANCE = {}


def record(number: int, passed: bool, detail: str):
    """Store the outcome of one acceptance criterion for the end-of-run summary."""
    ACCEPTANCE[number] = (bool(passed), detail)
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")

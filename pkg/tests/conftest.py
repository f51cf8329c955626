import numpy as np
import pytest

from flsim.data import synth_mixture
from flsim.model import ModelSpec


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_task():
    ds = synth_mixture(3, 4, 20, 3.0, np.random.default_rng(7))
    return ModelSpec((4, 6, 3)), ds


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.summary_lines():
        terminalreporter.write_line(line)

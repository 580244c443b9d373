import numpy as np
import pytest

from falldetect.data import preprocess, synth_dataset


@pytest.fixture(scope="session")
def small_instances():
    # 3 subjects x (2 ADL + 1 fall) -> 3 * (2*4 + 2) = 30 segments
    return synth_dataset(3, 2, 1, seed=11)


@pytest.fixture(scope="session")
def small_segments(small_instances):
    return preprocess(small_instances)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    lines = []
    for name, mod in list(sys.modules.items()):
        if name.rsplit(".", 1)[-1] == "test_acceptance":
            lines = getattr(mod, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)

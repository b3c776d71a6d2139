import sys
import numpy as np
import pytest
from hypothesis import settings

# compiled kernels make first calls slow; deadlines would flake
settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def sphere():
    from fastdipole.synthetic import sphere_cloud

    return sphere_cloud(2000)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)

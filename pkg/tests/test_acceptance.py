"""Acceptance suite: every headline criterion at its stated tolerance and time budget.

Each test prints one PASS/FAIL line, which is repeated in the terminal summary.
The end-to-end and shadow runs take roughly 5 and 12 minutes on one core.
"""

import pytest

from fastdipole import verify

RESULTS: list[str] = []

CRITERIA = [
    "bh-exact",
    "bh-accuracy",
    "bh-complexity",
    "adjoint",
    "psr",
    "mc",
    "gauss",
    "ablation",
    "quadrature",
    pytest.param("e2e", marks=pytest.mark.slow),
    pytest.param("shadow", marks=pytest.mark.slow),
]


@pytest.mark.parametrize("name", CRITERIA)
def test_criterion(name):
    res = verify.run_check(name)
    line = res.line()
    print(line)
    RESULTS.append(line)
    assert res.passed, line

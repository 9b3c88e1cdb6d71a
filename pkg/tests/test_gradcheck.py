"""Finite-difference checks for every layer and block, float64."""

import pytest

from mpcmnet.checks import GRAD_CASES, run_gradchecks


@pytest.mark.parametrize("case", list(GRAD_CASES))
def test_gradients(case):
    reports = run_gradchecks([case])
    assert reports
    for rep in reports:
        assert rep.passed, rep.line()


@pytest.mark.parametrize("seed", [1, 2])
def test_gradients_other_seeds(seed):
    failed = [r.line() for r in run_gradchecks(seed=seed) if not r.passed]
    assert not failed, failed

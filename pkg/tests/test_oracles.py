import numpy as np
import pytest

from mpcmnet.oracles import (
    OracleReport,
    adam_scalar_oracle,
    compare,
    direct_conv_oracle,
    finite_difference_gradient,
    sequential_scan_oracle,
    sla_oracle,
    softmax_attention_matrix,
    softmax_attention_oracle,
)


def test_softmax_attention_single_token_and_identical_keys():
    r = np.random.default_rng(0)
    v = r.standard_normal((1, 3))
    np.testing.assert_allclose(softmax_attention_oracle(r.standard_normal((1, 4)), r.standard_normal((1, 4)), v), v)
    k = np.tile(r.standard_normal((1, 4)), (5, 1))
    v = r.standard_normal((5, 3))
    out = softmax_attention_oracle(r.standard_normal((5, 4)), k, v)
    np.testing.assert_allclose(out, np.tile(v.mean(axis=0), (5, 1)), atol=1e-12)
    a = softmax_attention_matrix(r.standard_normal((6, 4)), r.standard_normal((6, 4)))
    assert np.abs(a.sum(axis=1) - 1).max() < 1e-12


def test_sla_oracle_single_token_and_weight_sums():
    r = np.random.default_rng(1)
    v = r.standard_normal((1, 3))
    np.testing.assert_allclose(sla_oracle(r.standard_normal((1, 4)), r.standard_normal((1, 4)), v), v, atol=1e-15)
    _, w = sla_oracle(r.standard_normal((16, 8)), r.standard_normal((16, 8)), r.standard_normal((16, 2)),
                      return_weights=True)
    assert np.abs(w.sum(axis=1) - 1).max() < 1e-12


def test_direct_conv_identity_and_ones():
    r = np.random.default_rng(2)
    x = r.standard_normal((1, 2, 5, 5))
    ident = np.zeros((2, 1, 3, 3))
    ident[:, 0, 1, 1] = 1
    np.testing.assert_array_equal(direct_conv_oracle(x, ident, np.zeros(2), padding=(1, 1), groups=2), x)
    c = 3
    out = direct_conv_oracle(np.full((1, c, 5, 5), 1.0), np.ones((1, c, 3, 3)), np.zeros(1), padding=(1, 1))
    assert np.all(out[0, 0, 1:-1, 1:-1] == 9 * c)


def test_scan_oracle_prefix_sum_and_memoryless():
    r = np.random.default_rng(3)
    u = r.standard_normal((1, 6, 2))
    ones = np.ones((1, 6, 1))
    # A = 0, delta = 1, B = C = 1, D = 0: the state is a running sum
    y = sequential_scan_oracle(u, np.ones_like(u), np.zeros((2, 1)), ones, ones, np.zeros(2))
    np.testing.assert_allclose(y, np.cumsum(u, axis=1), atol=1e-12)
    # very negative A forgets the past: y_t = delta * B * C * u_t
    y = sequential_scan_oracle(u, np.ones_like(u), np.full((2, 1), -800.0), ones, ones, np.zeros(2))
    np.testing.assert_allclose(y, u, atol=1e-12)


def test_finite_differences():
    x = np.array([0.5, -1.0, 2.0])
    np.testing.assert_allclose(finite_difference_gradient(lambda: x.sum(), x), np.ones(3), atol=1e-9)
    np.testing.assert_allclose(finite_difference_gradient(lambda: (x**2).sum(), x), 2 * x, atol=1e-7)
    with pytest.raises(ValueError):
        finite_difference_gradient(lambda: x * 2, x)


def test_compare_and_report_line():
    rep = compare("demo", np.array([1.0, 2.0]), np.array([1.0, 2.0 + 1e-12]), tol=1e-10)
    assert isinstance(rep, OracleReport) and rep.passed
    assert rep.line().startswith("check demo max_abs ") and rep.line().endswith("PASS")
    assert not compare("demo", [1.0], [2.0], tol=1e-3).passed
    with pytest.raises(ValueError):
        compare("demo", [1.0], [1.0, 2.0], tol=1)


def test_adam_oracle_first_step_moves_by_lr():
    # with bias correction the first update has magnitude lr for any nonzero gradient
    assert adam_scalar_oracle(1.0, [3.7], lr=0.01)[0] == pytest.approx(0.99, abs=1e-9)
    assert adam_scalar_oracle(1.0, [-0.2], lr=0.01)[0] == pytest.approx(1.01, abs=1e-7)

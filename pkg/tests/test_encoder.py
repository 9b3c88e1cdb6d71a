import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mpcmnet.checks import amplification_draws, amplification_holds
from mpcmnet.encoder import MEL, MPA, MPC, SLA, Encoder, ParAM, ParCM, ParSM, partial_sizes, sla, sla_weights, stage_shape
from mpcmnet.layers import phi
from mpcmnet.oracles import sla_oracle, softmax_attention_matrix
from mpcmnet.tensor import ShapeError, Tensor, precision


@pytest.fixture(autouse=True)
def f64():
    with precision("float64"):
        yield


def rng(seed=0):
    return np.random.default_rng(seed)


def test_partial_sizes():
    assert partial_sizes(8) == (2, 6)
    assert partial_sizes(10) == (3, 7)
    assert partial_sizes(64) == (16, 48)


@pytest.mark.parametrize("block", [MEL, ParCM, ParSM, MPC, MPA])
def test_blocks_preserve_shape(block):
    x = Tensor(rng(1).standard_normal((2, 8, 6, 5)))
    assert block(8, rng=rng())(x).shape == x.shape


def test_small_channel_counts_rejected():
    with pytest.raises(ShapeError):
        ParCM(4, rng=rng())
    with pytest.raises(ShapeError):
        SLA(6, heads=4, rng=rng())


def test_mel_on_tiny_extent_uses_zero_padding():
    # extents smaller than the widest strip still produce a well-defined output
    y = MEL(8, rng=rng())(Tensor(rng(2).standard_normal((2, 8, 2, 2))))
    assert y.shape == (2, 8, 2, 2) and np.all(np.isfinite(y.data))


def test_parsm_gate_in_unit_interval():
    m = ParSM(8, rng=rng())
    _, c2 = np.split(rng(3).standard_normal((2, 8, 5, 5)), [2], axis=1)
    g = m.gate(Tensor(c2)).data
    assert g.shape == (2, 1, 5, 5) and g.min() > 0 and g.max() < 1


def test_coordinate_attention_intermediates():
    from mpcmnet.encoder import CoordAttention

    ca = CoordAttention(6, rng=rng())
    x = Tensor(rng(4).standard_normal((2, 6, 5, 7)))
    it = ca(x, intermediates=True)
    assert it.x_w.shape == (2, 6, 5, 1) and it.x_h.shape == (2, 6, 1, 7)
    assert it.x_cat.shape == (2, 6, 12, 1)
    np.testing.assert_allclose(it.out.data, x.data * it.w_w.data * it.w_h.data)


@pytest.mark.parametrize("seed", range(10))
def test_sla_matches_literal_oracle(seed):
    r = rng(seed)
    n, d = 6 + seed, 4
    q, k, v = r.standard_normal((n, d)), r.standard_normal((n, d)), r.standard_normal((n, 3))
    got = sla(phi(Tensor(q[None])), phi(Tensor(k[None])), Tensor(v[None])).data[0]
    assert np.abs(got - sla_oracle(q, k, v)).max() < 1e-10


def test_sla_module_single_head_matches_oracle():
    m = SLA(4, heads=1, rng=rng(5))
    x = rng(6).standard_normal((1, 9, 4))
    q, k, v = x[0] @ m.wq.weight.data, x[0] @ m.wk.weight.data, x[0] @ m.wv.weight.data
    out, weights = sla_oracle(q, k, v, return_weights=True)
    np.testing.assert_allclose(m(Tensor(x)).data[0], out, atol=1e-10)
    it = m.intermediates(Tensor(x))
    np.testing.assert_allclose(it.weights[0], weights, atol=1e-12)
    np.testing.assert_allclose(it.out[0], out, atol=1e-10)


def test_sla_heads_are_independent():
    m = SLA(8, heads=2, rng=rng(7))
    x = Tensor(rng(8).standard_normal((2, 5, 8)))
    y = m(x).data
    # each head sees only its own channel slice of Q, K, V
    q = phi(Tensor(x.data @ m.wq.weight.data)).data
    k = phi(Tensor(x.data @ m.wk.weight.data)).data
    v = x.data @ m.wv.weight.data
    for h in range(2):
        sl = slice(4 * h, 4 * h + 4)
        ref = sla(Tensor(q[..., sl]), Tensor(k[..., sl]), Tensor(v[..., sl])).data
        np.testing.assert_allclose(y[..., sl], ref, atol=1e-12)


def test_sla_weight_sums_equal_one():
    r = rng(9)
    worst = 0.0
    for _ in range(1000):
        n = int(r.integers(2, 12))
        li = r.uniform(0.01, 3.0, (n, n))
        worst = max(worst, np.abs(sla_weights(li).sum(axis=-1) - 1).max())
    assert worst < 1e-12


def test_amplification_holds_for_sign_stable_pairs():
    cases, rejected = amplification_draws(1000, seed=10)
    assert all(amplification_holds(*c) for c in cases)
    assert rejected < 100


def test_amplification_can_fail_when_a_weight_crosses_zero():
    # key n's weight changes sign under the rescale: the ratio jumps across its pole
    li = np.array([0.3, 0.1])
    w = sla_weights(li)
    w_up = sla_weights(4.0 * li)
    assert w[1] > 0 > w_up[1]
    assert w_up[0] / w_up[1] < w[0] / w[1]


def test_softmax_matrix_rows_sum_to_one():
    r = rng(11)
    a = softmax_attention_matrix(r.standard_normal((5, 3)), r.standard_normal((5, 3)))
    np.testing.assert_allclose(a.sum(axis=1), 1)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 20), st.floats(0.01, 10))
def test_sla_weights_sum_property(n, scale):
    li = np.random.default_rng(n).uniform(0.01, 1, (3, n)) * scale
    np.testing.assert_allclose(sla_weights(li).sum(axis=-1), 1, atol=1e-12)


def test_param_row_major_tokens():
    m = ParAM(4, rng=rng(12))
    x = rng(13).standard_normal((1, 4, 2, 3))
    tokens = x.reshape(1, 4, 6).transpose(0, 2, 1)
    ref = m.attn(Tensor(tokens)).data.transpose(0, 2, 1).reshape(1, 4, 2, 3)
    np.testing.assert_allclose(m(Tensor(x)).data, ref)


@pytest.mark.parametrize("c0,h", [(8, 32), (16, 64)])
def test_encoder_stage_shapes(c0, h):
    enc = Encoder(c0, rng=rng())
    feats = enc(Tensor(rng(1).standard_normal((2, 3, h, h))))
    for i, f in enumerate(feats, start=1):
        assert f.shape == (2,) + stage_shape(i, c0, h, h)


def test_encoder_input_checks():
    enc = Encoder(8, rng=rng())
    with pytest.raises(ShapeError):
        enc(Tensor(np.zeros((2, 1, 32, 32))))
    with pytest.raises(ShapeError):
        enc(Tensor(np.zeros((2, 3, 40, 32))))

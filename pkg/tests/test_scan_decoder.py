import numpy as np
import pytest

from mpcmnet.decoder import M2B, SSHD, HybridAttention, MPCMNet, UpFuse
from mpcmnet.layers import softplus
from mpcmnet.oracles import scan_2d_oracle, scan_orders_oracle, sequential_scan_oracle
from mpcmnet.scan import ScanParams, direction_orders, scan, selective_scan_1d, selective_scan_2d
from mpcmnet.tensor import ShapeError, Tensor, precision


@pytest.fixture(autouse=True)
def f64():
    with precision("float64"):
        yield


def rng(seed=0):
    return np.random.default_rng(seed)


def _scan_inputs(r, b=2, L=7, d=3, n=4):
    return (r.standard_normal((b, L, d)), r.uniform(0.05, 0.8, (b, L, d)), -r.uniform(0.2, 2, (d, n)),
            r.standard_normal((b, L, n)), r.standard_normal((b, L, n)), r.standard_normal(d))


@pytest.mark.parametrize("seed", range(10))
def test_scan_matches_sequential_oracle(seed):
    args = _scan_inputs(rng(seed), L=3 + seed)
    got = scan(*[Tensor(a) for a in args]).data
    assert np.abs(got - sequential_scan_oracle(*args)).max() < 1e-10


def test_scan_length_one_is_direct_step():
    u, delta, A, Bm, Cm, D = _scan_inputs(rng(1), L=1)
    h = delta[..., None] * Bm[:, :, None, :] * u[..., None]
    want = np.einsum("bldn,bln->bld", h, Cm) + D * u
    np.testing.assert_allclose(scan(*[Tensor(a) for a in (u, delta, A, Bm, Cm, D)]).data, want)


def test_scan_rejects_bad_shapes():
    u, delta, A, Bm, Cm, D = _scan_inputs(rng(2))
    with pytest.raises(ShapeError):
        scan(Tensor(u), Tensor(delta[:, :-1]), Tensor(A), Tensor(Bm), Tensor(Cm), Tensor(D))
    with pytest.raises(ShapeError):
        scan(*[Tensor(a[:, :0]) if a.ndim == 3 else Tensor(a) for a in (u, delta, A, Bm, Cm, D)])


def test_scan_params_init():
    p = ScanParams(5, 3, rng=rng())
    np.testing.assert_allclose(p.decay().data, -np.tile([1.0, 2.0, 3.0], (5, 1)))
    np.testing.assert_allclose(softplus(p.delta_proj.bias).data, 0.1)
    assert np.all(p.skip.data == 1)


def test_selective_scan_1d_matches_oracle():
    p = ScanParams(4, 3, rng=rng(3))
    x = rng(4).standard_normal((2, 6, 4))
    delta, Bm, Cm = (t.data for t in p.project(Tensor(x)))
    want = sequential_scan_oracle(x, delta, p.decay().data, Bm, Cm, p.skip.data)
    assert np.abs(selective_scan_1d(Tensor(x), p).data - want).max() < 1e-10


def test_direction_orders_match_explicit_traversals():
    h, w = 3, 4
    for fast, slow in zip(direction_orders(h, w), scan_orders_oracle(h, w)):
        assert [divmod(int(i), w) for i in fast] == slow


@pytest.mark.parametrize("seed", range(10))
def test_selective_scan_2d_matches_oracle(seed):
    h, w = 2 + seed % 3, 3 + seed % 2
    p = ScanParams(3, 2, rng=rng(seed))
    x = rng(seed + 100).standard_normal((2, 3, h, w))

    def project(seq):
        return tuple(t.data for t in p.project(Tensor(seq)))

    want = scan_2d_oracle(x, project, p.decay().data, p.skip.data)
    assert np.abs(selective_scan_2d(Tensor(x), p).data - want).max() < 1e-10


def test_up_fuse_shapes_and_extent_check():
    m = UpFuse(16, 8, rng=rng())
    y = m(Tensor(rng(1).standard_normal((2, 16, 4, 4))), Tensor(rng(2).standard_normal((2, 8, 8, 8))))
    assert y.shape == (2, 8, 8, 8)
    with pytest.raises(ShapeError):
        m(Tensor(np.zeros((2, 16, 4, 4))), Tensor(np.zeros((2, 8, 6, 6))))


def test_hybrid_attention_gates_bounded():
    ha = HybridAttention(6, rng=rng())
    x = Tensor(rng(3).standard_normal((2, 6, 5, 5)))
    g = ha.channel_gate(x).data
    s = ha.spatial_gate(x).data
    assert g.shape == (2, 6, 1, 1) and s.shape == (2, 1, 5, 5)
    assert g.min() >= 0 and g.max() <= 1 and s.min() >= 0 and s.max() <= 1
    assert ha(x).shape == x.shape


def test_sshd_split_and_shapes():
    m = SSHD(12, state_dim=2, rng=rng())
    it = m(Tensor(rng(4).standard_normal((2, 12, 4, 4))), intermediates=True)
    assert it.x1.shape == (2, 9, 4, 4) and it.x2.shape == (2, 3, 4, 4) and it.x_s.shape == (2, 12, 4, 4)
    with pytest.raises(ShapeError):
        SSHD(4, rng=rng())


def test_m2b_branch_extents():
    m = M2B(4, state_dim=2, rng=rng())
    f = Tensor(rng(5).standard_normal((2, 4, 8, 8)))
    a, b, c = m.branches(f)
    assert a.shape == (2, 64, 2, 2) and b.shape == (2, 32, 2, 2) and c.shape == (2, 16, 2, 2)
    assert m(f).shape == f.shape
    with pytest.raises(ShapeError):
        m.branches(Tensor(np.zeros((2, 4, 6, 6))))


def test_network_output_and_feature_shapes():
    net = MPCMNet(8, state_dim=2, rng=rng())
    x = Tensor(rng(6).standard_normal((2, 3, 32, 32)))
    feats, dec = net.features(x)
    assert dec.u1.shape == (2, 8, 16, 16)
    assert dec.u2.shape == (2, 16, 8, 8)
    assert dec.f_d.shape == dec.f_s.shape == (2, 16, 8, 8)
    assert net(x).shape == (2, 4, 32, 32)
    net.eval()
    pred = net.predict(Tensor(rng(7).standard_normal((1, 3, 32, 32))))
    assert pred.shape == (1, 32, 32) and pred.min() >= 0 and pred.max() <= 3


def test_network_is_deterministic_per_seed():
    a = MPCMNet(8, rng=rng(3))
    b = MPCMNet(8, rng=rng(3))
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb
        np.testing.assert_array_equal(pa.data, pb.data)

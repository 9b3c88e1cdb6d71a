"""Named gradient checks and timing benches shared by the CLI and the test suite."""

from __future__ import annotations

import time
from typing import Callable

import numpy as np

from . import layers as L
from .decoder import M2B, SSHD, HybridAttention, MPCMNet, UpFuse
from .encoder import MEL, MPA, MPC, SLA, ParCM, ParSM, sla, sla_weights
from .layers import ConvSpec, Module
from .losses import LossConfig, dice_loss, focal_loss, joint_loss
from .oracles import OracleReport, gradcheck, softmax_attention_oracle
from .scan import ScanParams, scan, selective_scan_1d, selective_scan_2d
from .tensor import Tensor, precision

BLOCK_TOL = 1e-4
NET_TOL = 1e-3


def _x(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def _module_check(name: str, module: Module, x: Tensor, fn=None, tol=BLOCK_TOL, samples=6) -> OracleReport:
    fn = fn or (lambda: module(x))
    return gradcheck(name, fn, [x] + module.parameters(), tol=tol, samples=samples)


def _probs(rng, b, k, h, w) -> Tensor:
    return Tensor(rng.standard_normal((b, k, h, w)), requires_grad=True)


def _case_conv(rng):
    x = _x(rng, 2, 4, 6, 5)
    reps = []
    for tag, groups, k in (("dense", 1, 3), ("grouped", 2, 3), ("depthwise", 4, 3)):
        spec = ConvSpec(4, 4, (k, k), (2, 1), (1, 1), groups)
        w = _x(rng, *spec.weight_shape)
        b = _x(rng, 4)
        reps.append(gradcheck(f"conv2d_{tag}", lambda: L.conv2d(x, w, b, spec), [x, w, b]))
    return reps


def _case_strip(rng):
    x = _x(rng, 2, 3, 9, 8)
    m = L.StripConv(3, 7, rng=rng)
    return [_module_check("strip_conv", m, x)]


def _case_resample(rng):
    x = _x(rng, 2, 3, 4, 6)
    y = _x(rng, 2, 4, 8, 8)
    return [
        gradcheck("bilinear_up2", lambda: L.bilinear_resize(x, 2), [x]),
        gradcheck("bilinear_to_size", lambda: L.bilinear_resize(x, size=(3, 9)), [x]),
        gradcheck("pixel_unshuffle", lambda: L.pixel_unshuffle(y, 2), [y]),
        gradcheck("pool_gap_w", lambda: L.pool(y, "gap_w"), [y]),
        gradcheck("pool_gmp", lambda: L.pool(y, "gmp"), [y]),
    ]


def _case_norms(rng):
    x = _x(rng, 3, 4, 5, 5)
    bn = L.BatchNorm2d(4)
    ln = L.LayerNorm2d(4)
    return [_module_check("batch_norm", bn, x), _module_check("layer_norm", ln, x)]


def _case_mel(rng):
    return [_module_check("MEL", MEL(8, rng=rng), _x(rng, 2, 8, 8, 8))]


def _case_parcm(rng):
    return [_module_check("ParCM", ParCM(8, rng=rng), _x(rng, 2, 8, 6, 5))]


def _case_parsm(rng):
    return [_module_check("ParSM", ParSM(8, rng=rng), _x(rng, 2, 8, 6, 5))]


def _case_sla(rng):
    q = Tensor(rng.uniform(0.1, 1.0, (2, 7, 4)), requires_grad=True)
    k = Tensor(rng.uniform(0.1, 1.0, (2, 7, 4)), requires_grad=True)
    v = _x(rng, 2, 7, 3)
    m = SLA(8, heads=2, rng=rng)
    return [gradcheck("sla_core", lambda: sla(q, k, v), [q, k, v]),
            _module_check("SLA", m, _x(rng, 2, 9, 8))]


def _case_mpc_mpa(rng):
    return [_module_check("MPC", MPC(8, rng=rng), _x(rng, 2, 8, 4, 4), samples=3),
            _module_check("MPA", MPA(8, heads=2, rng=rng), _x(rng, 2, 8, 4, 4), samples=3)]


def _case_up(rng):
    m = UpFuse(8, 4, rng=rng)
    u = _x(rng, 2, 8, 3, 3)
    f = _x(rng, 2, 4, 6, 6)
    return [gradcheck("up_fuse", lambda: m(u, f), [u, f] + m.parameters(), samples=6)]


def _case_scan(rng):
    b, l, d, n = 2, 6, 3, 4
    u = _x(rng, b, l, d)
    delta = Tensor(rng.uniform(0.05, 0.5, (b, l, d)), requires_grad=True)
    a = Tensor(-rng.uniform(0.5, 2.0, (d, n)), requires_grad=True)
    bm, cm, dd = _x(rng, b, l, n), _x(rng, b, l, n), _x(rng, d)
    p1 = ScanParams(4, 3, rng=rng)
    p2 = ScanParams(4, 3, rng=rng)
    x1 = _x(rng, 2, 5, 4)
    x2 = _x(rng, 2, 4, 3, 4)
    return [
        gradcheck("scan_primitive", lambda: scan(u, delta, a, bm, cm, dd), [u, delta, a, bm, cm, dd]),
        _module_check("selective_scan_1d", p1, x1, fn=lambda: selective_scan_1d(x1, p1)),
        _module_check("selective_scan_2d", p2, x2, fn=lambda: selective_scan_2d(x2, p2)),
    ]


def _case_ha(rng):
    return [_module_check("HA", HybridAttention(4, rng=rng), _x(rng, 2, 4, 6, 6))]


def _case_sshd(rng):
    return [_module_check("SSHD", SSHD(8, state_dim=3, rng=rng), _x(rng, 2, 8, 4, 4))]


def _case_m2b(rng):
    return [_module_check("M2B", M2B(4, state_dim=2, rng=rng), _x(rng, 2, 4, 8, 8), samples=4)]


def _case_losses(rng):
    logits = _probs(rng, 2, 4, 5, 5)
    labels = rng.integers(0, 4, (2, 5, 5))
    cfg = LossConfig()
    reps = []
    for name, f in (("focal_loss", focal_loss), ("dice_loss", dice_loss), ("joint_loss", joint_loss)):
        reps.append(gradcheck(name, lambda f=f: f(L.softmax(logits, axis=1), labels, cfg), [logits], samples=20))
    return reps


def _case_net(rng):
    net = MPCMNet(8, state_dim=2, heads=1, rng=rng)
    x = _x(rng, 2, 3, 16, 16)
    params = net.parameters()
    picked = [params[i] for i in sorted(rng.choice(len(params), size=12, replace=False))]
    return [gradcheck("full_net_16x16", lambda: net(x), [x] + picked, tol=NET_TOL, samples=4)]


GRAD_CASES: dict[str, Callable[[np.random.Generator], list[OracleReport]]] = {
    "conv2d": _case_conv,
    "strip_conv": _case_strip,
    "resample": _case_resample,
    "norms": _case_norms,
    "mel": _case_mel,
    "parcm": _case_parcm,
    "parsm": _case_parsm,
    "sla": _case_sla,
    "mpc_mpa": _case_mpc_mpa,
    "up_fuse": _case_up,
    "scan": _case_scan,
    "ha": _case_ha,
    "sshd": _case_sshd,
    "m2b": _case_m2b,
    "losses": _case_losses,
    "net": _case_net,
}


def run_gradchecks(names=None, seed: int = 0) -> list[OracleReport]:
    """Run the named cases (all by default) in float64."""
    names = list(GRAD_CASES) if names is None else list(names)
    unknown = [n for n in names if n not in GRAD_CASES]
    if unknown:
        raise KeyError(f"unknown gradcheck case {unknown[0]!r}; choose from {', '.join(GRAD_CASES)}")
    reports = []
    with precision("float64"):
        for i, name in enumerate(names):
            reports.extend(GRAD_CASES[name](np.random.default_rng(seed + i)))
    return reports


# ----------------------------------------------------------------------------
# SLA amplification


def amplification_draws(count: int, seed: int = 0, n: int = 8, d: int = 4, s_max: float = 4.0):
    """Random (li, m, n, s) cases with li_m > li_n and s in (1, s_max].

    Scaling every similarity by ``s`` (the argwise form of the amplitude
    argument) raises the ratio w_m / w_n exactly when w_n keeps its sign, so
    draws where w_n crosses zero are rejected and counted. Returns
    (cases, rejected).
    """
    rng = np.random.default_rng(seed)
    cases, rejected = [], 0
    while len(cases) < count:
        q = L.phi(Tensor(rng.standard_normal(d), dtype=np.float64)).data
        k = L.phi(Tensor(rng.standard_normal((n, d)), dtype=np.float64)).data
        li = k @ q
        a, b = rng.choice(n, 2, replace=False)
        m_i, n_i = (a, b) if li[a] > li[b] else (b, a)
        s = s_max - float(rng.uniform(0.0, s_max - 1.0))
        if li[m_i] == li[n_i]:
            continue
        w0, w1 = sla_weights(li)[n_i], sla_weights(s * li)[n_i]
        if w0 == 0 or np.sign(w0) != np.sign(w1):
            rejected += 1
            continue
        cases.append((li, int(m_i), int(n_i), s))
    return cases, rejected


def amplification_holds(li: np.ndarray, m: int, n: int, s: float) -> bool:
    w = sla_weights(li)
    w_up = sla_weights(s * li)
    return bool(w_up[m] / w_up[n] > w[m] / w[n])


# ----------------------------------------------------------------------------
# benches

BENCH_OPS = ("sla", "softmax", "scan")
BENCH_DIM = 64


def _bench_inputs(op: str, n: int, rng):
    if op == "scan":
        return (rng.standard_normal((1, n, BENCH_DIM)), rng.uniform(0.05, 0.5, (1, n, BENCH_DIM)),
                -rng.uniform(0.5, 2, (BENCH_DIM, 4)), rng.standard_normal((1, n, 4)),
                rng.standard_normal((1, n, 4)), np.ones(BENCH_DIM))
    q = rng.uniform(0.1, 1, (1, n, BENCH_DIM))
    k = rng.uniform(0.1, 1, (1, n, BENCH_DIM))
    v = rng.standard_normal((1, n, BENCH_DIM))
    return q, k, v


def bench_time(op: str, n: int, repeats: int = 7, seed: int = 0) -> float:
    """Best-of-``repeats`` forward time in seconds for ``op`` on ``n`` tokens (float32)."""
    if op not in BENCH_OPS:
        raise KeyError(f"unknown bench op {op!r}; choose from {', '.join(BENCH_OPS)}")
    if n <= 0:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(seed)
    with precision("float32"):
        args = [Tensor(a) for a in _bench_inputs(op, n, rng)]
        if op == "sla":
            run = lambda: sla(*args)  # noqa: E731
        elif op == "scan":
            run = lambda: scan(*args)  # noqa: E731
        else:
            raw = [a.data[0] for a in args]
            run = lambda: softmax_attention_oracle(*raw)  # noqa: E731
        run()
        best = float("inf")
        for _ in range(repeats):
            t = time.perf_counter()
            run()
            best = min(best, time.perf_counter() - t)
    return best


def bench_ratio(op: str, n: int, factor: int = 4, repeats: int = 7) -> tuple[float, float, float]:
    """(T(n), T(factor*n), ratio)."""
    # the first sub-millisecond timings in a process run cold; discard one pass at both sizes
    bench_time(op, n, 1)
    bench_time(op, factor * n, 1)
    t1 = bench_time(op, n, repeats)
    t2 = bench_time(op, factor * n, repeats)
    return t1, t2, t2 / t1

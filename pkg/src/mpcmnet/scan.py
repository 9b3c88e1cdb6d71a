"""Selective state-space scan (1-D and four-direction 2-D).

Per channel d and state k::

    h_t = exp(delta_t[d] * A[d, k]) * h_{t-1} + delta_t[d] * B_t[k] * x_t[d]
    y_t[d] = sum_k C_t[k] * h_t[d, k] + D[d] * x_t[d]

``delta``, ``B`` and ``C`` are input-dependent projections of ``x``. The
recurrence is run sequentially; the primitive carries its own reverse-time
backward pass so the tape holds a single node per scan.
"""

from __future__ import annotations

import math

import numpy as np

from .layers import Linear, Module, softplus
from .tensor import Function, ShapeError, Tensor, concat

DEFAULT_STATE_DIM = 4
DELTA_INIT = 0.1


class ScanFn(Function):
    def forward(self, u, delta, A, Bm, Cm, Dskip):
        b, L, d = u.shape
        if L == 0:
            raise ShapeError("selective scan needs a non-empty sequence")
        n = A.shape[1]
        if delta.shape != u.shape or A.shape != (d, n) or Bm.shape != (b, L, n) or Cm.shape != (b, L, n):
            raise ShapeError(
                f"scan shapes disagree: u {u.shape} delta {delta.shape} A {A.shape} B {Bm.shape} C {Cm.shape}"
            )
        self.u, self.delta, self.A, self.Bm, self.Cm, self.Dskip = u, delta, A, Bm, Cm, Dskip
        abar = np.exp(delta[..., None] * A)  # b, L, d, n
        bx = (delta * u)[..., None] * Bm[:, :, None, :]  # b, L, d, n
        hs = np.empty((b, L, d, n), dtype=u.dtype)
        h = np.zeros((b, d, n), dtype=u.dtype)
        for t in range(L):
            h = abar[:, t] * h + bx[:, t]
            hs[:, t] = h
        self.abar, self.hs = abar, hs
        y = np.einsum("bldn,bln->bld", hs, Cm) + u * Dskip
        return y

    def backward(self, gy):
        u, delta, A, Bm, Cm = self.u, self.delta, self.A, self.Bm, self.Cm
        abar, hs = self.abar, self.hs
        b, L, d = u.shape
        gC = np.einsum("bld,bldn->bln", gy, hs)
        gh_all = np.empty_like(hs)
        gh = np.zeros((b, d, A.shape[1]), dtype=u.dtype)
        for t in range(L - 1, -1, -1):
            gh = gh + gy[:, t, :, None] * Cm[:, t, None, :]
            gh_all[:, t] = gh
            gh = gh * abar[:, t]
        h_prev = np.concatenate([np.zeros_like(hs[:, :1]), hs[:, :-1]], axis=1)
        g_abar = gh_all * h_prev * abar  # d/d(delta*A) of the decay term
        g_delta = (g_abar * A).sum(-1)
        gA = np.einsum("bldn,bld->dn", g_abar, delta)
        g_bx = gh_all  # d/d(delta*u*B)
        gB = np.einsum("bldn,bld->bln", g_bx, delta * u)
        gdu = np.einsum("bldn,bln->bld", g_bx, Bm)
        g_delta = g_delta + gdu * u
        gu = gdu * delta + gy * self.Dskip
        gD = (gy * u).sum(axis=(0, 1))
        return gu, g_delta, gA, gB, gC, gD


def scan(u: Tensor, delta: Tensor, A: Tensor, Bm: Tensor, Cm: Tensor, Dskip: Tensor) -> Tensor:
    return ScanFn.apply(u, delta, A, Bm, Cm, Dskip)


class ScanParams(Module):
    """Projections for delta, B, C plus the shared log-decay and skip."""

    def __init__(self, ch: int, state_dim: int = DEFAULT_STATE_DIM, *, rng):
        super().__init__()
        self.ch, self.state_dim = ch, state_dim
        self.delta_proj = Linear(ch, ch, rng=rng)
        self.delta_proj.bias.data[:] = math.log(math.expm1(DELTA_INIT))
        self.delta_proj.init_specs["bias"] = f"const(softplus^-1({DELTA_INIT}))"
        self.b_proj = Linear(ch, state_dim, bias=False, rng=rng)
        self.c_proj = Linear(ch, state_dim, bias=False, rng=rng)
        self.add_param("a_log", (ch, state_dim), "zeros")
        self.a_log.data[:] = np.log(np.arange(1, state_dim + 1))[None, :]
        self.init_specs["a_log"] = "log(1..n)"
        self.add_param("skip", (ch,), "ones")

    def decay(self) -> Tensor:
        """A = -exp(a_log), strictly negative."""
        return -self.a_log.exp()

    def project(self, x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        return softplus(self.delta_proj(x)), self.b_proj(x), self.c_proj(x)


def selective_scan_1d(x: Tensor, params: ScanParams) -> Tensor:
    """x: B x L x C sequence -> B x L x C."""
    if x.shape[1] == 0:
        raise ShapeError("selective scan needs a non-empty sequence")
    delta, Bm, Cm = params.project(x)
    return scan(x, delta, params.decay(), Bm, Cm, params.skip)


def direction_orders(h: int, w: int) -> list[np.ndarray]:
    """Token orders over a row-major flattening: TL->BR, BR->TL, TR->BL, BL->TR."""
    fwd = np.arange(h * w)
    row_rev = fwd.reshape(h, w)[:, ::-1].reshape(-1)
    return [fwd, fwd[::-1].copy(), row_rev.copy(), row_rev[::-1].copy()]


def selective_scan_2d(x: Tensor, params: ScanParams) -> Tensor:
    """Four-direction scan over B x C x H x W; the unflattened outputs are summed."""
    b, c, h, w = x.shape
    seq = x.reshape(b, c, h * w).permute(0, 2, 1)  # B x L x C
    orders = direction_orders(h, w)
    stacked = concat([seq[:, o] for o in orders], axis=0)
    y = selective_scan_1d(stacked, params)
    merged = None
    for i, o in enumerate(orders):
        back = y[i * b : (i + 1) * b][:, np.argsort(o)]
        merged = back if merged is None else merged + back
    return merged.permute(0, 2, 1).reshape(b, c, h, w)


class SelectiveScan2D(Module):
    def __init__(self, ch: int, state_dim: int = DEFAULT_STATE_DIM, *, rng):
        super().__init__()
        self.params = ScanParams(ch, state_dim, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        return selective_scan_2d(x, self.params)

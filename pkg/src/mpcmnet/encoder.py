"""Multi-scale partial attention convolution encoder.

Four stride-2 stages. Stages 1-3 run an MPC block (MEL -> ParCM -> ParSM,
each residual); stage 4 runs an MPA block (MEL -> ParAM -> ParSM) where ParAM
is softmax-like linear attention over the flattened feature map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import (
    STRIP_SIZES,
    BatchNorm2d,
    Conv2d,
    ConvBNReLU,
    Linear,
    Module,
    StripConv,
    channel_pool,
    phi,
    pool,
    relu,
    sigmoid,
)
from .tensor import ShapeError, Tensor, concat, split, split_ratio

PARTIAL_RATIO = 0.25


def partial_sizes(c: int, ratio: float = PARTIAL_RATIO) -> tuple[int, int]:
    k = int(np.floor(c * ratio + 0.5))
    return k, c - k


class MEL(Module):
    """1x1 conv + BN + ReLU, then identity + strip branches (7, 11, 21) summed, then 1x1 mix."""

    def __init__(self, ch: int, *, rng, sizes=STRIP_SIZES):
        super().__init__()
        self.pre = ConvBNReLU(ch, ch, 1, rng=rng)
        self.sizes = tuple(sizes)
        for k in self.sizes:
            setattr(self, f"strip{k}", StripConv(ch, k, rng=rng))
        self.mix = Conv2d(ch, ch, 1, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        t = self.pre(x)
        acc = t
        for k in self.sizes:
            acc = acc + getattr(self, f"strip{k}")(t)
        return self.mix(acc)


@dataclass
class CoordAttnIntermediates:
    x_w: Tensor
    x_h: Tensor
    x_cat: Tensor
    x_mid: Tensor
    w_w: Tensor
    w_h: Tensor
    out: Tensor


class CoordAttention(Module):
    def __init__(self, ch: int, *, rng, reduction: int = 4, floor: int = 4):
        super().__init__()
        mid = max(floor, ch // reduction)
        self.squeeze = Conv2d(ch, mid, 1, rng=rng)
        self.bn = BatchNorm2d(mid)
        self.conv_w = Conv2d(mid, ch, 1, rng=rng)
        self.conv_h = Conv2d(mid, ch, 1, rng=rng)

    def forward(self, x: Tensor, intermediates: bool = False):
        h, w = x.shape[2], x.shape[3]
        x_w = pool(x, "gap_w")  # B x C x H x 1
        x_h = pool(x, "gap_h")  # B x C x 1 x W
        x_cat = concat([x_w, x_h.permute(0, 1, 3, 2)], axis=2)
        x_mid = relu(self.bn(self.squeeze(x_cat)))
        mid_w, mid_h = split(x_mid, [h, w], axis=2)
        w_w = sigmoid(self.conv_w(mid_w))
        w_h = sigmoid(self.conv_h(mid_h.permute(0, 1, 3, 2)))
        out = x * w_w * w_h
        if intermediates:
            return CoordAttnIntermediates(x_w, x_h, x_cat, x_mid, w_w, w_h, out)
        return out


class ParCM(Module):
    """Partial channel module: 3x3 conv on a quarter of the channels, coordinate attention on the rest."""

    def __init__(self, ch: int, *, rng):
        super().__init__()
        if ch < 8:
            raise ShapeError(f"ParCM needs at least 8 channels, got {ch}")
        c_conv, c_attn = partial_sizes(ch)
        self.conv = Conv2d(c_conv, c_conv, 3, rng=rng)
        self.ca = CoordAttention(c_attn, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        x1, x2 = split_ratio(x, PARTIAL_RATIO)
        return concat([self.conv(x1), self.ca(x2)], axis=1)


class ParSM(Module):
    """Partial spatial module: 1x1 conv on a quarter, spatial selectivity gate on the rest."""

    def __init__(self, ch: int, *, rng, kernel: int = 7):
        super().__init__()
        c_conv, _ = partial_sizes(ch)
        self.conv = Conv2d(c_conv, c_conv, 1, rng=rng)
        self.spatial = Conv2d(2, 1, kernel, rng=rng)

    def gate(self, c2: Tensor) -> Tensor:
        desc = concat([channel_pool(c2, "max"), channel_pool(c2, "avg")], axis=1)
        return sigmoid(self.spatial(desc))

    def forward(self, x: Tensor) -> Tensor:
        c1, c2 = split_ratio(x, PARTIAL_RATIO)
        return concat([self.conv(c1), self.gate(c2) * c2], axis=1)


# ----------------------------------------------------------------------------
# softmax-like linear attention


def sla(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Linear-time SLA over the token axis (-2).

    ``q`` and ``k`` are already feature-mapped (positive). For each query,
    out_i = sum_j (alpha_i * l_ij - beta_i) v_j with l_ij = q_i . k_j,
    alpha_i = 1 + 1/sum_j l_ij and beta_i = sum_j l_ij / N, evaluated without
    forming the N x N similarity matrix.
    """
    n = q.shape[-2]
    if n == 0:
        raise ShapeError("SLA needs at least one token")
    k_sum = k.sum(axis=-2, keepdims=True)
    s = (q * k_sum).sum(axis=-1, keepdims=True)
    kv = k.permute(*range(k.ndim - 2), k.ndim - 1, k.ndim - 2) @ v
    num = q @ kv
    v_sum = v.sum(axis=-2, keepdims=True)
    alpha = 1.0 + 1.0 / s
    beta = s / n
    return alpha * num - beta * v_sum


@dataclass
class SlaIntermediates:
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    li: np.ndarray
    s_sum: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    weights: np.ndarray
    out: np.ndarray


def sla_weights(li: np.ndarray) -> np.ndarray:
    """Per-query weights alpha * l - beta from a (..., N_q, N_k) similarity matrix."""
    s = li.sum(axis=-1, keepdims=True)
    return (1 + 1 / s) * li - s / li.shape[-1]


class SLA(Module):
    def __init__(self, ch: int, heads: int = 1, *, rng):
        super().__init__()
        if ch % heads:
            raise ShapeError(f"{heads} heads do not divide {ch} channels")
        self.heads = heads
        self.wq = Linear(ch, ch, bias=False, rng=rng)
        self.wk = Linear(ch, ch, bias=False, rng=rng)
        self.wv = Linear(ch, ch, bias=False, rng=rng)

    def _heads(self, t: Tensor) -> Tensor:
        b, n, c = t.shape
        return t.reshape(b, n, self.heads, c // self.heads).permute(0, 2, 1, 3)

    def forward(self, x: Tensor) -> Tensor:
        """x: B x N x C tokens -> B x N x C."""
        b, n, c = x.shape
        if n == 0:
            raise ShapeError("SLA needs at least one token")
        q = self._heads(phi(self.wq(x)))
        k = self._heads(phi(self.wk(x)))
        v = self._heads(self.wv(x))
        out = sla(q, k, v)
        return out.permute(0, 2, 1, 3).reshape(b, n, c)

    def intermediates(self, x: Tensor) -> SlaIntermediates:
        """Explicit quadratic breakdown of one forward pass (single head, for inspection)."""
        q = phi(self.wq(x)).data
        k = phi(self.wk(x)).data
        v = self.wv(x).data
        li = q @ np.swapaxes(k, -1, -2)
        s = li.sum(axis=-1, keepdims=True)
        alpha = 1 + 1 / s
        beta = s / li.shape[-1]
        w = alpha * li - beta
        return SlaIntermediates(q, k, v, li, s, alpha, beta, w, w @ v)


class ParAM(Module):
    def __init__(self, ch: int, heads: int = 1, *, rng):
        super().__init__()
        self.attn = SLA(ch, heads, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        b, c, h, w = x.shape
        tokens = x.reshape(b, c, h * w).permute(0, 2, 1)  # row-major token order
        out = self.attn(tokens)
        return out.permute(0, 2, 1).reshape(b, c, h, w)


class MPC(Module):
    def __init__(self, ch: int, *, rng):
        super().__init__()
        self.mel = MEL(ch, rng=rng)
        self.parcm = ParCM(ch, rng=rng)
        self.parsm = ParSM(ch, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        y = x + self.mel(x)
        y = y + self.parcm(y)
        return y + self.parsm(y)


class MPA(Module):
    def __init__(self, ch: int, heads: int = 1, *, rng):
        super().__init__()
        self.mel = MEL(ch, rng=rng)
        self.param = ParAM(ch, heads, rng=rng)
        self.parsm = ParSM(ch, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        y = self.mel(x)
        y = y + self.param(y)
        return y + self.parsm(y)


class Encoder(Module):
    """Stem and three more stride-2 convs; f_i has 2**(i-1)*c0 channels at H/2**i."""

    def __init__(self, c0: int = 16, heads: int = 1, *, rng):
        super().__init__()
        self.c0 = c0
        chans = [c0 * 2**i for i in range(4)]
        self.down1 = ConvBNReLU(3, chans[0], 3, 2, rng=rng)
        self.stage1 = MPC(chans[0], rng=rng)
        self.down2 = ConvBNReLU(chans[0], chans[1], 3, 2, rng=rng)
        self.stage2 = MPC(chans[1], rng=rng)
        self.down3 = ConvBNReLU(chans[1], chans[2], 3, 2, rng=rng)
        self.stage3 = MPC(chans[2], rng=rng)
        self.down4 = ConvBNReLU(chans[2], chans[3], 3, 2, rng=rng)
        self.stage4 = MPA(chans[3], heads, rng=rng)

    def forward(self, img: Tensor) -> list[Tensor]:
        _, c, h, w = img.shape
        if c != 3:
            raise ShapeError(f"encoder expects 3-channel images, got {c}")
        if h % 16 or w % 16:
            raise ShapeError(f"input extents {h}x{w} must be divisible by 16")
        f1 = self.stage1(self.down1(img))
        f2 = self.stage2(self.down2(f1))
        f3 = self.stage3(self.down3(f2))
        f4 = self.stage4(self.down4(f3))
        return [f1, f2, f3, f4]


def stage_shape(i: int, c0: int, h: int, w: int) -> tuple[int, int, int]:
    """Channels and extents of encoder stage ``i`` (1-based)."""
    return (2 ** (i - 1) * c0, h // 2**i, w // 2**i)

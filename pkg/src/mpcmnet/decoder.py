"""Multi-scale Mamba decoding and the full segmentation network."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import PARTIAL_RATIO, Encoder, partial_sizes
from .layers import (
    Conv2d,
    ConvBNReLU,
    LayerNorm2d,
    Linear,
    Module,
    bilinear_resize,
    channel_pool,
    hard_sigmoid,
    pixel_unshuffle,
    pool,
    relu,
)
from .scan import DEFAULT_STATE_DIM, SelectiveScan2D
from .tensor import ShapeError, Tensor, concat, split_ratio

NUM_CLASSES = 4


class UpFuse(Module):
    """Two 3x3 convs, bilinear x2, project to the skip width, concat with the skip, 1x1 fuse."""

    def __init__(self, in_ch: int, skip_ch: int, *, rng):
        super().__init__()
        self.conv_a = ConvBNReLU(in_ch, in_ch, 3, rng=rng)
        self.conv_b = ConvBNReLU(in_ch, in_ch, 3, rng=rng)
        self.proj = Conv2d(in_ch, skip_ch, 1, rng=rng)
        self.fuse = Conv2d(2 * skip_ch, skip_ch, 1, rng=rng)

    def forward(self, u_next: Tensor, f_skip: Tensor) -> Tensor:
        t = bilinear_resize(self.conv_b(self.conv_a(u_next)), 2)
        if t.shape[-2:] != f_skip.shape[-2:]:
            raise ShapeError(f"upsampled extent {t.shape[-2:]} does not match skip extent {f_skip.shape[-2:]}")
        return self.fuse(concat([self.proj(t), f_skip], axis=1))


class HybridAttention(Module):
    """Gaussian-SE channel gate (mean and std) followed by a 7x7 spatial gate; both hard-sigmoid."""

    def __init__(self, ch: int, *, rng, reduction: int = 4, floor: int = 4, kernel: int = 7):
        super().__init__()
        mid = max(floor, ch // reduction)
        self.fc1 = Linear(2 * ch, mid, rng=rng)
        self.fc2 = Linear(mid, ch, rng=rng)
        self.spatial = Conv2d(2, 1, kernel, rng=rng)

    def channel_gate(self, x: Tensor) -> Tensor:
        b, c = x.shape[:2]
        stats = concat([pool(x, "gap").reshape(b, c), x.std(axis=(2, 3))], axis=1)
        return hard_sigmoid(self.fc2(relu(self.fc1(stats)))).reshape(b, c, 1, 1)

    def spatial_gate(self, x: Tensor) -> Tensor:
        desc = concat([channel_pool(x, "avg"), channel_pool(x, "max")], axis=1)
        return hard_sigmoid(self.spatial(desc))

    def forward(self, x: Tensor) -> Tensor:
        y = x * self.channel_gate(x)
        return y * self.spatial_gate(y)


@dataclass
class SshdIntermediates:
    x1: Tensor
    x2: Tensor
    x_s: Tensor


class SSHD(Module):
    """Scan branch on 3/4 of the channels, hybrid attention on 1/4, concat + linear."""

    def __init__(self, ch: int, state_dim: int = DEFAULT_STATE_DIM, *, rng):
        super().__init__()
        if ch < 8:
            raise ShapeError(f"SSHD needs at least 8 channels, got {ch}")
        c_attn, c_scan = partial_sizes(ch, PARTIAL_RATIO)
        self.lin_in = Conv2d(c_scan, c_scan, 1, rng=rng)
        self.dw = Conv2d(c_scan, c_scan, 3, groups=c_scan, rng=rng)
        self.ssm = SelectiveScan2D(c_scan, state_dim, rng=rng)
        self.norm = LayerNorm2d(c_scan)
        self.ha = HybridAttention(c_attn, rng=rng)
        self.lin_out = Conv2d(ch, ch, 1, rng=rng)

    def forward(self, x: Tensor, intermediates: bool = False):
        x_attn, x_scan = split_ratio(x, PARTIAL_RATIO)
        x1 = self.norm(self.ssm(self.dw(self.lin_in(x_scan))))
        x2 = self.ha(x_attn)
        x_s = self.lin_out(concat([x1, x2], axis=1))
        if intermediates:
            return SshdIntermediates(x1, x2, x_s)
        return x_s


class M2B(Module):
    """Three receptive-field branches at 1/4 extent, SSHD, back to the input extent."""

    def __init__(self, ch: int, width: int | None = None, state_dim: int = DEFAULT_STATE_DIM, *, rng):
        super().__init__()
        width = width or ch
        self.conv_b = Conv2d(ch, 2 * ch, 3, stride=2, rng=rng)
        self.conv_c = Conv2d(ch, 4 * ch, 5, stride=4, rng=rng)
        self.proj_a = Conv2d(16 * ch, width, 1, rng=rng)
        self.proj_b = Conv2d(8 * ch, width, 1, rng=rng)
        self.proj_c = Conv2d(4 * ch, width, 1, rng=rng)
        self.sshd = SSHD(3 * width, state_dim, rng=rng)
        self.reduce = Conv2d(3 * width, ch, 1, rng=rng)

    def branches(self, f_d: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        h, w = f_d.shape[-2:]
        if h % 4 or w % 4:
            raise ShapeError(f"M2B input extents {h}x{w} must be divisible by 4")
        a = pixel_unshuffle(f_d, 4)
        b = pixel_unshuffle(self.conv_b(f_d), 2)
        c = self.conv_c(f_d)
        if not a.shape[-2:] == b.shape[-2:] == c.shape[-2:]:
            raise ShapeError(f"branch extents disagree: {a.shape} {b.shape} {c.shape}")
        return a, b, c

    def forward(self, f_d: Tensor) -> Tensor:
        a, b, c = self.branches(f_d)
        fused = concat([self.proj_a(a), self.proj_b(b), self.proj_c(c)], axis=1)
        y = bilinear_resize(self.sshd(fused), size=f_d.shape[-2:])
        return self.reduce(y)


@dataclass
class DecoderFeatures:
    u1: Tensor
    u2: Tensor
    u3: Tensor
    u4: Tensor
    f_d: Tensor
    f_s: Tensor


class MPCMNet(Module):
    """Encoder, UP ladder, M2B and the segmentation head; B x 3 x H x W -> B x 4 x H x W logits."""

    def __init__(self, c0: int = 16, state_dim: int = DEFAULT_STATE_DIM, heads: int = 1,
                 num_classes: int = NUM_CLASSES, *, rng):
        super().__init__()
        self.c0 = c0
        self.encoder = Encoder(c0, heads, rng=rng)
        self.up3 = UpFuse(8 * c0, 4 * c0, rng=rng)
        self.up2 = UpFuse(4 * c0, 2 * c0, rng=rng)
        self.up1 = UpFuse(2 * c0, c0, rng=rng)
        self.fd_fuse = ConvBNReLU(14 * c0, 2 * c0, 1, rng=rng)
        self.m2b = M2B(2 * c0, state_dim=state_dim, rng=rng)
        self.head = ConvBNReLU(3 * c0, c0, 3, rng=rng)
        self.classifier = Conv2d(c0, num_classes, 1, rng=rng)

    def features(self, img: Tensor) -> tuple[list[Tensor], DecoderFeatures]:
        f1, f2, f3, f4 = self.encoder(img)
        u4 = f4
        u3 = self.up3(u4, f3)
        u2 = self.up2(u3, f2)
        u1 = self.up1(u2, f1)
        size = u2.shape[-2:]
        f_d = self.fd_fuse(concat([u2, bilinear_resize(u3, size=size), bilinear_resize(u4, size=size)], axis=1))
        f_s = self.m2b(f_d)
        return [f1, f2, f3, f4], DecoderFeatures(u1, u2, u3, u4, f_d, f_s)

    def forward(self, img: Tensor) -> Tensor:
        _, dec = self.features(img)
        y = concat([bilinear_resize(dec.f_s, size=dec.u1.shape[-2:]), dec.u1], axis=1)
        y = bilinear_resize(self.head(y), size=img.shape[-2:])
        return self.classifier(y)

    def predict(self, img: Tensor) -> np.ndarray:
        """Argmax category ids, B x H x W (no tape recorded)."""
        return np.argmax(self.forward(img).data, axis=1)

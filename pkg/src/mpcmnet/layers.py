"""Neural layers on top of :mod:`mpcmnet.tensor`.

Functional forms (``conv2d``, ``strip_conv``, ``bilinear_resize`` ...) take
explicit weights; :class:`Module` subclasses own their parameters and are what
the encoder and decoder are assembled from.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .tensor import (
    Function,
    HardSigmoid,
    Phi,
    Relu,
    ShapeError,
    Sigmoid,
    Softmax,
    Softplus,
    Tensor,
    concat,
    default_dtype,
    matmul,
    reduce,
)

# ----------------------------------------------------------------------------
# convolution


@dataclass(frozen=True)
class ConvSpec:
    in_ch: int
    out_ch: int
    kernel: tuple[int, int] = (3, 3)
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)
    groups: int = 1
    dilation: tuple[int, int] = (1, 1)

    def __post_init__(self):
        for name in ("kernel", "stride", "padding", "dilation"):
            v = getattr(self, name)
            if isinstance(v, int):
                object.__setattr__(self, name, (v, v))
        if self.groups < 1 or self.in_ch % self.groups or self.out_ch % self.groups:
            raise ShapeError(
                f"groups={self.groups} must divide in_ch={self.in_ch} and out_ch={self.out_ch}"
            )

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_ch, self.in_ch // self.groups, *self.kernel)

    def out_size(self, h: int, w: int) -> tuple[int, int]:
        ho = (h + 2 * self.padding[0] - self.dilation[0] * (self.kernel[0] - 1) - 1) // self.stride[0] + 1
        wo = (w + 2 * self.padding[1] - self.dilation[1] * (self.kernel[1] - 1) - 1) // self.stride[1] + 1
        if ho <= 0 or wo <= 0:
            raise ShapeError(f"input {h}x{w} too small for {self}")
        return ho, wo


def _tap(xp: np.ndarray, i: int, j: int, spec: ConvSpec, ho: int, wo: int) -> tuple[slice, slice]:
    r0 = i * spec.dilation[0]
    c0 = j * spec.dilation[1]
    return (
        slice(r0, r0 + spec.stride[0] * (ho - 1) + 1, spec.stride[0]),
        slice(c0, c0 + spec.stride[1] * (wo - 1) + 1, spec.stride[1]),
    )


class Conv2dFn(Function):
    """Grouped 2-D cross-correlation with zero padding and bias."""

    def forward(self, x, w, b, spec: ConvSpec):
        if x.ndim != 4 or x.shape[1] != spec.in_ch:
            raise ShapeError(f"conv2d expects B x {spec.in_ch} x H x W input, got {x.shape}")
        if w.shape != spec.weight_shape:
            raise ShapeError(f"conv2d weight shape {w.shape} != {spec.weight_shape}")
        self.spec = spec
        B, C, H, W = x.shape
        ho, wo = spec.out_size(H, W)
        self.ho, self.wo, self.x_shape = ho, wo, x.shape
        ph, pw = spec.padding
        xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x
        self.xp_shape = xp.shape
        kh, kw = spec.kernel
        self.mode = "dense" if spec.groups == 1 else ("depthwise" if spec.groups == C == spec.out_ch else "grouped")
        if self.mode == "depthwise":
            self.xp, self.w = xp, w
            out = np.zeros((B, C, ho, wo), dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    rs, cs = _tap(xp, i, j, spec, ho, wo)
                    out += xp[:, :, rs, cs] * w[:, 0, i, j][None, :, None, None]
        else:
            g = spec.groups
            cg, og = C // g, spec.out_ch // g
            if kh == kw == 1 and spec.stride == (1, 1) and not (ph or pw):
                cols = xp.reshape(B, g, cg, H * W)
            else:
                cols = np.empty((B, C, kh, kw, ho, wo), dtype=x.dtype)
                for i in range(kh):
                    for j in range(kw):
                        rs, cs = _tap(xp, i, j, spec, ho, wo)
                        cols[:, :, i, j] = xp[:, :, rs, cs]
                cols = cols.reshape(B, g, cg * kh * kw, ho * wo)
            self.cols = cols
            self.wmat = w.reshape(g, og, cg * kh * kw)
            out = np.matmul(self.wmat[None], cols).reshape(B, spec.out_ch, ho, wo)
        return out + b[None, :, None, None]

    def backward(self, grad):
        spec = self.spec
        B, C, H, W = self.x_shape
        kh, kw = spec.kernel
        ph, pw = spec.padding
        ho, wo = self.ho, self.wo
        gb = grad.sum(axis=(0, 2, 3))
        gxp = np.zeros(self.xp_shape, dtype=grad.dtype)
        if self.mode == "depthwise":
            gw = np.zeros_like(self.w)
            for i in range(kh):
                for j in range(kw):
                    rs, cs = _tap(self.xp, i, j, spec, ho, wo)
                    gw[:, 0, i, j] = (grad * self.xp[:, :, rs, cs]).sum(axis=(0, 2, 3))
                    gxp[:, :, rs, cs] += grad * self.w[:, 0, i, j][None, :, None, None]
        else:
            g = spec.groups
            cg, og = C // g, spec.out_ch // g
            gm = grad.reshape(B, g, og, ho * wo)
            gw = np.matmul(gm, np.swapaxes(self.cols, -1, -2)).sum(axis=0).reshape(spec.weight_shape)
            gcols = np.matmul(np.swapaxes(self.wmat, -1, -2)[None], gm)
            if kh == kw == 1 and spec.stride == (1, 1) and not (ph or pw):
                gxp = gcols.reshape(self.xp_shape)
            else:
                gcols = gcols.reshape(B, C, kh, kw, ho, wo)
                for i in range(kh):
                    for j in range(kw):
                        rs, cs = _tap(gxp, i, j, spec, ho, wo)
                        gxp[:, :, rs, cs] += gcols[:, :, i, j]
        gx = gxp[:, :, ph : ph + H, pw : pw + W] if ph or pw else gxp
        return np.ascontiguousarray(gx), gw, gb


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, spec: ConvSpec) -> Tensor:
    return Conv2dFn.apply(x, weight, bias, spec=spec)


STRIP_SIZES = (7, 11, 21)


def strip_conv(x: Tensor, w_row: Tensor, b_row: Tensor, w_col: Tensor, b_col: Tensor, k: int) -> Tensor:
    """Depthwise 1 x k then k x 1 convolution; spatial extent and channels preserved."""
    if k % 2 == 0:
        raise ShapeError(f"strip convolution needs an odd kernel, got {k}")
    c = x.shape[1]
    h = ConvSpec(c, c, (1, k), 1, (0, (k - 1) // 2), groups=c)
    v = ConvSpec(c, c, (k, 1), 1, ((k - 1) // 2, 0), groups=c)
    return conv2d(conv2d(x, w_row, b_row, h), w_col, b_col, v)


# ----------------------------------------------------------------------------
# activations


def relu(x: Tensor) -> Tensor:
    return Relu.apply(x)


def sigmoid(x: Tensor) -> Tensor:
    return Sigmoid.apply(x)


def hard_sigmoid(x: Tensor) -> Tensor:
    """clamp(x / 6 + 1/2, 0, 1)."""
    return HardSigmoid.apply(x)


def softplus(x: Tensor) -> Tensor:
    return Softplus.apply(x)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return Softmax.apply(x, axis=axis)


def phi(x: Tensor) -> Tensor:
    return Phi.apply(x)


def activation(x: Tensor, kind: str) -> Tensor:
    table = {"relu": relu, "sigmoid": sigmoid, "hard_sigmoid": hard_sigmoid, "softmax": softmax, "phi": phi}
    return table[kind](x)


# ----------------------------------------------------------------------------
# normalization

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel batch norm over (B, H, W); running stats are updated in place."""
    shape = (1, -1, 1, 1)
    if training:
        if x.shape[0] < 2:
            raise ShapeError("batch norm in train mode needs a batch of at least 2")
        mean = x.mean(axis=(0, 2, 3), keepdims=True)
        centered = x - mean
        var = (centered * centered).mean(axis=(0, 2, 3), keepdims=True)
        n = x.shape[0] * x.shape[2] * x.shape[3]
        running_mean *= 1 - momentum
        running_mean += momentum * mean.data.reshape(-1)
        running_var *= 1 - momentum
        running_var += momentum * var.data.reshape(-1) * n / max(n - 1, 1)
        xhat = centered / (var + eps) ** 0.5
    else:
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = (x - running_mean.reshape(shape).astype(x.dtype)) * inv.reshape(shape).astype(x.dtype)
    return xhat * gamma.reshape(shape) + beta.reshape(shape)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = BN_EPS) -> Tensor:
    """Normalize over the channel axis independently at every position."""
    mean = x.mean(axis=1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=1, keepdims=True)
    xhat = centered / (var + eps) ** 0.5
    shape = (1, -1) + (1,) * (x.ndim - 2)
    return xhat * gamma.reshape(shape) + beta.reshape(shape)


# ----------------------------------------------------------------------------
# resampling


def _interp_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    # half-pixel centers, no corner alignment, source index clamped at 0
    m = np.zeros((n_out, n_in), dtype=dtype)
    ratio = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * ratio - 0.5, 0.0)
        i0 = min(int(math.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        m[i, i0] += 1 - lam
        m[i, i1] += lam
    return m


class BilinearFn(Function):
    def forward(self, x, size):
        self.mh = _interp_matrix(x.shape[-2], size[0], x.dtype)
        self.mw = _interp_matrix(x.shape[-1], size[1], x.dtype)
        return np.matmul(self.mh, np.matmul(x, self.mw.T))

    def backward(self, g):
        return (np.matmul(self.mh.T, np.matmul(g, self.mw)),)


def bilinear_resize(x: Tensor, scale: float | None = None, size: tuple[int, int] | None = None) -> Tensor:
    """Bilinear resampling of the last two axes; output extents round(in * scale)."""
    h, w = x.shape[-2:]
    if size is None:
        if scale is None or scale <= 0:
            raise ValueError("bilinear_resize needs a positive scale or an explicit size")
        size = (int(round(h * scale)), int(round(w * scale)))
    if size[0] <= 0 or size[1] <= 0:
        raise ShapeError(f"bilinear_resize target extent {size} is empty")
    if tuple(size) == (h, w):
        return x
    return BilinearFn.apply(x, size=tuple(size))


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """B x C x H x W -> B x C*r*r x H/r x W/r; channel index c*r*r + i*r + j."""
    b, c, h, w = x.shape
    if h % r or w % r:
        raise ShapeError(f"pixel_unshuffle factor {r} does not divide {h}x{w}")
    y = x.reshape(b, c, h // r, r, w // r, r).permute(0, 1, 3, 5, 2, 4)
    return y.reshape(b, c * r * r, h // r, w // r)


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    b, c, h, w = x.shape
    if c % (r * r):
        raise ShapeError(f"pixel_shuffle factor {r} does not divide {c} channels")
    y = x.reshape(b, c // (r * r), r, r, h, w).permute(0, 1, 4, 2, 5, 3)
    return y.reshape(b, c // (r * r), h * r, w * r)


# ----------------------------------------------------------------------------
# pooling


def pool(x: Tensor, kind: str) -> Tensor:
    """Spatial pools on B x C x H x W.

    gap/gmp reduce both spatial axes (B x C x 1 x 1); gap_w reduces width only
    (B x C x H x 1) and gap_h height only (B x C x 1 x W).
    """
    if kind == "gap":
        return x.mean(axis=(2, 3), keepdims=True)
    if kind == "gmp":
        return x.max(axis=(2, 3), keepdims=True)
    if kind == "gap_w":
        return x.mean(axis=3, keepdims=True)
    if kind == "gap_h":
        return x.mean(axis=2, keepdims=True)
    raise ValueError(f"unknown pool {kind!r}")


def channel_pool(x: Tensor, kind: str) -> Tensor:
    """Collapse the channel axis to one map (mean or max)."""
    return reduce(x, 1, "mean" if kind == "avg" else "max", keepdims=True)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight + bias with weight shaped (D_in, D_out)."""
    y = matmul(x, weight)
    return y if bias is None else y + bias


# ----------------------------------------------------------------------------
# modules


class Module:
    """Container owning named parameters, buffers and child modules.

    Registration order is iteration order, which makes ``state_items`` stable
    across save/load.
    """

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "_children", OrderedDict())
        object.__setattr__(self, "init_specs", OrderedDict())
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Module):
            self._children[name] = value
        elif isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        object.__setattr__(self, name, value)

    def add_param(self, name: str, shape, init: str, rng: np.random.Generator | None = None, fan_in: int | None = None) -> Tensor:
        if init == "uniform":
            bound = math.sqrt(1.0 / fan_in)
            data = rng.uniform(-bound, bound, size=shape)
            spec = f"uniform(+-sqrt(1/{fan_in}))"
        elif init == "zeros":
            data, spec = np.zeros(shape), "zeros"
        elif init == "ones":
            data, spec = np.ones(shape), "ones"
        else:
            raise ValueError(f"unknown init {init!r}")
        t = Tensor(data.astype(default_dtype()), requires_grad=True)
        self.init_specs[name] = spec
        setattr(self, name, t)
        return t

    def add_buffer(self, name: str, value: np.ndarray) -> None:
        value = np.ascontiguousarray(value, dtype=default_dtype())
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(prefix + cname + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_buffers(prefix + cname + ".")

    def state_items(self) -> list[tuple[str, np.ndarray]]:
        """Parameters then buffers, as (name, array) in registration order."""
        items = [(n, p.data) for n, p in self.named_parameters()]
        items += list(self.named_buffers())
        return items

    def load_state(self, items: dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters():
            if name not in items:
                raise KeyError(f"missing parameter {name!r}")
            if items[name].shape != p.shape:
                raise ShapeError(f"parameter {name!r}: stored {items[name].shape} != {p.shape}")
            p.data = np.ascontiguousarray(items[name], dtype=p.dtype)
        for name, b in self.named_buffers():
            if name not in items:
                raise KeyError(f"missing buffer {name!r}")
            b[...] = items[name]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = np.zeros_like(p.data)

    def train(self, mode: bool = True) -> "Module":
        object.__setattr__(self, "training", mode)
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for m in self.modules():
            for name in list(m._buffers):
                arr = m._buffers[name].astype(dtype)
                m._buffers[name] = arr
                object.__setattr__(m, name, arr)
        return self

    def modules(self) -> Iterator["Module"]:
        yield self
        for child in self._children.values():
            yield from child.modules()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Conv2d(Module):
    def __init__(self, in_ch, out_ch, kernel=3, stride=1, padding=None, groups=1, dilation=1, *, rng):
        super().__init__()
        k = (kernel, kernel) if isinstance(kernel, int) else tuple(kernel)
        if padding is None:
            padding = ((k[0] - 1) // 2 * (dilation if isinstance(dilation, int) else dilation[0]),
                       (k[1] - 1) // 2 * (dilation if isinstance(dilation, int) else dilation[1]))
        self.spec = ConvSpec(in_ch, out_ch, k, stride, padding, groups, dilation)
        fan_in = (in_ch // groups) * k[0] * k[1]
        self.add_param("weight", self.spec.weight_shape, "uniform", rng, fan_in)
        self.add_param("bias", (out_ch,), "uniform", rng, fan_in)

    def forward(self, x):
        return conv2d(x, self.weight, self.bias, self.spec)


class StripConv(Module):
    """Depthwise 1 x k followed by depthwise k x 1."""

    def __init__(self, ch, k, *, rng):
        super().__init__()
        if k % 2 == 0:
            raise ShapeError(f"strip convolution needs an odd kernel, got {k}")
        self.k = k
        self.add_param("w_row", (ch, 1, 1, k), "uniform", rng, k)
        self.add_param("b_row", (ch,), "uniform", rng, k)
        self.add_param("w_col", (ch, 1, k, 1), "uniform", rng, k)
        self.add_param("b_col", (ch,), "uniform", rng, k)

    def forward(self, x):
        return strip_conv(x, self.w_row, self.b_row, self.w_col, self.b_col, self.k)


class BatchNorm2d(Module):
    def __init__(self, ch):
        super().__init__()
        self.add_param("gamma", (ch,), "ones")
        self.add_param("beta", (ch,), "zeros")
        self.add_buffer("running_mean", np.zeros(ch))
        self.add_buffer("running_var", np.ones(ch))

    def forward(self, x):
        return batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var, self.training)


class LayerNorm2d(Module):
    def __init__(self, ch):
        super().__init__()
        self.add_param("gamma", (ch,), "ones")
        self.add_param("beta", (ch,), "zeros")

    def forward(self, x):
        return layer_norm(x, self.gamma, self.beta)


class Linear(Module):
    def __init__(self, d_in, d_out, bias=True, *, rng):
        super().__init__()
        self.add_param("weight", (d_in, d_out), "uniform", rng, d_in)
        self.bias = None
        if bias:
            self.add_param("bias", (d_out,), "uniform", rng, d_in)

    def forward(self, x):
        return linear(x, self.weight, self.bias)


class ConvBNReLU(Module):
    def __init__(self, in_ch, out_ch, kernel=3, stride=1, *, rng):
        super().__init__()
        self.conv = Conv2d(in_ch, out_ch, kernel, stride, rng=rng)
        self.bn = BatchNorm2d(out_ch)

    def forward(self, x):
        return relu(self.bn(self.conv(x)))


def concat_channels(*xs: Tensor) -> Tensor:
    return concat(xs, axis=1)

"""Dense tensors with tape-based reverse-mode automatic differentiation.

A :class:`Tensor` wraps a contiguous numpy array. While a :class:`Tape` is
active, every operation whose inputs require gradients appends a node to the
tape. ``loss.backward()`` walks the nodes in reverse append order exactly once;
calling it a second time on the same tape raises :class:`TapeError`.

Typical use::

    with Tape():
        loss = (w * x).sum()
    loss.backward()
    w.grad
"""

from __future__ import annotations

import contextlib
import logging
import threading
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

_state = threading.local()


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


# ----------------------------------------------------------------------------
# precision


def default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _state.dtype = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the dtype new tensors are created with."""
    old = default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = old


# ----------------------------------------------------------------------------
# tape


def _tape_stack() -> list:
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Node:
    __slots__ = ("fn", "inputs", "output")

    def __init__(self, fn: "Function", inputs: tuple, output: "Tensor"):
        self.fn = fn
        self.inputs = inputs
        self.output = output


class Tape:
    """Append-only record of the operations of one forward pass."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise TapeError("tape exited out of order")
        stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: Node) -> None:
        if self.consumed:
            raise TapeError("cannot record onto a tape that has already run backward")
        self.nodes.append(node)

    def gradients(self, loss: "Tensor", wrt: Sequence["Tensor"]) -> list[np.ndarray]:
        """Return d(loss)/d(t) for each t in ``wrt`` (zeros when unreachable).

        Consumes the tape.
        """
        grads = self._run(loss)
        self.nodes = []
        return [grads.get(id(t), np.zeros_like(t.data)) for t in wrt]

    def backward(self, loss: "Tensor") -> None:
        grads = self._run(loss)
        for node in self.nodes:
            for t in node.inputs:
                if t.node is None and t.requires_grad and id(t) in grads:
                    g = grads.pop(id(t))
                    t.grad = g if t.grad is None else t.grad + g
        self.nodes = []

    def _run(self, loss: "Tensor") -> dict[int, np.ndarray]:
        if self.consumed:
            raise TapeError("backward already ran on this tape; record a new forward pass")
        if loss.node is None or loss.node.tape_ref is not self:
            raise TapeError("backward on a tensor that was not recorded on this tape")
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        self.consumed = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.fn.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if gi.shape != t.data.shape:
                    raise ShapeError(
                        f"{type(node.fn).__name__}.backward produced {gi.shape} for input {t.shape}"
                    )
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        return grads


class _NodeRef:
    """Tape back-reference stored on an output tensor."""

    __slots__ = ("tape_ref",)

    def __init__(self, tape: Tape):
        self.tape_ref = tape


# ----------------------------------------------------------------------------
# tensor


def _as_array(data, dtype=None) -> np.ndarray:
    dtype = np.dtype(dtype) if dtype is not None else default_dtype()
    return np.ascontiguousarray(np.asarray(data, dtype=dtype))


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node", "__weakref__")

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node: _NodeRef | None = None

    # --- introspection
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def backward(self) -> None:
        if self.node is None:
            raise TapeError("backward on a detached tensor (no recorded tape)")
        self.node.tape_ref.backward(self)

    # --- arithmetic
    def __add__(self, other):
        return Add.apply(self, other)

    def __radd__(self, other):
        return Add.apply(other, self)

    def __sub__(self, other):
        return Sub.apply(self, other)

    def __rsub__(self, other):
        return Sub.apply(other, self)

    def __mul__(self, other):
        return Mul.apply(self, other)

    def __rmul__(self, other):
        return Mul.apply(other, self)

    def __truediv__(self, other):
        return Div.apply(self, other)

    def __rtruediv__(self, other):
        return Div.apply(other, self)

    def __neg__(self):
        return Neg.apply(self)

    def __pow__(self, exponent: float):
        return Pow.apply(self, exponent=float(exponent))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return GetItem.apply(self, index=index)

    # --- method forms
    def sum(self, axis=None, keepdims: bool = False):
        return reduce(self, axis, "sum", keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return reduce(self, axis, "mean", keepdims)

    def max(self, axis=None, keepdims: bool = False):
        return reduce(self, axis, "max", keepdims)

    def std(self, axis=None, keepdims: bool = False):
        return reduce(self, axis, "std", keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return Permute.apply(self, axes=axes)

    def exp(self):
        return Exp.apply(self)

    def log(self):
        return Log.apply(self)

    def sqrt(self):
        return Pow.apply(self, exponent=0.5)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=default_dtype()), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=default_dtype()), requires_grad=requires_grad)


def _lift(x, like: np.dtype | None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like if like is not None else default_dtype()))


# ----------------------------------------------------------------------------
# function machinery


class Function:
    """A differentiable primitive.

    Subclasses implement ``forward(*arrays, **kw) -> array`` and
    ``backward(grad) -> tuple of arrays (one per input, None allowed)``.
    Anything the backward rule needs is saved on ``self`` during forward.
    """

    def forward(self, *args, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> tuple:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs, **kwargs) -> Tensor:
        dtype = None
        for x in inputs:
            if isinstance(x, Tensor):
                dtype = x.dtype
                break
        tensors = tuple(_lift(x, dtype) for x in inputs)
        fn = cls()
        out_data = fn.forward(*(t.data for t in tensors), **kwargs)
        out = Tensor(np.ascontiguousarray(out_data), dtype=out_data.dtype)
        tape = active_tape()
        if tape is not None and any(t.requires_grad for t in tensors):
            out.requires_grad = True
            out.node = _NodeRef(tape)
            tape.record(Node(fn, tensors, out))
        return out


def broadcast_shape(a: tuple, b: tuple) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"shapes {a} and {b} cannot be broadcast together") from None


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of trailing-dimension broadcasting)."""
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class _Binary(Function):
    def forward(self, a, b):
        broadcast_shape(a.shape, b.shape)
        self.a_shape, self.b_shape = a.shape, b.shape
        return self.compute(a, b)


class Add(_Binary):
    def compute(self, a, b):
        return a + b

    def backward(self, g):
        return unbroadcast(g, self.a_shape), unbroadcast(g, self.b_shape)


class Sub(_Binary):
    def compute(self, a, b):
        return a - b

    def backward(self, g):
        return unbroadcast(g, self.a_shape), unbroadcast(-g, self.b_shape)


class Mul(_Binary):
    def compute(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, g):
        return unbroadcast(g * self.b, self.a_shape), unbroadcast(g * self.a, self.b_shape)


class Div(_Binary):
    def compute(self, a, b):
        self.a, self.b = a, b
        return a / b

    def backward(self, g):
        ga = g / self.b
        gb = -g * self.a / (self.b * self.b)
        return unbroadcast(ga, self.a_shape), unbroadcast(gb, self.b_shape)


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, g):
        return (-g,)


class Pow(Function):
    def forward(self, a, exponent):
        self.a, self.p = a, exponent
        self.out = np.power(a, exponent)
        return self.out

    def backward(self, g):
        if self.p == 0.5:
            with np.errstate(divide="ignore", invalid="ignore"):
                d = np.where(self.out > 0, 0.5 / self.out, 0.0)
        else:
            d = self.p * np.power(self.a, self.p - 1)
        return (g * d,)


class Exp(Function):
    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, g):
        return (g * self.out,)


class Log(Function):
    def forward(self, a):
        self.a = a
        return np.log(a)

    def backward(self, g):
        return (g / self.a,)


class Relu(Function):
    def forward(self, a):
        self.mask = a > 0
        return np.where(self.mask, a, 0).astype(a.dtype)

    def backward(self, g):
        return (g * self.mask,)


class Sigmoid(Function):
    def forward(self, a):
        # stable for large |a|
        e = np.exp(-np.abs(a))
        self.out = np.where(a >= 0, 1 / (1 + e), e / (1 + e)).astype(a.dtype)
        return self.out

    def backward(self, g):
        return (g * self.out * (1 - self.out),)


class HardSigmoid(Function):
    def forward(self, a):
        self.inside = (a > -3) & (a < 3)
        return np.clip(a / 6 + 0.5, 0, 1).astype(a.dtype)

    def backward(self, g):
        return (g * self.inside / 6,)


class Softplus(Function):
    def forward(self, a):
        self.a = a
        return (np.maximum(a, 0) + np.log1p(np.exp(-np.abs(a)))).astype(a.dtype)

    def backward(self, g):
        e = np.exp(-np.abs(self.a))
        sig = np.where(self.a >= 0, 1 / (1 + e), e / (1 + e))
        return (g * sig,)


class Phi(Function):
    """Positive feature map: x + 1 for x >= 0, exp(x) otherwise."""

    def forward(self, a):
        self.neg = a < 0
        self.e = np.exp(np.minimum(a, 0))
        return np.where(self.neg, self.e, a + 1).astype(a.dtype)

    def backward(self, g):
        return (g * np.where(self.neg, self.e, 1),)


class Softmax(Function):
    def forward(self, a, axis):
        self.axis = axis
        z = np.exp(a - a.max(axis=axis, keepdims=True))
        self.out = z / z.sum(axis=axis, keepdims=True)
        return self.out

    def backward(self, g):
        y = self.out
        return (y * (g - (g * y).sum(axis=self.axis, keepdims=True)),)


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


class Reduce(Function):
    def forward(self, a, axes, kind, keepdims):
        if any(a.shape[ax] == 0 for ax in axes):
            raise ShapeError(f"empty reduction extent in shape {a.shape} over axes {axes}")
        self.a, self.axes, self.kind, self.keepdims = a, axes, kind, keepdims
        self.count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
        if kind == "sum":
            out = a.sum(axis=axes, keepdims=True)
        elif kind == "mean":
            out = a.sum(axis=axes, keepdims=True) / self.count
        elif kind == "max":
            out = a.max(axis=axes, keepdims=True)
        elif kind == "std":
            self.mu = a.sum(axis=axes, keepdims=True) / self.count
            var = ((a - self.mu) ** 2).sum(axis=axes, keepdims=True) / self.count
            out = np.sqrt(var)
        else:
            raise ValueError(f"unknown reduction {kind!r}")
        self.out_keep = out
        return out if keepdims else out.reshape([n for i, n in enumerate(a.shape) if i not in axes])

    def backward(self, g):
        gk = g.reshape(self.out_keep.shape)
        a = self.a
        if self.kind == "sum":
            return (np.broadcast_to(gk, a.shape).copy(),)
        if self.kind == "mean":
            return (np.broadcast_to(gk / self.count, a.shape).copy(),)
        if self.kind == "max":
            # ties share the gradient equally
            mask = a == self.out_keep
            return (gk * mask / mask.sum(axis=self.axes, keepdims=True),)
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(self.out_keep > 0, (a - self.mu) / (self.count * self.out_keep), 0.0)
        return ((gk * d).astype(a.dtype),)


def reduce(a: Tensor, axis=None, kind: str = "sum", keepdims: bool = False) -> Tensor:
    """Reduce over ``axis`` with ``kind`` in sum|mean|max|std (std is population)."""
    a = _lift(a, None)
    return Reduce.apply(a, axes=_norm_axes(axis, a.ndim), kind=kind, keepdims=keepdims)


class MatMul(Function):
    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
        broadcast_shape(a.shape[:-2], b.shape[:-2])
        self.a, self.b = a, b
        return np.matmul(a, b)

    def backward(self, g):
        ga = np.matmul(g, np.swapaxes(self.b, -1, -2))
        gb = np.matmul(np.swapaxes(self.a, -1, -2), g)
        return unbroadcast(ga, self.a.shape), unbroadcast(gb, self.b.shape)


def matmul(a, b) -> Tensor:
    return MatMul.apply(a, b)


class Reshape(Function):
    def forward(self, a, shape):
        self.in_shape = a.shape
        try:
            return a.reshape(shape)
        except ValueError:
            raise ShapeError(f"cannot reshape {a.shape} into {tuple(shape)}") from None

    def backward(self, g):
        return (g.reshape(self.in_shape),)


class Permute(Function):
    def forward(self, a, axes):
        if sorted(axes) != list(range(a.ndim)):
            raise ShapeError(f"{axes} is not a permutation of {a.ndim} axes")
        self.inv = tuple(np.argsort(axes))
        return a.transpose(axes)

    def backward(self, g):
        return (g.transpose(self.inv),)


class GetItem(Function):
    def forward(self, a, index):
        self.shape, self.index, self.dtype = a.shape, index, a.dtype
        return np.array(a[index])

    def backward(self, g):
        out = np.zeros(self.shape, dtype=self.dtype)
        np.add.at(out, self.index, g)
        return (out,)


class Concat(Function):
    def forward(self, *arrays, axis):
        self.axis = axis
        self.sizes = [x.shape[axis] for x in arrays]
        try:
            return np.concatenate(arrays, axis=axis)
        except ValueError:
            raise ShapeError(f"cannot concatenate shapes {[x.shape for x in arrays]} on axis {axis}") from None

    def backward(self, g):
        cuts = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(g, cuts, axis=self.axis))


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def split(a: Tensor, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    if sum(sizes) != a.shape[axis]:
        raise ShapeError(f"split sizes {list(sizes)} do not cover extent {a.shape[axis]}")
    parts, start = [], 0
    for n in sizes:
        idx = [slice(None)] * a.ndim
        idx[axis] = slice(start, start + n)
        parts.append(a[tuple(idx)])
        start += n
    return parts


def split_ratio(a: Tensor, ratio: float = 0.25, axis: int = 1) -> tuple[Tensor, Tensor]:
    """Split channels into round(C*ratio) and the remainder.

    Halves round up (``floor(C*ratio + 0.5)``), the remainder goes to the
    second part.
    """
    c = a.shape[axis]
    if c < 4:
        raise ShapeError(f"partial split needs at least 4 channels, got {c}")
    k = int(np.floor(c * ratio + 0.5))
    first, second = split(a, [k, c - k], axis=axis)
    return first, second


def elementwise(kind: str, a, b) -> Tensor:
    ops = {"add": Add, "sub": Sub, "mul": Mul, "div": Div}
    if kind not in ops:
        raise ValueError(f"unknown elementwise op {kind!r}")
    return ops[kind].apply(a, b)


def stack_grads(tensors: Sequence[Tensor]) -> list[np.ndarray]:
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]


def grad(loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Functional gradient of ``loss`` with respect to ``wrt``; consumes the tape."""
    if loss.node is None:
        raise TapeError("backward on a detached tensor (no recorded tape)")
    return loss.node.tape_ref.gradients(loss, wrt)

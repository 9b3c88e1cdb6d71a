"""Brute-force reference implementations.

Everything here is written with explicit loops over plain numpy arrays and
shares no code with the operators it checks. The oracles are slow on purpose
and meant for float64 inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor, TapeError


@dataclass
class OracleReport:
    op: str
    max_abs: float
    max_rel: float
    tol: float
    passed: bool

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"check {self.op} max_abs {self.max_abs:.3e} max_rel {self.max_rel:.3e} tol {self.tol:.0e} {status}"


def compare(op: str, got, want, tol: float, relative: bool = False) -> OracleReport:
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    if got.shape != want.shape:
        raise ValueError(f"{op}: shape {got.shape} != oracle shape {want.shape}")
    diff = np.abs(got - want)
    max_abs = float(diff.max()) if diff.size else 0.0
    scale = max(float(np.abs(got).max(initial=0)), float(np.abs(want).max(initial=0)), 1e-12)
    max_rel = max_abs / scale
    return OracleReport(op, max_abs, max_rel, tol, (max_rel if relative else max_abs) < tol)


# ----------------------------------------------------------------------------
# basic arithmetic


def matmul_oracle(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def sum_rows_oracle(a: np.ndarray) -> np.ndarray:
    out = np.zeros(a.shape[0])
    for i in range(a.shape[0]):
        acc = 0.0
        for j in range(a.shape[1]):
            acc += a[i, j]
        out[i] = acc
    return out


def broadcast_mul_oracle(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """a: I x J x K, b: 1 x J x 1."""
    out = np.zeros(a.shape)
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            for k in range(a.shape[2]):
                out[i, j, k] = a[i, j, k] * b[0, j, 0]
    return out


# ----------------------------------------------------------------------------
# convolution


def direct_conv_oracle(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride=(1, 1), padding=(0, 0),
                       groups: int = 1, dilation=(1, 1)) -> np.ndarray:
    bsz, c, h, wd = x.shape
    o, cg, kh, kw = w.shape
    sh, sw = stride
    ph, pw = padding
    dh, dw = dilation
    ho = (h + 2 * ph - dh * (kh - 1) - 1) // sh + 1
    wo = (wd + 2 * pw - dw * (kw - 1) - 1) // sw + 1
    og = o // groups
    out = np.zeros((bsz, o, ho, wo))
    for n in range(bsz):
        for oc in range(o):
            g = oc // og
            for y in range(ho):
                for xx in range(wo):
                    acc = b[oc]
                    for ci in range(cg):
                        for i in range(kh):
                            for j in range(kw):
                                r = y * sh - ph + i * dh
                                s = xx * sw - pw + j * dw
                                if 0 <= r < h and 0 <= s < wd:
                                    acc += x[n, g * cg + ci, r, s] * w[oc, ci, i, j]
                    out[n, oc, y, xx] = acc
    return out


def strip_dense_oracle(x, w_row, b_row, w_col, b_col) -> np.ndarray:
    """Dense k x k depthwise conv with kernel outer(col, row), plus the two biases as the strips see them."""
    bsz, c, h, wd = x.shape
    k = w_row.shape[-1]
    p = (k - 1) // 2
    dense = np.zeros((c, 1, k, k))
    for ch in range(c):
        for i in range(k):
            for j in range(k):
                dense[ch, 0, i, j] = w_col[ch, 0, i, 0] * w_row[ch, 0, 0, j]
    out = direct_conv_oracle(x, dense, np.zeros(c), padding=(p, p), groups=c)
    # row bias survives only where the column taps land inside the image
    for ch in range(c):
        for y in range(h):
            valid = 0.0
            for i in range(k):
                if 0 <= y - p + i < h:
                    valid += w_col[ch, 0, i, 0]
            out[:, ch, y, :] += b_row[ch] * valid + b_col[ch]
    return out


def bilinear_oracle(x: np.ndarray, ho: int, wo: int) -> np.ndarray:
    """Per-pixel half-pixel bilinear formula on the last two axes."""
    h, w = x.shape[-2:]
    out = np.zeros(x.shape[:-2] + (ho, wo))

    def src(i, n_in, n_out):
        s = (i + 0.5) * n_in / n_out - 0.5
        s = max(s, 0.0)
        i0 = min(int(math.floor(s)), n_in - 1)
        return i0, min(i0 + 1, n_in - 1), s - i0

    for y in range(ho):
        y0, y1, ly = src(y, h, ho)
        for xx in range(wo):
            x0, x1, lx = src(xx, w, wo)
            out[..., y, xx] = ((1 - ly) * ((1 - lx) * x[..., y0, x0] + lx * x[..., y0, x1])
                               + ly * ((1 - lx) * x[..., y1, x0] + lx * x[..., y1, x1]))
    return out


def gap_w_oracle(x: np.ndarray) -> np.ndarray:
    b, c, h, w = x.shape
    out = np.zeros((b, c, h, 1))
    for n in range(b):
        for ch in range(c):
            for y in range(h):
                acc = 0.0
                for xx in range(w):
                    acc += x[n, ch, y, xx]
                out[n, ch, y, 0] = acc / w
    return out


def batch_stats_oracle(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and population variance over batch and space."""
    b, c, h, w = x.shape
    mean, var = np.zeros(c), np.zeros(c)
    for ch in range(c):
        acc = 0.0
        for n in range(b):
            for y in range(h):
                for xx in range(w):
                    acc += x[n, ch, y, xx]
        mean[ch] = acc / (b * h * w)
        acc = 0.0
        for n in range(b):
            for y in range(h):
                for xx in range(w):
                    acc += (x[n, ch, y, xx] - mean[ch]) ** 2
        var[ch] = acc / (b * h * w)
    return mean, var


# ----------------------------------------------------------------------------
# attention


def _phi_scalar(v: float) -> float:
    return v + 1.0 if v >= 0 else math.exp(v)


def softmax_attention_oracle(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Quadratic softmax attention with an explicit row softmax (no scaling)."""
    logits = q @ k.T
    logits = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    attn = e / e.sum(axis=1, keepdims=True)
    return attn @ v


def softmax_attention_matrix(q: np.ndarray, k: np.ndarray) -> np.ndarray:
    logits = q @ k.T
    logits = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=1, keepdims=True)


def sla_oracle(q: np.ndarray, k: np.ndarray, v: np.ndarray, return_weights: bool = False):
    """Literal double loop: li = phi(q_i).phi(k_j), out_i = sum_j (alpha li - beta) v_j.

    ``q`` and ``k`` are raw projections; the feature map is applied here.
    """
    n, d = q.shape
    fq = [[_phi_scalar(q[i, t]) for t in range(d)] for i in range(n)]
    fk = [[_phi_scalar(k[j, t]) for t in range(d)] for j in range(n)]
    out = np.zeros((n, v.shape[1]))
    weights = np.zeros((n, n))
    for i in range(n):
        li = []
        for j in range(n):
            acc = 0.0
            for t in range(d):
                acc += fq[i][t] * fk[j][t]
            li.append(acc)
        total = sum(li)
        alpha = 1.0 + 1.0 / total
        beta = total / n
        for j in range(n):
            weights[i, j] = alpha * li[j] - beta
            out[i] += weights[i, j] * v[j]
    return (out, weights) if return_weights else out


# ----------------------------------------------------------------------------
# selective scan


def sequential_scan_oracle(u, delta, A, Bm, Cm, D) -> np.ndarray:
    """Step-by-step recurrence with an explicit state vector per (batch, channel)."""
    b, L, d = u.shape
    n = A.shape[1]
    y = np.zeros((b, L, d))
    for bi in range(b):
        for c in range(d):
            h = [0.0] * n
            for t in range(L):
                acc = 0.0
                for s in range(n):
                    h[s] = math.exp(delta[bi, t, c] * A[c, s]) * h[s] + delta[bi, t, c] * Bm[bi, t, s] * u[bi, t, c]
                    acc += Cm[bi, t, s] * h[s]
                y[bi, t, c] = acc + D[c] * u[bi, t, c]
    return y


def scan_orders_oracle(h: int, w: int) -> list[list[tuple[int, int]]]:
    """The four traversal orders as explicit (row, col) lists."""
    tl_br = [(r, c) for r in range(h) for c in range(w)]
    tr_bl = [(r, c) for r in range(h) for c in range(w - 1, -1, -1)]
    return [tl_br, tl_br[::-1], tr_bl, tr_bl[::-1]]


def scan_2d_oracle(x: np.ndarray, project: Callable, A: np.ndarray, D: np.ndarray) -> np.ndarray:
    """Four explicit index-order scans, each mapped back to its pixels and summed.

    ``project(seq)`` maps a B x L x C sequence to (delta, B, C) arrays.
    """
    b, c, h, w = x.shape
    out = np.zeros(x.shape)
    for order in scan_orders_oracle(h, w):
        seq = np.stack([x[:, :, r, cc] for r, cc in order], axis=1)  # B x L x C
        delta, Bm, Cm = project(seq)
        y = sequential_scan_oracle(seq, delta, A, Bm, Cm, D)
        for t, (r, cc) in enumerate(order):
            out[:, :, r, cc] += y[:, t]
    return out


# ----------------------------------------------------------------------------
# gradients


def finite_difference_gradient(f: Callable[[], float], x: np.ndarray, h: float = 1e-5,
                               coords: Sequence[tuple] | None = None) -> np.ndarray:
    """Central differences of scalar ``f`` with respect to ``x`` (perturbed in place).

    When ``coords`` is given only those entries are estimated; the rest stay 0.
    """
    grad = np.zeros(x.shape)
    idx_iter = coords if coords is not None else list(np.ndindex(*x.shape))
    for idx in idx_iter:
        orig = x[idx]
        x[idx] = orig + h
        fp = _scalar(f())
        x[idx] = orig - h
        fm = _scalar(f())
        x[idx] = orig
        grad[idx] = (fp - fm) / (2 * h)
    return grad


def _scalar(v) -> float:
    if isinstance(v, Tensor):
        v = v.data
    arr = np.asarray(v)
    if arr.size != 1:
        raise ValueError(f"finite differences need a scalar function, got shape {arr.shape}")
    return float(arr.reshape(-1)[0])


def gradcheck(name: str, fn: Callable[[], Tensor], targets: Sequence[Tensor], tol: float = 1e-4,
              h: float = 1e-5, samples: int = 12, seed: int = 0) -> OracleReport:
    """Analytic tape gradients vs central differences for ``sum(fn() * R)``.

    ``R`` is a fixed random projection, so every output element is weighted.
    For each target up to ``samples`` coordinates are checked. The relative
    error is max |analytic - numeric| over all sampled coordinates divided by
    the larger infinity norm of the two pooled gradient samples (floored at
    1e-6). Pooling keeps targets whose true gradient vanishes (a bias feeding
    batch norm) from turning difference roundoff into a spurious failure.
    """
    rng = np.random.default_rng(seed)
    with Tape() as tape:
        out = fn()
        proj = Tensor(rng.standard_normal(out.shape), dtype=out.dtype)
        loss = (out * proj).sum()
    if out.node is None:
        raise TapeError(f"{name}: output not recorded; do the targets require grad?")
    analytic = tape.gradients(loss, targets)

    def f():
        return float((fn().data * proj.data).sum())

    a_all, n_all = [], []
    for t, a in zip(targets, analytic):
        flat = rng.choice(t.size, size=min(samples, t.size), replace=False)
        coords = [np.unravel_index(i, t.shape) for i in flat]
        num = finite_difference_gradient(f, t.data, h, coords)
        a_all.extend(a[c] for c in coords)
        n_all.extend(num[c] for c in coords)
    a_s, n_s = np.array(a_all), np.array(n_all)
    worst_abs = float(np.abs(a_s - n_s).max())
    scale = max(float(np.abs(a_s).max()), float(np.abs(n_s).max()), 1e-6)
    worst_rel = worst_abs / scale
    return OracleReport(f"grad:{name}", worst_abs, worst_rel, tol, worst_rel < tol)


# ----------------------------------------------------------------------------
# losses, metrics, optimizer


def focal_oracle(probs: np.ndarray, labels: np.ndarray, gamma: float, delta: float) -> float:
    b, k, h, w = probs.shape
    total = 0.0
    for n in range(b):
        for y in range(h):
            for x in range(w):
                c = int(labels[n, y, x])
                p = probs[n, c, y, x]
                weight = (1 - gamma) if c == 0 else gamma
                total += -weight * (1 - p) ** delta * math.log(p)
    return total / (b * h * w)


def dice_oracle(probs: np.ndarray, labels: np.ndarray, eps: float) -> float:
    b, k, h, w = probs.shape
    acc = 0.0
    for c in range(k):
        inter, denom = 0.0, 0.0
        for n in range(b):
            for y in range(h):
                for x in range(w):
                    p = probs[n, c, y, x]
                    g = 1.0 if labels[n, y, x] == c else 0.0
                    inter += p * g
                    denom += p * p + g * g
        acc += 1 - (2 * inter + eps) / (denom + eps)
    return acc / k


def confusion_oracle(pred: np.ndarray, gt: np.ndarray, k: int = 4) -> np.ndarray:
    cm = np.zeros((k, k), dtype=np.int64)
    for p, g in zip(pred.reshape(-1), gt.reshape(-1)):
        cm[int(g), int(p)] += 1
    return cm


def adam_scalar_oracle(theta: float, grads: Sequence[float], lr: float, beta1: float = 0.9,
                       beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0) -> list[float]:
    m = v = 0.0
    trace = []
    for t, g in enumerate(grads, start=1):
        theta = theta * (1 - lr * weight_decay)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mhat = m / (1 - beta1**t)
        vhat = v / (1 - beta2**t)
        theta = theta - lr * mhat / (math.sqrt(vhat) + eps)
        trace.append(theta)
    return trace

"""Dense-array primitives and layers with explicit backward passes.

Arrays are plain numpy ndarrays. Two layouts are used throughout the
package: feature volumes are channels-last ``[T, H, W, C]`` and radar
input / convolution operands are channels-first ``[C, T, H, W]``.

Every layer caches what it needs during ``forward`` and accumulates
parameter gradients during ``backward``. A layer is called at most once
per forward pass, so the network is a static graph and no tape is kept.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf, expit

BCE_EPS = 1e-7
INIT_STD = 0.02

# cap on im2col scratch (elements) per conv chunk
_CONV_CHUNK_ELEMS = 1 << 24


class ShapeError(ValueError):
    """Operand extents are incompatible."""


# ---------------------------------------------------------------------------
# functional primitives


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        return a @ b
    except ValueError as exc:  # leading axes fail to broadcast
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from exc


def softmax(x: np.ndarray, axis: int = -1, inplace: bool = False) -> np.ndarray:
    """Max-subtracted softmax. Rows that are entirely ``-inf`` yield zeros."""
    m = np.max(x, axis=axis, keepdims=True)
    m[~np.isfinite(m)] = 0
    e = np.subtract(x, m, out=x if inplace else None)
    np.exp(e, out=e)
    s = e.sum(axis=axis, keepdims=True)
    s[s == 0] = 1
    e /= s
    return e


def softmax_backward(y: np.ndarray, dy: np.ndarray, axis: int = -1) -> np.ndarray:
    return y * (dy - np.sum(dy * y, axis=axis, keepdims=True))


def layer_norm(x, gain, bias, eps: float = 1e-5):
    """Normalize over the last (channel) axis. Returns ``(y, cache)``."""
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gain + bias, (xhat, rstd)


def layer_norm_backward(dy, cache, gain):
    xhat, rstd = cache
    dxhat = dy * gain
    dx = rstd * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True)
    )
    lead = tuple(range(dy.ndim - 1))
    return dx, np.sum(dy * xhat, axis=lead), np.sum(dy, axis=lead)


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def gelu_backward(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    return dy * (cdf + x * pdf)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


def sigmoid_backward(y: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return dy * y * (1.0 - y)


def _reduce(values: np.ndarray, reduction: str) -> float:
    if reduction == "sum":
        return float(np.sum(values, dtype=np.float64))
    if reduction == "mean":
        return float(np.mean(values, dtype=np.float64))
    raise ValueError(f"unknown reduction {reduction!r}")


def bce(pred, target, reduction: str = "sum", eps: float = BCE_EPS) -> float:
    """Binary cross entropy on probabilities.

    Each log argument is floored at ``eps`` so saturated predictions stay
    finite while a perfect prediction still scores exactly zero.
    """
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeError(f"bce: prediction {pred.shape} vs target {target.shape}")
    p = pred.astype(np.float64)
    t = target.astype(np.float64)
    log_p = np.log(np.clip(p, eps, 1.0))
    log_q = np.log(np.clip(1.0 - p, eps, 1.0))
    return _reduce(-(t * log_p + (1.0 - t) * log_q), reduction)


def bce_backward(pred, target, reduction: str = "sum", eps: float = BCE_EPS) -> np.ndarray:
    if pred.shape != target.shape:
        raise ShapeError(f"bce: prediction {pred.shape} vs target {target.shape}")
    p = pred
    q = 1.0 - pred
    grad = np.where(p > eps, -target / np.maximum(p, eps), 0.0)
    grad = grad + np.where(q > eps, (1.0 - target) / np.maximum(q, eps), 0.0)
    if reduction == "mean":
        grad = grad / pred.size
    return grad.astype(pred.dtype, copy=False)


def bce_logit_grad(pred, target, reduction: str = "sum") -> np.ndarray:
    """Gradient of :func:`bce` with respect to the logits behind ``pred = sigmoid(z)``.

    This is ``pred - target`` without the floor, so cells whose prediction
    has saturated past ``eps`` keep a gradient pointing back toward the target.
    """
    if pred.shape != target.shape:
        raise ShapeError(f"bce: prediction {pred.shape} vs target {target.shape}")
    grad = pred - target
    if reduction == "mean":
        grad = grad / pred.size
    return grad.astype(pred.dtype, copy=False)


def upsample_nearest(x: np.ndarray, factors: Sequence[int]) -> np.ndarray:
    """Replicate every cell ``factors[i]`` times along axis ``i``."""
    if len(factors) > x.ndim:
        raise ShapeError(f"upsample: {len(factors)} factors for rank {x.ndim}")
    for axis, f in enumerate(factors):
        if f != 1:
            x = np.repeat(x, int(f), axis=axis)
    return x


def upsample_nearest_backward(dy: np.ndarray, factors: Sequence[int]) -> np.ndarray:
    for axis, f in enumerate(factors):
        if f != 1:
            shape = dy.shape[:axis] + (dy.shape[axis] // f, f) + dy.shape[axis + 1:]
            dy = dy.reshape(shape).sum(axis=axis + 1)
    return dy


def _conv_out(n, k, s, p):
    return (n + 2 * p - k) // s + 1


def _im2col(xp, kernel, stride, t0, t1):
    """Columns for output frames ``t0:t1``: ``[(t1-t0)*Ho*Wo, C*kT*kH*kW]``."""
    kt, kh, kw = kernel
    st, sh, sw = stride
    sub = xp[:, t0 * st: (t1 - 1) * st + kt]
    win = sliding_window_view(sub, (kt, kh, kw), axis=(1, 2, 3))[:, ::st, ::sh, ::sw]
    c = win.shape[0]
    cols = win.transpose(1, 2, 3, 0, 4, 5, 6)
    return cols.reshape(-1, c * kt * kh * kw)


def _frame_chunk(out_hw: int, cols: int) -> int:
    return max(1, _CONV_CHUNK_ELEMS // max(1, out_hw * cols))


def conv3d(x, weight, bias=None, stride=(1, 1, 1), padding=(0, 0, 0)):
    """3D cross-correlation, ``x`` [C_in,T,H,W] and ``weight`` [C_out,C_in,kT,kH,kW]."""
    if x.ndim != 4 or weight.ndim != 5 or x.shape[0] != weight.shape[1]:
        raise ShapeError(f"conv3d: input {x.shape} vs kernel {weight.shape}")
    c_out = weight.shape[0]
    kernel = weight.shape[2:]
    padded = [n + 2 * p for n, p in zip(x.shape[1:], padding)]
    if any(k > n for k, n in zip(kernel, padded)):
        raise ShapeError(f"conv3d: kernel {tuple(kernel)} larger than padded input {tuple(padded)}")
    to, ho, wo = (_conv_out(n, k, s, p) for n, k, s, p in zip(x.shape[1:], kernel, stride, padding))
    pt, ph, pw = padding
    xp = np.pad(x, ((0, 0), (pt, pt), (ph, ph), (pw, pw)))
    wmat = weight.reshape(c_out, -1).T
    out = np.empty((to, ho, wo, c_out), dtype=np.result_type(x, weight))
    step = _frame_chunk(ho * wo, wmat.shape[0])
    for t0 in range(0, to, step):
        t1 = min(to, t0 + step)
        cols = _im2col(xp, kernel, stride, t0, t1)
        out[t0:t1] = np.dot(cols, wmat).reshape(t1 - t0, ho, wo, c_out)
    if bias is not None:
        out += bias
    return out.transpose(3, 0, 1, 2)


def conv3d_backward(dy, x, weight, stride, padding, input_grad=True):
    """Returns ``(dx, dweight, dbias)`` for :func:`conv3d`; ``dx`` is None if not requested."""
    c_out, c_in = weight.shape[:2]
    kt, kh, kw = weight.shape[2:]
    st, sh, sw = stride
    pt, ph, pw = padding
    _, to, ho, wo = dy.shape
    xp = np.pad(x, ((0, 0), (pt, pt), (ph, ph), (pw, pw)))
    wmat = weight.reshape(c_out, -1)
    dy_cl = dy.transpose(1, 2, 3, 0)
    dw = np.zeros_like(wmat)
    dxp = np.zeros_like(xp)
    step = _frame_chunk(ho * wo, wmat.shape[1])
    for t0 in range(0, to, step):
        t1 = min(to, t0 + step)
        cols = _im2col(xp, weight.shape[2:], stride, t0, t1)
        g = dy_cl[t0:t1].reshape(-1, c_out)
        dw += g.T @ cols
        if not input_grad:
            continue
        dcols = (g @ wmat).reshape(t1 - t0, ho, wo, c_in, kt, kh, kw)
        dcols = dcols.transpose(3, 4, 5, 6, 0, 1, 2)
        base = t0 * st
        for i in range(kt):
            for j in range(kh):
                for k in range(kw):
                    dxp[:, base + i: base + i + st * (t1 - t0): st,
                        j: j + sh * ho: sh,
                        k: k + sw * wo: sw] += dcols[:, i, j, k]
    dx = dxp[:, pt: pt + x.shape[1], ph: ph + x.shape[2], pw: pw + x.shape[3]] if input_grad else None
    return dx, dw.reshape(weight.shape), dy.sum(axis=(1, 2, 3))


# ---------------------------------------------------------------------------
# parameters and layers


@dataclass(eq=False)
class Parameter:
    value: np.ndarray
    name: str = ""
    grad: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.grad = np.zeros_like(self.value)

    def zero_grad(self) -> None:
        self.grad[...] = 0


def trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD, dtype=np.float32) -> np.ndarray:
    """Zero-mean normal truncated (by redrawing) at two standard deviations."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(dtype)


class Module:
    """Container base: finds Parameters and sub-Modules among attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in vars(self).items():
            if isinstance(val, Parameter):
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{key}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def assign_names(self) -> None:
        for name, p in self.named_parameters():
            p.name = name

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    """Affine map on the last axis; weight stored ``[in, out]``."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype=np.float32):
        self.weight = Parameter(trunc_normal(rng, (d_in, d_out), dtype=dtype))
        self.bias = Parameter(np.zeros(d_out, dtype=dtype))
        self._x = None

    def forward(self, x):
        if x.shape[-1] != self.weight.value.shape[0]:
            raise ShapeError(f"linear: input {x.shape} vs weight {self.weight.value.shape}")
        self._x = x
        return x @ self.weight.value + self.bias.value

    def backward(self, dy):
        x2 = self._x.reshape(-1, self._x.shape[-1])
        dy2 = dy.reshape(-1, dy.shape[-1])
        self.weight.grad += x2.T @ dy2
        self.bias.grad += dy2.sum(axis=0)
        return dy @ self.weight.value.T


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5, dtype=np.float32):
        self.gain = Parameter(np.ones(dim, dtype=dtype))
        self.bias = Parameter(np.zeros(dim, dtype=dtype))
        self.eps = eps
        self._cache = None

    def forward(self, x):
        y, self._cache = layer_norm(x, self.gain.value, self.bias.value, self.eps)
        return y

    def backward(self, dy):
        dx, dg, db = layer_norm_backward(dy, self._cache, self.gain.value)
        self.gain.grad += dg
        self.bias.grad += db
        return dx


class FFN(Module):
    """Linear -> GELU -> Linear with hidden width ``ratio * dim``."""

    def __init__(self, dim: int, rng, ratio: int = 4, dtype=np.float32):
        self.fc1 = Linear(dim, ratio * dim, rng, dtype)
        self.fc2 = Linear(ratio * dim, dim, rng, dtype)
        self._h = None

    def forward(self, x):
        self._h = self.fc1(x)
        return self.fc2(gelu(self._h))

    def backward(self, dy):
        return self.fc1.backward(gelu_backward(self._h, self.fc2.backward(dy)))


class Conv3d(Module):
    """Channels-first 3D convolution layer."""

    def __init__(self, c_in, c_out, kernel, rng, stride=(1, 1, 1), padding=None, dtype=np.float32,
                 input_grad=True):
        kernel = tuple(kernel)
        self.input_grad = input_grad
        self.stride = tuple(stride)
        self.padding = tuple(padding) if padding is not None else tuple(k // 2 for k in kernel)
        self.weight = Parameter(trunc_normal(rng, (c_out, c_in) + kernel, dtype=dtype))
        self.bias = Parameter(np.zeros(c_out, dtype=dtype))
        self._x = None

    def out_extents(self, extents):
        k = self.weight.value.shape[2:]
        return tuple(_conv_out(n, kk, s, p) for n, kk, s, p in zip(extents, k, self.stride, self.padding))

    def forward(self, x):
        self._x = x
        return conv3d(x, self.weight.value, self.bias.value, self.stride, self.padding)

    def backward(self, dy):
        dx, dw, db = conv3d_backward(dy, self._x, self.weight.value, self.stride, self.padding,
                                     input_grad=self.input_grad)
        self.weight.grad += dw
        self.bias.grad += db
        return dx


# ---------------------------------------------------------------------------
# optimization


class Adam:
    def __init__(self, params: Sequence[Parameter], lr: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        b1, b2 = self.betas
        self.step_count += 1
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------------------
# finite-difference oracle


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    tolerance: float
    nonfinite: list[str] = field(default_factory=list)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def worst(self) -> str | None:
        if self.nonfinite:
            return self.nonfinite[0]
        if not self.errors:
            return None
        return max(self.errors, key=self.errors.get)

    @property
    def passed(self) -> bool:
        return not self.nonfinite and self.max_error < self.tolerance


def grad_check(
    loss_fn: Callable[[bool], float],
    params: Sequence[Parameter],
    h: float = 1e-5,
    tol: float = 1e-4,
    max_entries: int | None = None,
    seed: int = 0,
    floor: float = 1e-5,
) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    ``loss_fn(True)`` must run forward and backward (gradients are zeroed
    beforehand); ``loss_fn(False)`` only evaluates the loss. The error of a
    parameter block is ``max|a - n| / max(max|a|, max|n|, floor * max(1, |f|))``
    over the checked entries, so it is relative to the block's gradient
    scale; the floor, which tracks the loss magnitude like the rounding
    error of the differences does, keeps blocks whose true gradient is zero
    from dividing noise by noise. At most
    ``max_entries`` randomly chosen entries per block are perturbed.
    """
    rng = np.random.default_rng(seed)
    for p in params:
        p.zero_grad()
    f0 = loss_fn(True)
    analytic = [p.grad.copy() for p in params]
    floor = floor * max(1.0, abs(f0))
    report = GradCheckReport(errors={}, tolerance=tol)
    for idx, (p, a) in enumerate(zip(params, analytic)):
        name = p.name or f"param{idx}"
        if not np.all(np.isfinite(a)):
            report.nonfinite.append(name)
            continue
        flat = p.value.reshape(-1)
        entries = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            entries = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        num = np.empty(len(entries))
        for j, e in enumerate(entries):
            orig = flat[e]
            flat[e] = orig + h
            fp = loss_fn(False)
            flat[e] = orig - h
            fm = loss_fn(False)
            flat[e] = orig
            num[j] = (fp - fm) / (2 * h)
        an = a.reshape(-1)[entries]
        scale = max(np.max(np.abs(an)), np.max(np.abs(num)), floor)
        report.errors[name] = float(np.max(np.abs(an - num)) / scale)
    return report

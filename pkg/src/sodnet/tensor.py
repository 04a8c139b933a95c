"""Dense tensors with tape-based reverse-mode differentiation.

Every primitive below computes its forward value with numpy and, when a
:class:`Tape` is active and some input requires a gradient, appends a record
holding a closure that maps the output gradient to input gradients.
``Tape.backward`` replays the records in exact reverse order.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

_DTYPE = np.float64
_TAPES: list["Tape"] = []


class NumericalError(ArithmeticError):
    """Raised when an operation produces NaN or Inf."""


class DimensionError(ValueError):
    """Raised on incompatible tensor shapes."""


def set_default_dtype(dtype) -> None:
    global _DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DTYPE = dtype


def get_default_dtype():
    return _DTYPE


class default_dtype:
    """Context manager temporarily switching the default dtype."""

    def __init__(self, dtype):
        self.dtype = dtype

    def __enter__(self):
        self._prev = _DTYPE
        set_default_dtype(self.dtype)
        return self

    def __exit__(self, *exc):
        set_default_dtype(self._prev)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=_DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise DimensionError(f"gradient shape {g.shape} != tensor shape {self.data.shape}")
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


class Tape:
    """Ordered record of executed primitives.

    Use as a context manager; operations executed inside the ``with`` block
    on tensors that require gradients are recorded here.
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple, Callable]] = []
        self._consumed = False

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)

    def __len__(self):
        return len(self.records)

    def record(self, out: Tensor, inputs: tuple, backward: Callable) -> None:
        if self._consumed:
            raise RuntimeError("tape already consumed by backward(); call reset() first")
        self.records.append((out, inputs, backward))

    def backward(self, loss: Tensor, grad: np.ndarray | None = None) -> None:
        if self._consumed:
            raise RuntimeError("backward() already ran on this tape; call reset() first")
        if grad is None:
            if loss.size != 1:
                raise DimensionError(f"backward() needs a scalar loss, got shape {loss.shape}")
            grad = np.ones_like(loss.data)
        loss._accumulate(np.asarray(grad, dtype=loss.data.dtype))
        for out, inputs, fn in reversed(self.records):
            if out.grad is None:
                continue
            grads = fn(out.grad)
            for t, g in zip(inputs, grads):
                if g is not None and t.requires_grad:
                    t._accumulate(g)
        self._consumed = True

    def reset(self) -> None:
        self.records.clear()
        self._consumed = False


def current_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericalError(f"{op}: non-finite values in output")


def _make(arr: np.ndarray, inputs: tuple, backward: Callable, op: str) -> Tensor:
    _check_finite(arr, op)
    req = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(arr, req)
    if req and _TAPES:
        _TAPES[-1].record(out, inputs, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcastable(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# element-wise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcastable("add", a, b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcastable("sub", a, b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcastable("mul", a, b)
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcastable("div", a, b)
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad / bd

    def backward(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * ad / (bd * bd), bd.shape)

    return _make(out, (a, b), backward, "div")


def scale(x: Tensor, c: float) -> Tensor:
    def backward(g):
        return (g * c,)

    return _make(x.data * c, (x,), backward, "scale")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)

    def backward(g):
        return (g * out,)

    return _make(out, (x,), backward, "exp")


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    xd = x.data

    def backward(g):
        return (g / xd,)

    return _make(out, (x,), backward, "log")


def clamp_min(x: Tensor, lo: float) -> Tensor:
    """max(x, lo); gradient passes only where x > lo."""
    keep = x.data > lo
    out = np.where(keep, x.data, np.asarray(lo, dtype=x.data.dtype))

    def backward(g):
        return (g * keep,)

    return _make(out, (x,), backward, "clamp_min")


def abs(x: Tensor) -> Tensor:  # noqa: A001
    sgn = np.sign(x.data)

    def backward(g):
        return (g * sgn,)

    return _make(np.abs(x.data), (x,), backward, "abs")


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    # split by sign so neither branch overflows
    pos = xd >= 0
    z = np.exp(-np.abs(xd))
    out = np.where(pos, 1.0 / (1.0 + z), z / (1.0 + z)).astype(xd.dtype, copy=False)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _make(out, (x,), backward, "sigmoid")


_SQRT1_2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _SQRT1_2))
    out = xd * cdf

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf),)

    return _make(out, (x,), backward, "gelu")


# ---------------------------------------------------------------------------
# reductions


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make(np.asarray(out), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([x.shape[a] for a in axes]))
    return scale(sum(x, axis, keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"cannot reshape {src} to {shape}") from e

    def backward(g):
        return (g.reshape(src),)

    return _make(out, (x,), backward, "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    axes = tuple(a % x.ndim for a in axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inv),)

    return _make(np.transpose(x.data, axes), (x,), backward, "transpose")


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    nd = xs[0].ndim
    ax = axis % nd
    for t in xs[1:]:
        if t.ndim != nd or any(t.shape[i] != xs[0].shape[i] for i in range(nd) if i != ax):
            raise DimensionError(
                f"concat along axis {axis}: incompatible shapes {[t.shape for t in xs]}"
            )
    sizes = [t.shape[ax] for t in xs]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=ax))

    return _make(np.concatenate([t.data for t in xs], axis=ax), tuple(xs), backward, "concat")


def _is_advanced(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def getitem(x: Tensor, idx) -> Tensor:
    src_shape, dtype = x.shape, x.data.dtype
    out = x.data[idx]
    adv = _is_advanced(idx)

    def backward(g):
        z = np.zeros(src_shape, dtype=dtype)
        if adv:
            np.add.at(z, idx, g)
        else:
            z[idx] = g
        return (z,)

    return _make(np.array(out, copy=True), (x,), backward, "getitem")


def take(x: Tensor, idx: np.ndarray, axis: int = 0) -> Tensor:
    """Gather entries of ``x`` along ``axis`` (indices may repeat)."""
    idx = np.asarray(idx, dtype=np.intp)
    ax = axis % x.ndim
    src_shape, dtype = x.shape, x.data.dtype

    def backward(g):
        z = np.zeros(src_shape, dtype=dtype)
        zm = np.moveaxis(z, ax, 0)
        gm = np.moveaxis(g, tuple(range(ax, ax + idx.ndim)), tuple(range(idx.ndim)))
        np.add.at(zm, idx, gm)
        return (z,)

    return _make(np.take(x.data, idx, axis=ax), (x,), backward, "take")


def pad(x: Tensor, widths: Sequence[tuple[int, int]]) -> Tensor:
    """Zero-pad; ``widths`` lists (before, after) per axis."""
    widths = [tuple(w) for w in widths]
    sl = tuple(slice(b, b + n) for (b, _), n in zip(widths, x.shape))

    def backward(g):
        return (g[sl],)

    return _make(np.pad(x.data, widths), (x,), backward, "pad")


def roll(x: Tensor, shift, axis) -> Tensor:
    neg = tuple(-s for s in shift) if isinstance(shift, tuple) else -shift

    def backward(g):
        return (np.roll(g, neg, axis=axis),)

    return _make(np.roll(x.data, shift, axis=axis), (x,), backward, "roll")


# ---------------------------------------------------------------------------
# linear algebra and fused blocks


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(ad @ bd, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x[..., in] @ weight[in, out] + bias[out]."""
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd
    if bias is not None:
        out = out + bias.data
    n_in, n_out = wd.shape

    def backward(g):
        gx = g @ wd.T
        g2 = g.reshape(-1, n_out)
        gw = xd.reshape(-1, n_in).T @ g2
        gb = g2.sum(axis=0) if bias is not None else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return _make(out, inputs, backward, "linear")


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Row-max-stabilised softmax; ``mask`` False entries get zero weight."""
    xd = x.data
    if mask is not None:
        xd = np.where(mask, xd, -np.inf)
    m = np.max(xd, axis=axis, keepdims=True)
    e = np.exp(xd - m)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        dot = np.sum(g * out, axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (x,), backward, "softmax")


def softmax_rows(x: Tensor) -> Tensor:
    return softmax(x, axis=-1)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} vs channels {c}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta.data

    def backward(g):
        dxhat = g * gd
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        g2 = g.reshape(-1, c)
        return dx, (g2 * xhat.reshape(-1, c)).sum(axis=0), g2.sum(axis=0)

    return _make(out, (x, gamma, beta), backward, "layer_norm")


def fold(patches: Tensor, k: int, s: int, p: int, out_hw: tuple[int, int]) -> Tensor:
    """Overlap-add ``k x k`` patches at stride ``s`` and crop a ``p`` ring.

    patches: (..., h, w, c, k, k) -> (..., H_o, W_o, c). Patch (i, j) lands
    with its top-left corner at (i*s, j*s) of the zero-padded canvas.
    """
    *lead, h, w, c, kh, kw = patches.shape
    if kh != k or kw != k:
        raise DimensionError(f"fold: patch extents {(kh, kw)} != k={k}")
    ho, wo = out_hw
    hc, wc = ho + 2 * p, wo + 2 * p
    if (h - 1) * s + k > hc or (w - 1) * s + k > wc:
        raise DimensionError(f"fold: {h}x{w} patches (k={k}, s={s}) exceed canvas {hc}x{wc}")
    pd = patches.data
    lead = tuple(lead)
    canvas = np.zeros(lead + (hc, wc, c), dtype=pd.dtype)
    rs = (h - 1) * s + 1
    cs = (w - 1) * s + 1
    for di in range(k):
        for dj in range(k):
            if k <= s:
                canvas[..., di : di + rs : s, dj : dj + cs : s, :] = pd[..., di, dj]
            else:
                canvas[..., di : di + rs : s, dj : dj + cs : s, :] += pd[..., di, dj]
    out = canvas[..., p : p + ho, p : p + wo, :]

    def backward(g):
        gc = np.zeros(lead + (hc, wc, c), dtype=g.dtype)
        gc[..., p : p + ho, p : p + wo, :] = g
        gp = np.empty(pd.shape, dtype=g.dtype)
        for di in range(k):
            for dj in range(k):
                gp[..., di, dj] = gc[..., di : di + rs : s, dj : dj + cs : s, :]
        return (gp,)

    return _make(np.ascontiguousarray(out), (patches,), backward, "fold")


def interp_matrix(n_in: int, n_out: int, dtype=None) -> np.ndarray:
    """Row-stochastic 1-D bilinear resampling matrix (half-pixel centres)."""
    dtype = dtype or _DTYPE
    m = np.zeros((n_out, n_in), dtype=np.float64)
    ratio = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * ratio - 0.5, 0.0)
        i0 = min(int(math.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        m[i, i0] += 1.0 - frac
        m[i, i1] += frac
    return m.astype(dtype)


# ---------------------------------------------------------------------------
# finite-difference verification


def _grad_check_tensors(fn, tensors, h, n_samples=None, rng=None) -> float:
    if not (1e-6 <= h <= 1e-3):
        raise ValueError(f"step h={h} outside [1e-6, 1e-3]")
    for t in tensors:
        t.grad = None
    with Tape() as tape:
        y = fn()
    tape.backward(y)
    worst = 0.0
    for t in tensors:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if n_samples is not None and n_samples < flat.size:
            rng = rng or np.random.default_rng(0)
            coords = np.sort(rng.choice(flat.size, size=n_samples, replace=False))
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(fn().data)
            flat[i] = orig - h
            fm = float(fn().data)
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NumericalError(f"non-finite function value at coordinate {i}")
            num = (fp - fm) / (2.0 * h)
            err = np.abs(analytic.reshape(-1)[i] - num) / max(1.0, np.abs(num))
            worst = max(worst, float(err))
    return worst


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5, n_samples=None, rng=None) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |central difference|)."""
    x.requires_grad = True
    return _grad_check_tensors(lambda: f(x), [x], h, n_samples, rng)


def grad_check_many(fn: Callable[[], Tensor], tensors, h: float = 1e-5, n_samples=None, rng=None) -> float:
    """Like :func:`grad_check` for a closure over several tensors."""
    return _grad_check_tensors(fn, list(tensors), h, n_samples, rng)

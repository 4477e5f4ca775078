"""Minimal reverse-mode autodiff over dense float64 arrays.

Exactly the op set the relation-reasoning stack needs: conv2d, linear,
softmax, layer norm, dropout, elementwise/reduction ops, concat/slicing,
and the two per-location attention contractions. Every op validates that
its output is finite and records a backward closure on a flat tape.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np


class NonFiniteError(ValueError):
    """Raised when an op produces NaN or Inf."""


_state = threading.local()


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (forward-only evaluation).
    Per-thread, so parallel runs don't interfere."""
    prev = getattr(_state, "grad_enabled", True)
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def _check_finite(arr: np.ndarray, op: str) -> None:
    # Fast path: a single reduction. Any NaN/Inf always poisons the sum;
    # a non-finite sum of finite values (overflow) is re-checked exactly.
    s = arr.sum()
    if not np.isfinite(s) and not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by op '{op}'")


class Tensor:
    """Dense f64 array with optional gradient buffer.

    Values are immutable once created except through ops; `.data` of leaf
    parameters is mutated only by the optimizer.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr, "tensor")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        # Always copy on first write: a backward closure may hand the same
        # buffer to several parents.
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Reverse-mode sweep from this tensor.

        Without an explicit seed gradient the tensor must be a scalar.
        """
        if grad is None:
            if self.size != 1:
                raise ValueError("backward() without a gradient requires a scalar tensor")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=np.float64)
            if grad.shape != self.data.shape:
                raise ValueError("seed gradient shape mismatch")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        self._accumulate(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar -------------------------------------------------

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

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, key):
        return slice_view(self, key)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes: Sequence[int]) -> "Tensor":
        return transpose(self, axes)

    def mean(self, axis: int, keepdims: bool = False) -> "Tensor":
        return mean_over_axis(self, axis, keepdims=keepdims)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum_over_axes(self, axis, keepdims=keepdims)

    def max(self, axes) -> "Tensor":
        return max_over_axes(self, axes)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._parents = ()
    out._backward = None
    out.requires_grad = False
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward op."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- arithmetic ----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.data.shape))

    return _make(out_data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), backward, "mul")


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out_data = np.maximum(x.data, 0.0)

    def backward(g):
        x._accumulate(g * (x.data > 0.0))

    return _make(out_data, (x,), backward, "relu")


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    # Split by sign to avoid overflow in exp.
    d = x.data
    out_data = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                        np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))

    def backward(g):
        x._accumulate(g * out_data * (1.0 - out_data))

    return _make(out_data, (x,), backward, "sigmoid")


def exp(x: Tensor) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):   # the finiteness check reports overflow
        out_data = np.exp(x.data)

    def backward(g):
        x._accumulate(g * out_data)

    return _make(out_data, (x,), backward, "exp")


def log(x: Tensor) -> Tensor:
    x = as_tensor(x)
    with np.errstate(invalid="ignore", divide="ignore"):
        out_data = np.log(x.data)

    def backward(g):
        x._accumulate(g / x.data)

    return _make(out_data, (x,), backward, "log")


def clip_values(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only strictly inside the range."""
    x = as_tensor(x)
    out_data = np.clip(x.data, lo, hi)

    def backward(g):
        x._accumulate(g * ((x.data > lo) & (x.data < hi)))

    return _make(out_data, (x,), backward, "clip")


# -- shape ops -----------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    out_data = x.data.reshape(shape)

    def backward(g):
        x._accumulate(g.reshape(x.data.shape))

    return _make(out_data, (x,), backward, "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out_data = np.ascontiguousarray(x.data.transpose(axes))

    def backward(g):
        x._accumulate(g.transpose(inv))

    return _make(out_data, (x,), backward, "transpose")


def broadcast_to(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    out_data = np.broadcast_to(x.data, shape).copy()

    def backward(g):
        x._accumulate(_unbroadcast(g, x.data.shape))

    return _make(out_data, (x,), backward, "broadcast_to")


def slice_view(x: Tensor, key) -> Tensor:
    x = as_tensor(x)
    out_data = np.ascontiguousarray(x.data[key])

    def backward(g):
        dx = np.zeros_like(x.data)
        dx[key] = g
        x._accumulate(dx)

    return _make(out_data, (x,), backward, "slice")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError("concat of zero tensors")
    out_data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return _make(out_data, tuple(ts), backward, "concat")


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate feature maps along the channel axis (axis -3)."""
    ts = [as_tensor(t) for t in tensors]
    return concat(ts, axis=ts[0].ndim - 3)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError("stack of zero tensors")
    out_data = np.stack([t.data for t in ts], axis=axis)

    def backward(g):
        parts = np.split(g, len(ts), axis=axis)
        for t, part in zip(ts, parts):
            if t.requires_grad:
                t._accumulate(part.reshape(t.data.shape))

    return _make(out_data, tuple(ts), backward, "stack")


# -- reductions ----------------------------------------------------------


def mean_over_axis(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if x.data.shape[axis] < 1:
        raise ValueError("mean over empty axis")
    n = x.data.shape[axis]
    out_data = x.data.mean(axis=axis, keepdims=keepdims)

    def backward(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(gg, x.data.shape) / n)

    return _make(out_data, (x,), backward, "mean")


def sum_over_axes(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out_data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            x._accumulate(np.broadcast_to(g, x.data.shape).copy())
            return
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        gg = g
        if not keepdims:
            for ax in sorted(ax % x.data.ndim for ax in axes):
                gg = np.expand_dims(gg, ax)
        x._accumulate(np.broadcast_to(gg, x.data.shape).copy())

    return _make(np.asarray(out_data), (x,), backward, "sum")


def max_over_axes(x: Tensor, axes) -> Tensor:
    """Max-reduce over one or more axes; the subgradient routes to the
    first maximal element (deterministic under ties)."""
    x = as_tensor(x)
    axes = (axes,) if isinstance(axes, int) else tuple(axes)
    axes = tuple(sorted(ax % x.data.ndim for ax in axes))
    keep = tuple(i for i in range(x.data.ndim) if i not in axes)
    perm = keep + axes
    xt = x.data.transpose(perm)
    lead = xt.shape[: len(keep)]
    red = int(np.prod(xt.shape[len(keep):])) if axes else 1
    if red < 1:
        raise ValueError("max over empty axes")
    xr = xt.reshape(lead + (red,))
    idx = xr.argmax(axis=-1)
    out_data = np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        dr = np.zeros(lead + (red,), dtype=np.float64)
        np.put_along_axis(dr, idx[..., None], g[..., None], axis=-1)
        dt = dr.reshape(xt.shape)
        x._accumulate(dt.transpose(tuple(np.argsort(perm))))

    return _make(out_data, (x,), backward, "max")


# -- linear algebra ------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product on the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g @ b.data.swapaxes(-1, -2), a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(a.data.swapaxes(-1, -2) @ g, b.data.shape))

    return _make(out_data, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map on the last axis: x[..., Din] @ W[Dout, Din].T + b."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    d_out, d_in = weight.data.shape
    if x.data.shape[-1] != d_in:
        raise ValueError(f"linear: input dim {x.data.shape[-1]} != weight dim {d_in}")
    if bias.data.shape != (d_out,):
        raise ValueError("linear: bias shape mismatch")
    lead = x.data.shape[:-1]
    x2 = x.data.reshape(-1, d_in)
    out2 = x2 @ weight.data.T + bias.data
    out_data = out2.reshape(lead + (d_out,))

    def backward(g):
        g2 = g.reshape(-1, d_out)
        if x.requires_grad:
            x._accumulate((g2 @ weight.data).reshape(x.data.shape))
        if weight.requires_grad:
            weight._accumulate(g2.T @ x2)
        if bias.requires_grad:
            bias._accumulate(g2.sum(axis=0))

    return _make(out_data, (x, weight, bias), backward, "linear")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, padding: int | None = None) -> Tensor:
    """2-D cross-correlation, stride 1, zero padding.

    Accepts [C,H,W] or [B,C,H,W] input; odd kernel; default padding
    (k-1)//2 preserves the spatial size.
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4:
        raise ValueError("conv2d expects a 3-D or 4-D input")
    c_out, c_in, kh, kw = weight.data.shape
    if kh != kw or kh % 2 != 1:
        raise ValueError("conv2d kernel must be square and odd")
    if xd.shape[1] != c_in:
        raise ValueError(f"conv2d: input channels {xd.shape[1]} != weight channels {c_in}")
    if bias.data.shape != (c_out,):
        raise ValueError("conv2d: bias shape mismatch")
    p = (kh - 1) // 2 if padding is None else int(padding)
    b, _, h, w = xd.shape
    ho, wo = h + 2 * p - kh + 1, w + 2 * p - kw + 1
    if ho <= 0 or wo <= 0:
        raise ValueError("conv2d: non-positive output spatial dims")

    if p:
        xp = np.zeros((b, c_in, h + 2 * p, w + 2 * p))
        xp[:, :, p:p + h, p:p + w] = xd
    else:
        xp = xd
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    # channels-first column layout keeps reads/writes contiguous
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(
        b, c_in * kh * kw, ho * wo)
    wmat = weight.data.reshape(c_out, -1)
    out_data = (wmat @ cols).reshape(b, c_out, ho, wo)
    out_data += bias.data[None, :, None, None]
    if squeeze:
        out_data = out_data[0]

    def backward(g):
        gd = g[None] if squeeze else g
        g2 = gd.reshape(b, c_out, ho * wo)
        if weight.requires_grad:
            weight._accumulate(
                np.einsum("bol,bkl->ok", g2, cols, optimize=True).reshape(weight.data.shape))
        if bias.requires_grad:
            bias._accumulate(gd.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dcols = (wmat.T @ g2).reshape(b, c_in, kh, kw, ho, wo)
            dxp = np.zeros((b, c_in, h + 2 * p, w + 2 * p))
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + ho, j:j + wo] += dcols[:, :, i, j]
            dx = dxp[:, :, p:p + h, p:p + w] if p else dxp
            x._accumulate(dx[0] if squeeze else dx)

    return _make(out_data, (x, weight, bias), backward, "conv2d")


# -- normalization / regularization ---------------------------------------


def softmax(x: Tensor, axis: int) -> Tensor:
    """Numerically stable softmax (max-subtracted) along one axis."""
    x = as_tensor(x)
    if x.data.shape[axis] < 1:
        raise ValueError("softmax over empty axis")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        x._accumulate(out_data * (g - dot))

    return _make(out_data, (x,), backward, "softmax")


def layer_norm(x: Tensor, axis: int, eps: float = 1e-5) -> Tensor:
    """Zero-mean unit-variance along one axis (no learned affine here)."""
    x = as_tensor(x)
    if eps <= 0:
        raise ValueError("layer_norm eps must be > 0")
    n = x.data.shape[axis]
    if n < 1:
        raise ValueError("layer_norm over empty axis")
    mu = x.data.mean(axis=axis, keepdims=True)
    var = x.data.var(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out_data = xhat

    def backward(g):
        gm = g.mean(axis=axis, keepdims=True)
        gxh = (g * xhat).mean(axis=axis, keepdims=True)
        x._accumulate(inv * (g - gm - xhat * gxh))

    return _make(out_data, (x,), backward, "layer_norm")


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: zero with prob p and scale survivors by 1/(1-p);
    identity at inference."""
    x = as_tensor(x)
    if not 0.0 <= p < 1.0:
        raise ValueError("dropout p must be in [0, 1)")
    if not training or p == 0.0:
        out_data = x.data.copy()

        def backward_id(g):
            x._accumulate(g)

        return _make(out_data, (x,), backward_id, "dropout")

    mask = (rng.random(x.data.shape) >= p) / (1.0 - p)
    out_data = x.data * mask

    def backward(g):
        x._accumulate(g * mask)

    return _make(out_data, (x,), backward, "dropout")


# -- per-location attention contractions ----------------------------------


def attn_scores(q: Tensor, k: Tensor) -> Tensor:
    """Per-location dot products: [.., Nq, d, H, W] x [.., Nk, d, H, W]
    -> [.., Nq, Nk, H, W]."""
    q, k = as_tensor(q), as_tensor(k)
    if q.data.ndim == 4:
        spec_f, spec_q, spec_k = "idhw,jdhw->ijhw", "ijhw,jdhw->idhw", "ijhw,idhw->jdhw"
    elif q.data.ndim == 5:
        spec_f, spec_q, spec_k = "bidhw,bjdhw->bijhw", "bijhw,bjdhw->bidhw", "bijhw,bidhw->bjdhw"
    else:
        raise ValueError("attn_scores expects 4-D or 5-D operands")
    out_data = np.einsum(spec_f, q.data, k.data, optimize=True)

    def backward(g):
        if q.requires_grad:
            q._accumulate(np.einsum(spec_q, g, k.data, optimize=True))
        if k.requires_grad:
            k._accumulate(np.einsum(spec_k, g, q.data, optimize=True))

    return _make(out_data, (q, k), backward, "attn_scores")


def attn_mix(att: Tensor, v: Tensor) -> Tensor:
    """Attention-weighted sum of values: [.., Nq, Nk, H, W] x
    [.., Nk, d, H, W] -> [.., Nq, d, H, W]."""
    att, v = as_tensor(att), as_tensor(v)
    if att.data.ndim == 4:
        spec_f, spec_a, spec_v = "ijhw,jdhw->idhw", "idhw,jdhw->ijhw", "ijhw,idhw->jdhw"
    elif att.data.ndim == 5:
        spec_f, spec_a, spec_v = "bijhw,bjdhw->bidhw", "bidhw,bjdhw->bijhw", "bijhw,bidhw->bjdhw"
    else:
        raise ValueError("attn_mix expects 4-D or 5-D operands")
    out_data = np.einsum(spec_f, att.data, v.data, optimize=True)

    def backward(g):
        if att.requires_grad:
            att._accumulate(np.einsum(spec_a, g, v.data, optimize=True))
        if v.requires_grad:
            v._accumulate(np.einsum(spec_v, att.data, g, optimize=True))

    return _make(out_data, (att, v), backward, "attn_mix")


# -- gradient checking -----------------------------------------------------


def grad_check(f: Callable[[Tensor], Tensor], x: np.ndarray, h: float = 1e-5,
               indices: Iterable[tuple] | None = None) -> float:
    """Compare the analytic gradient of scalar f against central finite
    differences; returns the max relative error.

    `indices` limits the finite-difference probes (full sweep otherwise).
    """
    x = np.asarray(x, dtype=np.float64)
    xt = Tensor(x.copy(), requires_grad=True)
    out = f(xt)
    if out.size != 1:
        raise ValueError("grad_check requires a scalar-valued function")
    out.backward()
    analytic = xt.grad if xt.grad is not None else np.zeros_like(x)

    if indices is None:
        probe = list(np.ndindex(*x.shape)) if x.shape else [()]
    else:
        probe = list(indices)

    max_err = 0.0
    for idx in probe:
        xp = x.copy()
        xp[idx] += h
        with no_grad():
            fp = f(Tensor(xp)).item()
        xm = x.copy()
        xm[idx] -= h
        with no_grad():
            fm = f(Tensor(xm)).item()
        num = (fp - fm) / (2.0 * h)
        ana = analytic[idx]
        err = abs(ana - num) / max(abs(ana), abs(num), 1e-3)
        max_err = max(max_err, err)
    return max_err

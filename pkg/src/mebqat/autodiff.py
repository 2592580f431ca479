"""Dense tensors with reverse-mode automatic differentiation.

The graph is the linked structure of Tensor objects: every op records its
parent tensors and a vector-Jacobian closure on the output, in execution
order. ``backward`` walks that structure once, in reverse topological
order, accumulating gradients into a scratch table and finally summing
them into the ``grad`` buffers of the reachable leaves.

Values default to float32. Reductions (sum, mean, batch-norm statistics)
accumulate in float64 before casting back, and the finite-difference
checker runs entirely in float64 so the numeric side of a gradient check
is trustworthy.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "tensor",
    "no_grad",
    "grad_enabled",
    "backward_pass_count",
    "reset_backward_pass_count",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "conv2d",
    "max_pool2d",
    "relu",
    "tanh",
    "clip",
    "absolute",
    "reduce_max",
    "reduce_sum",
    "mean",
    "softmax",
    "log_softmax",
    "logsumexp",
    "batch_norm_transductive",
    "squared_euclidean_distance",
    "reshape",
    "flatten",
    "grad_check",
    "GradCheckReport",
]


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an op."""


_grad_enabled = True
_backward_passes = 0


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (forward values only)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


def backward_pass_count() -> int:
    """Total number of completed backward passes since the last reset."""
    return _backward_passes


def reset_backward_pass_count() -> None:
    global _backward_passes
    _backward_passes = 0


def _as_array(data, dtype=None) -> np.ndarray:
    if dtype is not None:
        return np.asarray(data).astype(dtype, copy=False)
    # float64 ndarrays keep their precision (the finite-difference oracle
    # runs in float64); everything else becomes the working float32
    if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
        return data
    return np.asarray(data, dtype=np.float32)


class Tensor:
    """Dense rank-N real array, optionally tracked by the autodiff graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self._op = "leaf"

    # -- construction helpers -------------------------------------------------

    @classmethod
    def _from_op(cls, data, parents: tuple["Tensor", ...], vjp, op: str) -> "Tensor":
        """Record one executed op. Used by every primitive, including the
        straight-through quantizers defined outside this module."""
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._vjp = vjp
        else:
            out.requires_grad = False
            out._parents = ()
            out._vjp = None
        out._op = op
        return out

    # -- basic niceties -------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, op={self._op!r}{flag})"

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def clone(self) -> "Tensor":
        """Independent copy that becomes a fresh leaf."""
        return Tensor(self.data.copy(), requires_grad=self.requires_grad)

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, _lift(other, self.dtype))

    def __radd__(self, other):
        return add(_lift(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _lift(other, self.dtype))

    def __rsub__(self, other):
        return sub(_lift(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _lift(other, self.dtype))

    def __rmul__(self, other):
        return mul(_lift(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _lift(other, self.dtype))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _lift(other, self.dtype))

    # -- backward --------------------------------------------------------------

    def backward(self) -> None:
        """Reverse-mode pass from a scalar. Accumulates (sums) into leaf
        ``grad`` buffers across repeated calls."""
        global _backward_passes
        if self.data.size != 1:
            raise ValueError(
                f"backward requires a scalar loss, got shape {self.data.shape}"
            )

        order = _toposort(self)
        table: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in order:  # reverse topological order
            g = table.pop(id(node), None)
            if g is None:
                continue
            if node._vjp is not None:
                contribs = node._vjp(g)
                for parent, contrib in zip(node._parents, contribs):
                    if contrib is None or not parent.requires_grad:
                        continue
                    key = id(parent)
                    if key in table:
                        table[key] = table[key] + contrib
                    else:
                        table[key] = contrib
            elif node.requires_grad and not node._parents:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad = node.grad + g
        _backward_passes += 1


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _lift(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _toposort(root: Tensor) -> list[Tensor]:
    """Iterative DFS postorder, reversed: parents of any node appear after it."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    order.reverse()
    return order


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward op."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _binop_shapes(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


# -- elementwise arithmetic ----------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _binop_shapes("add", a, b)
    return Tensor._from_op(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    _binop_shapes("sub", a, b)
    return Tensor._from_op(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    _binop_shapes("mul", a, b)
    return Tensor._from_op(
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        ),
        "mul",
    )


def div(a: Tensor, b: Tensor) -> Tensor:
    _binop_shapes("div", a, b)
    return Tensor._from_op(
        a.data / b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
        "div",
    )


def neg(a: Tensor) -> Tensor:
    return Tensor._from_op(-a.data, (a,), lambda g: (-g,), "neg")


def absolute(a: Tensor) -> Tensor:
    # subgradient at 0 is 0 (np.sign convention)
    return Tensor._from_op(
        np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs"
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(
            f"matmul: expects rank-2 operands, got {a.shape} and {b.shape}"
        )
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims differ for {a.shape} and {b.shape}")
    return Tensor._from_op(
        a.data @ b.data,
        (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
        "matmul",
    )


# -- activations and clipping ---------------------------------------------------


def relu(a: Tensor) -> Tensor:
    # subgradient at 0 is 0 (strict inequality); mask built only on backward
    out = np.maximum(a.data, a.data.dtype.type(0))
    return Tensor._from_op(out, (a,), lambda g: (g * (a.data > 0),), "relu")


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return Tensor._from_op(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    if not lo < hi:
        raise ValueError(f"clip: lo {lo} must be < hi {hi}")
    # gradient is 0 at and beyond both edges
    return Tensor._from_op(
        np.clip(a.data, lo, hi),
        (a,),
        lambda g: (g * ((a.data > lo) & (a.data < hi)),),
        "clip",
    )


# -- reductions ------------------------------------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axis = _norm_axis(axis, a.data.ndim)
    out = a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64)
    out = out.astype(a.dtype)

    def vjp(g):
        gg = g
        if not keepdims and axis is not None:
            gg = np.expand_dims(gg, axis)
        elif axis is None and not keepdims:
            gg = np.asarray(gg).reshape((1,) * a.data.ndim)
        return (np.broadcast_to(gg, a.shape).astype(a.dtype, copy=False),)

    return Tensor._from_op(out, (a,), vjp, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axis = _norm_axis(axis, a.data.ndim)
    out = a.data.mean(axis=axis, keepdims=keepdims, dtype=np.float64)
    out = out.astype(a.dtype)
    if axis is None:
        count = a.data.size
    else:
        count = int(np.prod([a.shape[ax] for ax in axis]))
    inv = 1.0 / count

    def vjp(g):
        gg = g
        if not keepdims and axis is not None:
            gg = np.expand_dims(gg, axis)
        elif axis is None and not keepdims:
            gg = np.asarray(gg).reshape((1,) * a.data.ndim)
        return (np.broadcast_to(gg * inv, a.shape).astype(a.dtype, copy=False),)

    return Tensor._from_op(out, (a,), vjp, "mean")


def reduce_max(a: Tensor) -> Tensor:
    """Global maximum; gradient routes to the first max element (row-major)."""
    idx = int(np.argmax(a.data))
    out = a.data.reshape(-1)[idx].reshape(())

    def vjp(g):
        z = np.zeros_like(a.data)
        z.reshape(-1)[idx] = np.asarray(g).reshape(())
        return (z,)

    return Tensor._from_op(out.copy(), (a,), vjp, "max")


# -- softmax family ----------------------------------------------------------------


def _softmax_data(x: np.ndarray, axis: int) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    axis = axis % a.data.ndim
    y = _softmax_data(a.data, axis)

    def vjp(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return Tensor._from_op(y, (a,), vjp, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    axis = axis % a.data.ndim
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    sm = np.exp(y)

    def vjp(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return Tensor._from_op(y, (a,), vjp, "log_softmax")


def logsumexp(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    axis = axis % a.data.ndim
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = m + np.log(s)
    sm = e / s
    if not keepdims:
        out = out.squeeze(axis=axis)

    def vjp(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        return (sm * gg,)

    return Tensor._from_op(out, (a,), vjp, "logsumexp")


# -- shape ops -----------------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return Tensor._from_op(
        a.data.reshape(shape),
        (a,),
        lambda g: (g.reshape(a.shape),),
        "reshape",
    )


def flatten(a: Tensor) -> Tensor:
    """Collapse all but the leading (batch) axis."""
    return reshape(a, (a.shape[0], -1))


# -- convolution and pooling -----------------------------------------------------------


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of a (B, C, H, W) input with (F, C, kh, kw) filters."""
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d: input must be rank 4, got {x.shape}")
    if w.data.ndim != 4:
        raise ShapeError(f"conv2d: filters must be rank 4, got {w.shape}")
    batch, cin, h, w_in = x.shape
    fout, cfilt, kh, kw = w.shape
    if cin != cfilt:
        raise ShapeError(
            f"conv2d: input channels {x.shape} do not match filters {w.shape}"
        )
    hp, wp = h + 2 * padding, w_in + 2 * padding
    hout = (hp - kh) // stride + 1
    wout = (wp - kw) // stride + 1
    if hp < kh or wp < kw or hout <= 0 or wout <= 0:
        raise ShapeError(
            f"conv2d: output dims not positive for input {x.shape}, "
            f"filters {w.shape}, stride {stride}, padding {padding}"
        )

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (B, C, Ho, Wo, kh, kw)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        batch * hout * wout, cin * kh * kw
    )
    wflat = w.data.reshape(fout, cin * kh * kw)
    out = (cols @ wflat.T).reshape(batch, hout, wout, fout).transpose(0, 3, 1, 2)

    def vjp(g):
        gm = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(
            batch * hout * wout, fout
        )
        dw = (gm.T @ cols).reshape(w.shape)
        if not x.requires_grad:
            return (None, dw)
        dcols = (gm @ wflat).reshape(batch, hout, wout, cin, kh, kw)
        dcols = dcols.transpose(0, 3, 1, 2, 4, 5)  # (B, C, Ho, Wo, kh, kw)
        dxp = np.zeros((batch, cin, hp, wp), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + stride * hout : stride,
                    j : j + stride * wout : stride] += dcols[:, :, :, :, i, j]
        if padding:
            dx = dxp[:, :, padding : padding + h, padding : padding + w_in]
        else:
            dx = dxp
        return (dx, dw)

    return Tensor._from_op(np.ascontiguousarray(out), (x, w), vjp, "conv2d")


def max_pool2d(x: Tensor, kernel: int = 2, stride: Optional[int] = None) -> Tensor:
    """Max pooling over (B, C, H, W); ties route the gradient to the first
    max inside each window (row-major)."""
    if x.data.ndim != 4:
        raise ShapeError(f"max_pool2d: input must be rank 4, got {x.shape}")
    stride = kernel if stride is None else stride
    batch, ch, h, w = x.shape
    if h < kernel or w < kernel:
        raise ShapeError(
            f"max_pool2d: window {kernel} larger than input {x.shape}"
        )
    hout = (h - kernel) // stride + 1
    wout = (w - kernel) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x.data, (kernel, kernel), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (B, C, Ho, Wo, k, k)
    flat = win.reshape(batch, ch, hout, wout, kernel * kernel)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        dx = np.zeros_like(x.data)
        if stride == kernel:
            dwin = np.zeros(
                (batch, ch, hout, wout, kernel * kernel), dtype=g.dtype
            )
            np.put_along_axis(dwin, idx[..., None], g[..., None], axis=-1)
            dwin = dwin.reshape(batch, ch, hout, wout, kernel, kernel)
            block = dwin.transpose(0, 1, 2, 4, 3, 5).reshape(
                batch, ch, hout * kernel, wout * kernel
            )
            dx[:, :, : hout * kernel, : wout * kernel] = block
        else:
            di, dj = np.divmod(idx, kernel)
            hi = (np.arange(hout) * stride)[None, None, :, None] + di
            wi = (np.arange(wout) * stride)[None, None, None, :] + dj
            bi = np.arange(batch)[:, None, None, None]
            ci = np.arange(ch)[None, :, None, None]
            np.add.at(dx, (bi, ci, hi, wi), g)
        return (dx,)

    return Tensor._from_op(np.ascontiguousarray(out), (x,), vjp, "max_pool2d")


# -- batch normalization -----------------------------------------------------------------


def batch_norm_transductive(
    x: Tensor, scale: Tensor, shift: Tensor, eps: float = 1e-5
) -> Tensor:
    """Normalize with the statistics of the current batch, then apply the
    learnable per-channel scale and shift. There is no running-average mode:
    training and evaluation behave identically."""
    if x.data.ndim == 4:
        axes = (0, 2, 3)
        param_shape = (1, x.shape[1], 1, 1)
    elif x.data.ndim == 2:
        axes = (0,)
        param_shape = (1, x.shape[1])
    else:
        raise ShapeError(f"batch_norm: input must be rank 2 or 4, got {x.shape}")
    channels = x.shape[1]
    if scale.shape != (channels,) or shift.shape != (channels,):
        raise ShapeError(
            f"batch_norm: scale/shift {scale.shape}/{shift.shape} do not match "
            f"{channels} channels of input {x.shape}"
        )

    # stats accumulate in float64 without materializing a float64 copy
    mu = x.data.mean(axis=axes, keepdims=True, dtype=np.float64)
    var = np.square(x.data).mean(axis=axes, keepdims=True, dtype=np.float64) - mu * mu
    inv = (1.0 / np.sqrt(np.maximum(var, 0.0) + eps)).astype(x.dtype)
    mu = mu.astype(x.dtype)
    xhat = (x.data - mu) * inv
    gamma = scale.data.reshape(param_shape)
    out = xhat * gamma + shift.data.reshape(param_shape)
    count = int(np.prod([x.shape[ax] for ax in axes]))

    def vjp(g):
        dscale = (g * xhat).sum(axis=axes, dtype=np.float64).astype(x.dtype)
        dshift = g.sum(axis=axes, dtype=np.float64).astype(x.dtype)
        dxhat = g * gamma
        m1 = dxhat.mean(axis=axes, keepdims=True, dtype=np.float64).astype(x.dtype)
        m2 = (dxhat * xhat).mean(axis=axes, keepdims=True, dtype=np.float64).astype(
            x.dtype
        )
        dx = inv * (dxhat - m1 - xhat * m2)
        return (dx, dscale, dshift)

    _ = count  # batch size folded into the means above
    return Tensor._from_op(out, (x, scale, shift), vjp, "batch_norm")


# -- distances ----------------------------------------------------------------------------


def squared_euclidean_distance(a: Tensor, b: Tensor) -> Tensor:
    """Pairwise squared distances between rows of a (m, d) and b (n, d)."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(
            f"squared_euclidean_distance: incompatible shapes {a.shape}, {b.shape}"
        )
    aa = np.square(a.data).sum(axis=1, keepdims=True, dtype=np.float64)
    bb = np.square(b.data).sum(axis=1, keepdims=True, dtype=np.float64)
    cross = a.data @ b.data.T
    out = np.maximum(aa + bb.T - 2.0 * cross, 0.0).astype(a.dtype)

    def vjp(g):
        rows = g.sum(axis=1, keepdims=True)
        cols = g.sum(axis=0, keepdims=True)
        da = 2.0 * (a.data * rows - g @ b.data)
        db = 2.0 * (b.data * cols.T - g.T @ a.data)
        return (da.astype(a.dtype), db.astype(b.dtype))

    return Tensor._from_op(out, (a, b), vjp, "sqdist")


# -- gradient checking -------------------------------------------------------------------


@dataclass
class GradCheckReport:
    """Per-element comparison of autodiff vs central finite differences."""

    max_rel_error: float
    mean_rel_error: float
    tolerance: float
    checked: int
    kinked: int = 0  # coordinates excluded because the forward is locally non-smooth

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def _rel_errors(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-3)
    return np.abs(analytic - numeric) / denom


def grad_check(
    f: Callable[[Tensor], Tensor],
    point: np.ndarray,
    eps: float = 1e-4,
    tol: float = 1e-3,
    coords: Optional[Iterable[int]] = None,
) -> GradCheckReport:
    """Compare the autodiff gradient of the scalar ``f`` at ``point`` against
    central finite differences computed in float64.

    The numeric side runs two stencil widths (eps and eps/2); a coordinate
    whose two estimates disagree has a kink of the forward map inside the
    stencil (relu, clip, pool-argmax crossings), where finite differences
    say nothing about the subgradient. Such coordinates are excluded and
    counted in the report. ``coords`` optionally restricts checking to a
    subset of flat indices (full Jacobians are quadratic in parameter
    count). Straight-through ops have a defined rather than analytic
    gradient and are excluded from numeric checking by construction.
    """
    base = np.asarray(point, dtype=np.float64)
    x = Tensor(base.copy(), requires_grad=True)
    out = f(x)
    out.backward()
    analytic_full = x.grad if x.grad is not None else np.zeros_like(base)

    flat = base.reshape(-1)
    if coords is None:
        indices = np.arange(flat.size)
    else:
        indices = np.asarray(list(coords), dtype=np.int64)

    def central(i: int, h: float) -> float:
        bumped = flat.copy()
        bumped[i] += h
        hi = f(Tensor(bumped.reshape(base.shape))).item()
        bumped[i] -= 2 * h
        lo = f(Tensor(bumped.reshape(base.shape))).item()
        return (hi - lo) / (2.0 * h)

    analytic = analytic_full.reshape(-1)[indices]
    numeric = np.empty(indices.size, dtype=np.float64)
    smooth = np.ones(indices.size, dtype=bool)
    for n, i in enumerate(indices):
        wide = central(int(i), eps)
        narrow = central(int(i), eps / 2.0)
        numeric[n] = narrow
        scale = max(abs(narrow), abs(analytic[n]), 1.0)
        if abs(wide - narrow) > 3e-4 * scale:
            smooth[n] = False

    errors = _rel_errors(analytic[smooth], numeric[smooth])
    return GradCheckReport(
        max_rel_error=float(errors.max()) if errors.size else 0.0,
        mean_rel_error=float(errors.mean()) if errors.size else 0.0,
        tolerance=tol,
        checked=int(smooth.sum()),
        kinked=int((~smooth).sum()),
    )

"""Tape-based reverse-mode automatic differentiation over dense numpy arrays.

A :class:`Tape` records every primitive operation applied to tensors that
live on it. Calling :func:`backward` on a scalar result replays the tape in
reverse and returns the gradient of that scalar with respect to any recorded
node, including input nodes (adversarial attacks differentiate with respect
to images, not just parameters).

Conventions:
  * images are NCHW, matrices are (rows, cols);
  * gradients accumulate (sum) on fan-out;
  * relu'(0) == 0 (subgradient convention, see design notes in README);
  * any primitive that produces NaN/Inf from finite inputs raises
    :class:`~ibrobust.errors.NonFinite` instead of propagating the value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import (
    DetachedNode,
    LossNotScalar,
    NonFinite,
    NonFiniteEvaluation,
    ShapeMismatch,
)

Array = np.ndarray


@dataclass
class _Node:
    op: str
    input_ids: tuple[int, ...]
    ctx: dict
    shape: tuple[int, ...]


class Tape:
    """Append-only record of primitive operations.

    A tape is single-writer: one recording session, no concurrent mutation.
    ``freeze()`` switches the tape to read-only; backward passes never mutate
    tape state, so a frozen tape can be replayed repeatedly (and from
    multiple threads) with bit-identical results.
    """

    def __init__(self, dtype=np.float32, check_finite: bool = True):
        dtype = np.dtype(dtype)
        if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
            raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
        self.dtype = dtype
        self.check_finite = check_finite
        self.nodes: list[_Node] = []
        self.mode = "recording"

    def freeze(self) -> None:
        self.mode = "frozen"

    def _record(self, op: str, input_ids: tuple[int, ...], ctx: dict, data: Array) -> "Tensor":
        if self.mode != "recording":
            raise DetachedNode("tape is frozen; cannot record new operations")
        self.nodes.append(_Node(op, input_ids, ctx, data.shape))
        return Tensor(data, tape=self, node_id=len(self.nodes) - 1)

    def _coerce(self, data) -> Array:
        arr = np.asarray(data, dtype=self.dtype)
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        return arr

    def leaf(self, data) -> "Tensor":
        """Register ``data`` as a differentiable input node."""
        arr = self._coerce(data)
        return self._record("leaf", (), {"value": arr}, arr)

    def constant(self, data) -> "Tensor":
        """Wrap ``data`` as a non-differentiable tensor (recorded off-tape)."""
        return Tensor(self._coerce(data), tape=self, node_id=None)


class Tensor:
    """Dense array plus an optional handle into the tape that produced it."""

    __slots__ = ("data", "grad", "tape", "node_id")

    def __init__(self, data: Array, tape: Tape | None = None, node_id: int | None = None):
        self.data = data
        self.grad: Array | None = None
        self.tape = tape
        self.node_id = node_id

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
        tag = f"node={self.node_id}" if self.node_id is not None else "const"
        return f"Tensor(shape={self.shape}, {tag})"

    # arithmetic sugar; every overload routes through the primitive functions
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)


def _tape_of(*tensors) -> Tape:
    tape = None
    for t in tensors:
        if isinstance(t, Tensor) and t.tape is not None:
            if tape is None:
                tape = t.tape
            elif tape is not t.tape:
                raise DetachedNode("operands belong to different tapes")
    if tape is None:
        raise DetachedNode("no operand carries a tape")
    return tape


def _lift(x, tape: Tape) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return tape.constant(np.asarray(x, dtype=tape.dtype))


def _check_finite(tape: Tape, arr: Array, op: str) -> None:
    if not tape.check_finite or arr.size == 0:
        return
    # max/min propagate NaN and expose Inf without allocating a bool mask
    hi = float(arr.max())
    lo = float(arr.min())
    if not (math.isfinite(hi) and math.isfinite(lo)):
        raise NonFinite(f"operation '{op}' produced a non-finite value")


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# primitive registry
# ---------------------------------------------------------------------------

_VJP: dict[str, Callable] = {}


def _primitive(name):
    def wrap(fn):
        _VJP[name] = fn
        return fn

    return wrap


def _binary(op: str, a, b, fwd) -> Tensor:
    tape = _tape_of(a, b)
    a = _lift(a, tape)
    b = _lift(b, tape)
    try:
        with np.errstate(all="ignore"):  # non-finites are caught below, not warned
            out = fwd(a.data, b.data)
    except ValueError as e:
        raise ShapeMismatch(f"{op}: {e}") from None
    _check_finite(tape, out, op)
    ctx = {"a": a.data, "b": b.data, "a_id": a.node_id, "b_id": b.node_id}
    ids = tuple(i for i in (a.node_id, b.node_id) if i is not None)
    return tape._record(op, ids, ctx, out)


def _pair_grads(ctx, ga, gb):
    out = []
    if ctx["a_id"] is not None:
        out.append((ctx["a_id"], _unbroadcast(ga, ctx["a"].shape)))
    if ctx["b_id"] is not None:
        out.append((ctx["b_id"], _unbroadcast(gb, ctx["b"].shape)))
    return out


def add(a, b) -> Tensor:
    return _binary("add", a, b, np.add)


@_primitive("add")
def _add_vjp(node, g):
    return _pair_grads(node.ctx, g, g)


def sub(a, b) -> Tensor:
    return _binary("sub", a, b, np.subtract)


@_primitive("sub")
def _sub_vjp(node, g):
    return _pair_grads(node.ctx, g, -g)


def mul(a, b) -> Tensor:
    return _binary("mul", a, b, np.multiply)


@_primitive("mul")
def _mul_vjp(node, g):
    return _pair_grads(node.ctx, g * node.ctx["b"], g * node.ctx["a"])


def div(a, b) -> Tensor:
    return _binary("div", a, b, np.divide)


@_primitive("div")
def _div_vjp(node, g):
    a, b = node.ctx["a"], node.ctx["b"]
    return _pair_grads(node.ctx, g / b, -g * a / (b * b))


def matmul(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a = _lift(a, tape)
    b = _lift(b, tape)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    with np.errstate(all="ignore"):
        out = a.data @ b.data
    _check_finite(tape, out, "matmul")
    ctx = {"a": a.data, "b": b.data, "a_id": a.node_id, "b_id": b.node_id}
    ids = tuple(i for i in (a.node_id, b.node_id) if i is not None)
    return tape._record("matmul", ids, ctx, out)


@_primitive("matmul")
def _matmul_vjp(node, g):
    ctx = node.ctx
    out = []
    if ctx["a_id"] is not None:
        out.append((ctx["a_id"], g @ ctx["b"].T))
    if ctx["b_id"] is not None:
        out.append((ctx["b_id"], ctx["a"].T @ g))
    return out


def _unary(op: str, x, fwd, ctx_extra=None) -> Tensor:
    tape = _tape_of(x)
    x = _lift(x, tape)
    with np.errstate(all="ignore"):
        out = fwd(x.data)
    _check_finite(tape, out, op)
    ctx = {"x": x.data, "out": out, "x_id": x.node_id}
    if ctx_extra:
        ctx.update(ctx_extra)
    ids = (x.node_id,) if x.node_id is not None else ()
    return tape._record(op, ids, ctx, out)


def _single_grad(ctx, gx):
    if ctx["x_id"] is None:
        return []
    return [(ctx["x_id"], gx)]


def neg(x) -> Tensor:
    return _unary("neg", x, np.negative)


@_primitive("neg")
def _neg_vjp(node, g):
    return _single_grad(node.ctx, -g)


def relu(x) -> Tensor:
    return _unary("relu", x, lambda v: np.maximum(v, 0))


@_primitive("relu")
def _relu_vjp(node, g):
    return _single_grad(node.ctx, g * (node.ctx["x"] > 0))


def softplus(x) -> Tensor:
    # stable: max(x, 0) + log1p(exp(-|x|))
    def fwd(v):
        return np.maximum(v, 0) + np.log1p(np.exp(-np.abs(v)))

    return _unary("softplus", x, fwd)


@_primitive("softplus")
def _softplus_vjp(node, g):
    x = node.ctx["x"]
    sig = 1.0 / (1.0 + np.exp(-np.clip(x, -60, 60)))
    return _single_grad(node.ctx, g * sig)


def sigmoid(x) -> Tensor:
    def fwd(v):
        return 1.0 / (1.0 + np.exp(-np.clip(v, -60, 60)))

    return _unary("sigmoid", x, fwd)


@_primitive("sigmoid")
def _sigmoid_vjp(node, g):
    s = node.ctx["out"]
    return _single_grad(node.ctx, g * s * (1.0 - s))


def tanh(x) -> Tensor:
    return _unary("tanh", x, np.tanh)


@_primitive("tanh")
def _tanh_vjp(node, g):
    t = node.ctx["out"]
    return _single_grad(node.ctx, g * (1.0 - t * t))


def exp(x) -> Tensor:
    return _unary("exp", x, np.exp)


@_primitive("exp")
def _exp_vjp(node, g):
    return _single_grad(node.ctx, g * node.ctx["out"])


def log(x) -> Tensor:
    return _unary("log", x, np.log)


@_primitive("log")
def _log_vjp(node, g):
    return _single_grad(node.ctx, g / node.ctx["x"])


def sqrt(x) -> Tensor:
    return _unary("sqrt", x, np.sqrt)


@_primitive("sqrt")
def _sqrt_vjp(node, g):
    return _single_grad(node.ctx, g * 0.5 / node.ctx["out"])


def square(x) -> Tensor:
    return _unary("square", x, np.square)


@_primitive("square")
def _square_vjp(node, g):
    return _single_grad(node.ctx, g * 2.0 * node.ctx["x"])


def power(x, p: float) -> Tensor:
    if not isinstance(p, (int, float)):
        raise TypeError("power exponent must be a python scalar")
    return _unary("power", x, lambda v: np.power(v, p), {"p": float(p)})


@_primitive("power")
def _power_vjp(node, g):
    p = node.ctx["p"]
    x = node.ctx["x"]
    return _single_grad(node.ctx, g * p * np.power(x, p - 1.0))


def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    tape = _tape_of(x)
    x = _lift(x, tape)
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))
    _check_finite(tape, out, "sum")
    ctx = {
        "x_id": x.node_id,
        "in_shape": x.shape,
        "axes": _axis_tuple(axis, x.data.ndim),
        "keepdims": keepdims,
    }
    ids = (x.node_id,) if x.node_id is not None else ()
    return tape._record("sum", ids, ctx, out)


def _expand_reduced(g: Array, in_shape, axes, keepdims) -> Array:
    if not keepdims:
        shape = list(in_shape)
        for a in axes:
            shape[a] = 1
        g = g.reshape(shape)
    return np.broadcast_to(g, in_shape)


@_primitive("sum")
def _sum_vjp(node, g):
    ctx = node.ctx
    if ctx["x_id"] is None:
        return []
    gx = _expand_reduced(np.asarray(g), ctx["in_shape"], ctx["axes"], ctx["keepdims"])
    return [(ctx["x_id"], np.ascontiguousarray(gx))]


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    tape = _tape_of(x)
    x = _lift(x, tape)
    out = np.asarray(x.data.mean(axis=axis, keepdims=keepdims))
    _check_finite(tape, out, "mean")
    axes = _axis_tuple(axis, x.data.ndim)
    count = 1
    for a in axes:
        count *= x.shape[a]
    ctx = {
        "x_id": x.node_id,
        "in_shape": x.shape,
        "axes": axes,
        "keepdims": keepdims,
        "count": count,
    }
    ids = (x.node_id,) if x.node_id is not None else ()
    return tape._record("mean", ids, ctx, out)


@_primitive("mean")
def _mean_vjp(node, g):
    ctx = node.ctx
    if ctx["x_id"] is None:
        return []
    gx = _expand_reduced(np.asarray(g), ctx["in_shape"], ctx["axes"], ctx["keepdims"])
    return [(ctx["x_id"], np.ascontiguousarray(gx / ctx["count"]))]


def max_(x, axis=None, keepdims: bool = False) -> Tensor:
    """Max reduction; ties route their subgradient to the first argmax."""
    tape = _tape_of(x)
    x = _lift(x, tape)
    out = np.asarray(x.data.max(axis=axis, keepdims=keepdims))
    _check_finite(tape, out, "max")
    ctx = {
        "x_id": x.node_id,
        "x": x.data,
        "axes": _axis_tuple(axis, x.data.ndim),
        "in_shape": x.shape,
        "keepdims": keepdims,
    }
    ids = (x.node_id,) if x.node_id is not None else ()
    return tape._record("max", ids, ctx, out)


@_primitive("max")
def _max_vjp(node, g):
    ctx = node.ctx
    if ctx["x_id"] is None:
        return []
    x = ctx["x"]
    axes = ctx["axes"]
    # move reduced axes last, flatten them, one-hot the first argmax
    order = [i for i in range(x.ndim) if i not in axes] + list(axes)
    moved = np.transpose(x, order)
    lead = moved.shape[: x.ndim - len(axes)]
    flat = moved.reshape(lead + (-1,))
    idx = flat.argmax(axis=-1)
    onehot = np.zeros_like(flat)
    np.put_along_axis(onehot, idx[..., None], 1.0, axis=-1)
    gexp = _expand_reduced(np.asarray(g), ctx["in_shape"], axes, ctx["keepdims"])
    gmoved = np.transpose(gexp, order).reshape(lead + (-1,))
    gx = (onehot * gmoved).reshape(moved.shape)
    inv = np.argsort(order)
    return [(ctx["x_id"], np.ascontiguousarray(np.transpose(gx, inv)))]


def logsumexp(x, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Numerically stable log(sum(exp(x))) along one axis."""
    tape = _tape_of(x)
    x = _lift(x, tape)
    ax = axis % x.data.ndim
    m = x.data.max(axis=ax, keepdims=True)
    z = np.exp(x.data - m)
    s = z.sum(axis=ax, keepdims=True)
    out = m + np.log(s)
    softmax = z / s
    if not keepdims:
        out = np.squeeze(out, axis=ax)
    _check_finite(tape, out, "logsumexp")
    ctx = {"x_id": x.node_id, "softmax": softmax, "axis": ax, "keepdims": keepdims}
    ids = (x.node_id,) if x.node_id is not None else ()
    return tape._record("logsumexp", ids, ctx, out)


@_primitive("logsumexp")
def _logsumexp_vjp(node, g):
    ctx = node.ctx
    if ctx["x_id"] is None:
        return []
    g = np.asarray(g)
    if not ctx["keepdims"]:
        g = np.expand_dims(g, ctx["axis"])
    return [(ctx["x_id"], np.ascontiguousarray(g * ctx["softmax"]))]


def reshape(x, shape) -> Tensor:
    tape = _tape_of(x)
    x = _lift(x, tape)
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch(f"cannot reshape {x.shape} to {shape}") from None
    ctx = {"x_id": x.node_id, "in_shape": x.shape}
    ids = (x.node_id,) if x.node_id is not None else ()
    return tape._record("reshape", ids, ctx, np.ascontiguousarray(out))


@_primitive("reshape")
def _reshape_vjp(node, g):
    ctx = node.ctx
    if ctx["x_id"] is None:
        return []
    return [(ctx["x_id"], np.ascontiguousarray(g.reshape(ctx["in_shape"])))]


def slice_(x, slices) -> Tensor:
    """Slice with a tuple of python slices (step 1 only)."""
    tape = _tape_of(x)
    x = _lift(x, tape)
    if not isinstance(slices, tuple):
        slices = (slices,)
    for s in slices:
        if isinstance(s, slice) and s.step not in (None, 1):
            raise ShapeMismatch("slice_ supports step 1 only")
    out = np.ascontiguousarray(x.data[slices])
    ctx = {"x_id": x.node_id, "in_shape": x.shape, "slices": slices}
    ids = (x.node_id,) if x.node_id is not None else ()
    return tape._record("slice", ids, ctx, out)


@_primitive("slice")
def _slice_vjp(node, g):
    ctx = node.ctx
    if ctx["x_id"] is None:
        return []
    gx = np.zeros(ctx["in_shape"], dtype=g.dtype)
    gx[ctx["slices"]] = g
    return [(ctx["x_id"], gx)]


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    tape = _tape_of(*parts)
    parts = [_lift(p, tape) for p in parts]
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as e:
        raise ShapeMismatch(f"concat: {e}") from None
    _check_finite(tape, out, "concat")
    ax = axis % out.ndim
    sizes = [p.shape[ax] for p in parts]
    ctx = {"ids": [p.node_id for p in parts], "sizes": sizes, "axis": ax}
    ids = tuple(p.node_id for p in parts if p.node_id is not None)
    return tape._record("concat", ids, ctx, out)


@_primitive("concat")
def _concat_vjp(node, g):
    ctx = node.ctx
    out = []
    offset = 0
    for nid, size in zip(ctx["ids"], ctx["sizes"]):
        sl = [slice(None)] * g.ndim
        sl[ctx["axis"]] = slice(offset, offset + size)
        if nid is not None:
            out.append((nid, np.ascontiguousarray(g[tuple(sl)])))
        offset += size
    return out


# ---------------------------------------------------------------------------
# convolution family (im2col lowering; desk-scale images, correctness first)
# ---------------------------------------------------------------------------


def _conv_out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _im2col(x: Array, kh: int, kw: int, stride: int, pad: int) -> tuple[Array, int, int]:
    """Patch matrix (N, C*KH*KW, OH*OW); copy stays in source axis order."""
    n, c, h, w = x.shape
    if pad:
        xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
        xp[:, :, pad : pad + h, pad : pad + w] = x
        x = xp
    oh = _conv_out_size(h, kh, stride, pad)
    ow = _conv_out_size(w, kw, stride, pad)
    s0, s1, s2, s3 = x.strides
    view = np.lib.stride_tricks.as_strided(
        x,
        shape=(n, c, kh, kw, oh, ow),
        strides=(s0, s1, s2, s3, s2 * stride, s3 * stride),
        writeable=False,
    )
    cols = np.ascontiguousarray(view).reshape(n, c * kh * kw, oh * ow)
    return cols, oh, ow


def _col2im(dcols: Array, x_shape, kh, kw, stride, pad, oh, ow) -> Array:
    """Adjoint of _im2col: dcols is (N, C*KH*KW, OH*OW)."""
    n, c, h, w = x_shape
    dx = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
    d6 = dcols.reshape(n, c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i : i + oh * stride : stride, j : j + ow * stride : stride] += d6[:, :, i, j]
    if pad:
        dx = dx[:, :, pad : pad + h, pad : pad + w]
    return np.ascontiguousarray(dx)


def conv2d(x, w, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation: x (N,C,H,W) with filters w (F,C,KH,KW)."""
    tape = _tape_of(x, w)
    x = _lift(x, tape)
    w = _lift(w, tape)
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"conv2d: bad shapes x={x.shape} w={w.shape}")
    n, c, h, wid = x.shape
    f, _, kh, kw = w.shape
    if h + 2 * padding < kh or wid + 2 * padding < kw:
        raise ShapeMismatch("conv2d: kernel larger than padded input")
    cols, oh, ow = _im2col(x.data, kh, kw, stride, padding)
    wmat = w.data.reshape(f, c * kh * kw)
    with np.errstate(all="ignore"):
        out = np.matmul(wmat, cols).reshape(n, f, oh, ow)
    _check_finite(tape, out, "conv2d")
    ctx = {
        "x_id": x.node_id,
        "w_id": w.node_id,
        "cols": cols,
        "wmat": wmat,
        "x_shape": x.shape,
        "w_shape": w.shape,
        "stride": stride,
        "pad": padding,
        "oh": oh,
        "ow": ow,
    }
    ids = tuple(i for i in (x.node_id, w.node_id) if i is not None)
    return tape._record("conv2d", ids, ctx, out)


@_primitive("conv2d")
def _conv2d_vjp(node, g):
    ctx = node.ctx
    n, f = g.shape[0], g.shape[1]
    oh, ow = ctx["oh"], ctx["ow"]
    g3 = g.reshape(n, f, oh * ow)
    out = []
    if ctx["w_id"] is not None:
        dw = np.matmul(g3, ctx["cols"].transpose(0, 2, 1)).sum(axis=0)
        out.append((ctx["w_id"], dw.reshape(ctx["w_shape"])))
    if ctx["x_id"] is not None:
        _, c, kh, kw = ctx["w_shape"]
        dcols = np.matmul(ctx["wmat"].T, g3)
        dx = _col2im(dcols, ctx["x_shape"], kh, kw, ctx["stride"], ctx["pad"], oh, ow)
        out.append((ctx["x_id"], dx))
    return out


def conv2d_transpose(x, w, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed conv: x (N,C,H,W), w (C,F,KH,KW); output (N,F,H',W')
    with H' = (H-1)*stride + KH - 2*padding. Adjoint of conv2d."""
    tape = _tape_of(x, w)
    x = _lift(x, tape)
    w = _lift(w, tape)
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[0]:
        raise ShapeMismatch(f"conv2d_transpose: bad shapes x={x.shape} w={w.shape}")
    n, c, h, wid = x.shape
    _, f, kh, kw = w.shape
    oh = (h - 1) * stride + kh - 2 * padding
    ow = (wid - 1) * stride + kw - 2 * padding
    if oh <= 0 or ow <= 0:
        raise ShapeMismatch("conv2d_transpose: non-positive output size")
    wmat = w.data.reshape(c, f * kh * kw)
    x3 = x.data.reshape(n, c, h * wid)
    with np.errstate(all="ignore"):
        dcols = np.matmul(wmat.T, x3)  # (N, F*KH*KW, H*W)
        out = _col2im(dcols, (n, f, oh, ow), kh, kw, stride, padding, h, wid)
    _check_finite(tape, out, "conv2d_transpose")
    ctx = {
        "x_id": x.node_id,
        "w_id": w.node_id,
        "x3": x3,
        "wmat": wmat,
        "x_shape": x.shape,
        "w_shape": w.shape,
        "stride": stride,
        "pad": padding,
    }
    ids = tuple(i for i in (x.node_id, w.node_id) if i is not None)
    return tape._record("conv2d_transpose", ids, ctx, out)


@_primitive("conv2d_transpose")
def _conv2d_transpose_vjp(node, g):
    ctx = node.ctx
    n, c, h, wid = ctx["x_shape"]
    _, f, kh, kw = ctx["w_shape"]
    gcols, oh2, ow2 = _im2col(g, kh, kw, ctx["stride"], ctx["pad"])
    # oh2 == h and ow2 == wid by construction
    out = []
    if ctx["x_id"] is not None:
        dx = np.matmul(ctx["wmat"], gcols).reshape(n, c, h, wid)
        out.append((ctx["x_id"], dx))
    if ctx["w_id"] is not None:
        dw = np.matmul(ctx["x3"], gcols.transpose(0, 2, 1)).sum(axis=0)
        out.append((ctx["w_id"], dw.reshape(ctx["w_shape"])))
    return out


def max_pool2d(x) -> Tensor:
    """2x2 max pooling with stride 2; odd trailing rows/cols are dropped."""
    tape = _tape_of(x)
    x = _lift(x, tape)
    if x.data.ndim != 4:
        raise ShapeMismatch("max_pool2d expects NCHW")
    n, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    if ho == 0 or wo == 0:
        raise ShapeMismatch("max_pool2d: input smaller than window")
    v = x.data[:, :, : ho * 2, : wo * 2].reshape(n, c, ho, 2, wo, 2)
    windows = np.ascontiguousarray(v.transpose(0, 1, 2, 4, 3, 5)).reshape(n, c, ho, wo, 4)
    idx = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
    out = np.ascontiguousarray(out)
    ctx = {"x_id": x.node_id, "idx": idx, "in_shape": x.shape}
    ids = (x.node_id,) if x.node_id is not None else ()
    return tape._record("max_pool2d", ids, ctx, out)


@_primitive("max_pool2d")
def _max_pool2d_vjp(node, g):
    ctx = node.ctx
    if ctx["x_id"] is None:
        return []
    n, c, h, w = ctx["in_shape"]
    ho, wo = h // 2, w // 2
    scatter = np.zeros((n, c, ho, wo, 4), dtype=g.dtype)
    np.put_along_axis(scatter, ctx["idx"][..., None], g[..., None], axis=-1)
    gx = np.zeros((n, c, h, w), dtype=g.dtype)
    gx[:, :, : ho * 2, : wo * 2] = (
        scatter.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * 2, wo * 2)
    )
    return [(ctx["x_id"], gx)]


def softmax(x, axis: int = -1) -> Tensor:
    """Softmax built from the stable logsumexp primitive."""
    lse = logsumexp(x, axis=axis, keepdims=True)
    return exp(sub(x, lse))


# ---------------------------------------------------------------------------
# generic dispatch + backward
# ---------------------------------------------------------------------------

_FORWARD: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "matmul": matmul,
    "conv2d": conv2d,
    "conv2d_transpose": conv2d_transpose,
    "relu": relu,
    "softplus": softplus,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "square": square,
    "power": power,
    "sum": sum_,
    "mean": mean,
    "max": max_,
    "logsumexp": logsumexp,
    "reshape": reshape,
    "slice": slice_,
    "concat": concat,
    "max_pool2d": max_pool2d,
    "softmax": softmax,
}


def forward(tape: Tape, op_kind: str, inputs: Sequence[Tensor], params: dict | None = None) -> Tensor:
    """Apply a primitive by name; inputs must live on ``tape`` (or be constants)."""
    if op_kind not in _FORWARD:
        raise KeyError(f"unknown op_kind '{op_kind}'")
    for t in inputs:
        if isinstance(t, Tensor) and t.tape is not None and t.tape is not tape:
            raise DetachedNode("input recorded on a different tape")
    params = dict(params or {})
    fn = _FORWARD[op_kind]
    if op_kind == "concat":
        return fn(list(inputs), **params)
    return fn(*inputs, **params)


def backward(loss: Tensor, wrt: Sequence[Tensor] | None = None) -> dict[int, Array]:
    """Reverse-replay the tape from ``loss``; returns node_id -> gradient.

    The tape is not mutated, so repeated calls produce bit-identical
    results. When ``wrt`` is given, each tensor's ``.grad`` is also filled
    in for convenience.
    """
    if loss.tape is None or loss.node_id is None:
        raise DetachedNode("loss is not recorded on a tape")
    if loss.size != 1:
        raise LossNotScalar(f"loss has shape {loss.shape}; expected a scalar")
    tape = loss.tape
    if wrt:
        for t in wrt:
            if t.tape is not tape or t.node_id is None:
                raise DetachedNode("wrt tensor is not recorded on this tape")
    nodes = tape.nodes
    grads: dict[int, Array] = {
        loss.node_id: np.ones(nodes[loss.node_id].shape, dtype=tape.dtype)
    }
    with np.errstate(all="ignore"):
        for nid in range(loss.node_id, -1, -1):
            g = grads.get(nid)
            if g is None:
                continue
            node = nodes[nid]
            if node.op == "leaf":
                continue
            for iid, contrib in _VJP[node.op](node, g):
                contrib = np.asarray(contrib, dtype=tape.dtype)
                if iid in grads:
                    grads[iid] = grads[iid] + contrib
                else:
                    grads[iid] = contrib
    if wrt:
        for t in wrt:
            t.grad = grads.get(t.node_id, np.zeros(t.shape, dtype=tape.dtype))
    return grads


def grad_of(grads: dict[int, Array], t: Tensor) -> Array:
    """Gradient for ``t`` from a backward() result, zeros if off-path."""
    g = grads.get(t.node_id)
    if g is None:
        return np.zeros(t.shape, dtype=t.dtype)
    return g


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------


@dataclass
class CheckReport:
    """Outcome of comparing an analytic gradient against central differences."""

    max_rel_error: float
    passed: bool
    skipped: bool
    nonsmooth_coords: list[int] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    analytic: Array | None = None
    numeric: Array | None = None


def _tape_value_and_grad(fn: Callable[[Tensor], Tensor]):
    def value(x: Array) -> float:
        tape = Tape(dtype=np.float64)
        out = fn(tape.leaf(x))
        return float(out.data)

    def gradient(x: Array) -> Array:
        tape = Tape(dtype=np.float64)
        t = tape.leaf(x)
        out = fn(t)
        grads = backward(out)
        return grad_of(grads, t)

    return value, gradient


def finite_diff_check(
    function,
    point,
    step: float = 1e-4,
    tolerance: float = 1e-5,
    gradient=None,
    atol: float = 1e-8,
) -> CheckReport:
    """Compare an analytic gradient with central differences at ``point``.

    ``function`` is either a plain callable ``f(ndarray) -> float`` together
    with an explicit ``gradient`` callable, or (when ``gradient`` is None) a
    graph builder ``f(Tensor) -> Tensor`` evaluated on a float64 tape, whose
    analytic gradient comes from :func:`backward`.

    Coordinates where the left and right one-sided differences disagree are
    flagged as non-smooth and excluded from the comparison (relu-style kinks
    have no meaningful central difference). If every coordinate is flagged
    the whole check is skipped with a warning.
    """
    x = np.asarray(point, dtype=np.float64)
    if gradient is None:
        value_fn, grad_fn = _tape_value_and_grad(function)
    else:
        value_fn, grad_fn = (lambda v: float(function(v))), gradient

    base = value_fn(x)
    if not math.isfinite(base):
        raise NonFiniteEvaluation("function is non-finite at the check point")
    analytic = np.asarray(grad_fn(x), dtype=np.float64).reshape(x.shape)

    numeric = np.zeros_like(x)
    nonsmooth: list[int] = []
    warnings: list[str] = []
    flat = x.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        h = step * max(1.0, abs(flat[i]))
        orig = flat[i]
        flat[i] = orig + h
        fp = value_fn(x)
        flat[i] = orig - h
        fm = value_fn(x)
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NonFiniteEvaluation(f"function non-finite near coordinate {i}")
        central = (fp - fm) / (2 * h)
        right = (fp - base) / h
        left = (base - fm) / h
        scale = max(abs(left), abs(right), 1.0)
        if abs(right - left) > 0.1 * scale + 10 * step:
            nonsmooth.append(i)
            warnings.append(f"coordinate {i}: one-sided derivatives disagree "
                            f"({left:.4g} vs {right:.4g}); skipping (kink)")
            continue
        num_flat[i] = central

    active = [i for i in range(flat.size) if i not in set(nonsmooth)]
    if not active:
        warnings.append("all coordinates flagged non-smooth; check skipped")
        return CheckReport(math.nan, passed=False, skipped=True,
                           nonsmooth_coords=nonsmooth, warnings=warnings,
                           analytic=analytic, numeric=numeric)

    max_rel = 0.0
    a_flat = analytic.reshape(-1)
    for i in active:
        a, n = a_flat[i], num_flat[i]
        denom = max(abs(a), abs(n))
        if denom <= atol:
            continue
        max_rel = max(max_rel, abs(a - n) / denom)
    return CheckReport(max_rel, passed=max_rel < tolerance, skipped=False,
                       nonsmooth_coords=nonsmooth, warnings=warnings,
                       analytic=analytic, numeric=numeric)


PRIMITIVE_OPS = tuple(sorted(_FORWARD.keys()))

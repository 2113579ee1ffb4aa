"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable operation records its parents and a backward closure on
the output tensor.  Nodes carry a monotonically increasing creation id, so the
reverse topological order of a graph is simply descending id order.
"""
from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64
LOG_CLAMP = 1e-12
DEFAULT_LEAKY_SLOPE = 0.2

_ids = itertools.count()
_grad_enabled = True


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Rng:
    """Seeded random source backed by numpy's PCG64 bit generator.

    PCG64 output and numpy's Generator transforms for ``random`` and
    ``standard_normal`` are stable across platforms for a fixed seed.
    ``derive`` spawns an independent child stream keyed by integers, which is
    how per-epoch and per-module streams are obtained without shared state.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._key: tuple[int, ...] = ()
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def derive(self, *key: int) -> "Rng":
        child = Rng.__new__(Rng)
        child.seed = self.seed
        child._key = self._key + tuple(int(k) for k in key)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=child._key)
        child._gen = np.random.Generator(np.random.PCG64(ss))
        return child

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, mean=0.0, std=1.0, size=None):
        return mean + std * self._gen.standard_normal(size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_id", "op")

    def __init__(self, data, requires_grad: bool = False):
        if not (isinstance(data, np.ndarray) and data.dtype == DTYPE):
            data = np.array(data, dtype=DTYPE)
        self.data = data
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._id = next(_ids)
        self.op = "leaf"

    # -- introspection -------------------------------------------------
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

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def backward(self) -> None:
        backward(self)

    # -- operators -----------------------------------------------------
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

    def __getitem__(self, idx):
        return slice_(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=requires_grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DTYPE))


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out.op = op
    return out


def check_finite(x: Tensor | np.ndarray, where: str) -> None:
    """Raise NonFiniteError if ``x`` holds NaN or Inf."""
    arr = x.data if isinstance(x, Tensor) else x
    if not np.all(np.isfinite(arr)):
        bad = int(np.size(arr) - np.count_nonzero(np.isfinite(arr)))
        raise NonFiniteError(f"non-finite values ({bad} elements) at {where}")


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor."""
    if loss.ndim != 0:
        raise ShapeError(f"backward requires a scalar (rank-0) loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss is not attached to a graph with requires_grad tensors")

    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t._id in nodes:
            continue
        nodes[t._id] = t
        stack.extend(p for p in t._parents if p.requires_grad and p._id not in nodes)

    grads: dict[int, np.ndarray] = {loss._id: np.ones((), dtype=DTYPE)}
    for nid in sorted(nodes, reverse=True):
        t = nodes[nid]
        g = grads.pop(nid, None)
        if g is None:
            continue
        if t.grad is not None:
            t.grad = t.grad + g
        else:
            t.grad = g.copy() if t._backward is None else g
        if t._backward is None:
            continue
        for parent, pg in zip(t._parents, t._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._id in grads:
                grads[parent._id] = grads[parent._id] + pg
            else:
                grads[parent._id] = pg


# ---------------------------------------------------------------------------
# elementwise


def _binary_operands(a, b) -> tuple[Tensor, Tensor]:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"elementwise shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def _finite_inputs(op: str, *xs: Tensor) -> None:
    for x in xs:
        check_finite(x, f"input of {op}")


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _finite_inputs("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _finite_inputs("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _finite_inputs("mul", a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _finite_inputs("div", a, b)
    out = a.data / b.data

    def bw(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _node(out, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    _finite_inputs("neg", a)
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a) -> Tensor:
    a = as_tensor(a)
    _finite_inputs("exp", a)
    out = np.exp(np.minimum(a.data, 700.0))
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    """Natural log with the input clamped to at least 1e-12."""
    a = as_tensor(a)
    _finite_inputs("log", a)
    clamped = np.maximum(a.data, LOG_CLAMP)

    def bw(g):
        return (np.where(a.data >= LOG_CLAMP, g / clamped, 0.0),)

    return _node(np.log(clamped), (a,), bw, "log")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    _finite_inputs("sigmoid", a)
    out = _sigmoid(a.data)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a) -> Tensor:
    a = as_tensor(a)
    _finite_inputs("relu", a)
    pos = a.data > 0
    return _node(np.where(pos, a.data, 0.0), (a,), lambda g: (np.where(pos, g, 0.0),), "relu")


def leaky_relu(a, slope: float = DEFAULT_LEAKY_SLOPE) -> Tensor:
    a = as_tensor(a)
    _finite_inputs("leaky_relu", a)
    pos = a.data > 0
    out = np.where(pos, a.data, slope * a.data)
    return _node(out, (a,), lambda g: (np.where(pos, g, slope * g),), "leaky_relu")


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    _finite_inputs("power", a)
    p = float(p)
    out = a.data ** p
    return _node(out, (a,), lambda g: (g * p * a.data ** (p - 1.0),), "power")


def abs_(a) -> Tensor:
    a = as_tensor(a)
    _finite_inputs("abs", a)
    return _node(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


_UNARY = {
    "neg": neg, "exp": exp, "log": log, "sigmoid": sigmoid,
    "relu": relu, "abs": abs_,
}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(kind: str, a, b=None, **kw) -> Tensor:
    """Dispatch an elementwise op by name.

    ``leaky_relu`` takes ``slope`` and ``power`` takes ``p`` as keywords.
    """
    if kind in _BINARY:
        if b is None:
            raise ValueError(f"{kind} needs two operands")
        return _BINARY[kind](a, b)
    if kind == "leaky_relu":
        return leaky_relu(a, kw.get("slope", DEFAULT_LEAKY_SLOPE))
    if kind == "power":
        return power(a, kw["p"])
    if kind in _UNARY:
        return _UNARY[kind](a)
    raise ValueError(f"unknown elementwise op {kind!r}")


# ---------------------------------------------------------------------------
# linear algebra and normalisation of rows


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of rank-2 operands, or batched over one leading axis."""
    if a.ndim not in (2, 3) or b.ndim != a.ndim:
        raise ShapeError(f"matmul expects two rank-2 or two rank-3 tensors, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents disagree: {a.shape} @ {b.shape}")
    if a.ndim == 3 and a.shape[0] != b.shape[0]:
        raise ShapeError(f"matmul batch extents disagree: {a.shape} @ {b.shape}")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _node(a.data @ b.data, (a, b), bw, "matmul")


def _axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} invalid for rank {ndim}")
    return axis % ndim


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _axis(axis, x.ndim)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (x,), bw, "softmax")


# ---------------------------------------------------------------------------
# reductions and shape manipulation


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is not None:
        axes = tuple(_axis(a, x.ndim) for a in np.atleast_1d(axis))
    else:
        axes = tuple(range(x.ndim))
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(np.asarray(out), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        n = int(np.prod([x.shape[_axis(a, x.ndim)] for a in np.atleast_1d(axis)]))
    return mul(sum_(x, axis, keepdims), 1.0 / n)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}") from exc
    return _node(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    if sorted(_axis(a, x.ndim) for a in axes) != list(range(x.ndim)):
        raise ShapeError(f"invalid permutation {axes} for rank {x.ndim}")
    inverse = tuple(np.argsort(axes))
    return _node(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),), "transpose")


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise ShapeError("concat of an empty sequence")
    axis = _axis(axis, xs[0].ndim)
    for x in xs[1:]:
        if x.ndim != xs[0].ndim or any(
            x.shape[d] != xs[0].shape[d] for d in range(x.ndim) if d != axis
        ):
            raise ShapeError(f"concat shape mismatch along axis {axis}: {xs[0].shape} vs {x.shape}")
    bounds = np.cumsum([0] + [x.shape[axis] for x in xs])

    def bw(g):
        return tuple(
            np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return _node(np.concatenate([x.data for x in xs], axis=axis), xs, bw, "concat")


def slice_(x: Tensor, idx) -> Tensor:
    """Basic (non-fancy) indexing."""
    if not isinstance(idx, tuple):
        idx = (idx,)
    if any(not isinstance(i, (int, slice, type(Ellipsis))) for i in idx):
        raise TypeError("only integer, slice and Ellipsis indices are supported")
    out = x.data[idx]

    def bw(g):
        full = np.zeros(x.shape, dtype=DTYPE)
        full[idx] = g
        return (full,)

    return _node(np.array(out), (x,), bw, "slice")


def permute_rows(x: Tensor, order: np.ndarray) -> Tensor:
    """out[b, i] = x[b, order[b, i]] for x [B,T,...]; each order[b] must be a permutation."""
    order = np.asarray(order, dtype=np.intp)
    if order.shape != x.shape[:2]:
        raise ShapeError(f"permute_rows: order {order.shape} does not match {x.shape[:2]}")
    if not (np.sort(order, axis=1) == np.arange(x.shape[1])).all():
        raise ValueError("permute_rows: order rows must be permutations")
    idx = order.reshape(order.shape + (1,) * (x.ndim - 2))
    inverse = np.argsort(order, axis=1).reshape(idx.shape)

    def bw(g):
        return (np.take_along_axis(g, inverse, axis=1),)

    return _node(np.take_along_axis(x.data, idx, axis=1), (x,), bw, "permute_rows")


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    expanded = [reshape(x, x.shape[:axis] + (1,) + x.shape[axis:]) for x in xs]
    return concat(expanded, axis=axis)


# ---------------------------------------------------------------------------
# convolution


def conv_output_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    # xp is already padded: [B, C, Hp, Wp] -> [B*oh*ow, C*kh*kw]
    b, c = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : stride * (oh - 1) + 1 : stride, : stride * (ow - 1) + 1 : stride]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b * oh * ow, c * kh * kw)


def _col2im(cols: np.ndarray, shape: tuple[int, int, int, int], kh: int, kw: int,
            stride: int, oh: int, ow: int) -> np.ndarray:
    # scatter-add of _im2col columns back onto a [B, C, Hp, Wp] canvas
    b, c, hp, wp = shape
    cols = cols.reshape(b, oh, ow, c, kh, kw)
    out = np.zeros((b, hp, wp, c), dtype=DTYPE)
    hs, ws = stride * (oh - 1) + 1, stride * (ow - 1) + 1
    for i in range(kh):
        for j in range(kw):
            out[:, i : i + hs : stride, j : j + ws : stride, :] += cols[..., i, j]
    return out.transpose(0, 3, 1, 2)


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2D cross-correlation. x: [B,C_in,H,W], w: [C_out,C_in,kh,kw]."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects rank-4 input and weight, got {x.shape} and {w.shape}")
    bsz, cin, h, wd = x.shape
    cout, wcin, kh, kw = w.shape
    if wcin != cin:
        raise ShapeError(f"conv2d channel mismatch: input has {cin}, weight expects {wcin}")
    if stride < 1 or pad < 0:
        raise ShapeError(f"invalid stride {stride} / pad {pad}")
    if kh > h + 2 * pad or kw > wd + 2 * pad:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{wd + 2 * pad}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d bias shape {bias.shape} != ({cout},)")
    oh, ow = conv_output_size(h, kh, stride, pad), conv_output_size(wd, kw, stride, pad)

    xp = _pad(x.data, pad)
    cols = _im2col(xp, kh, kw, stride, oh, ow)
    wm = w.data.reshape(cout, -1)
    out = cols @ wm.T
    if bias is not None:
        out += bias.data
    out = out.reshape(bsz, oh, ow, cout).transpose(0, 3, 1, 2)

    def bw(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gx = gw = gb = None
        if x.requires_grad:
            if stride == 1 and cout < cin and pad < min(kh, kw):
                # full correlation of g with the flipped kernel; cheaper when C_out < C_in
                gp = np.pad(g, ((0, 0), (0, 0), (kh - 1 - pad,) * 2, (kw - 1 - pad,) * 2))
                wf = w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(cin, -1)
                gx = (_im2col(gp, kh, kw, 1, h, wd) @ wf.T).reshape(bsz, h, wd, cin).transpose(0, 3, 1, 2)
            else:
                gxp = _col2im(gm @ wm, xp.shape, kh, kw, stride, oh, ow)
                gx = gxp[:, :, pad : pad + h, pad : pad + wd]
        if w.requires_grad:
            gw = (gm.T @ cols).reshape(w.shape)
        if bias is not None and bias.requires_grad:
            gb = gm.sum(axis=0)
        return gx, gw, gb

    parents = (x, w) if bias is None else (x, w, bias)
    return _node(np.ascontiguousarray(out), parents, bw, "conv2d")


def conv_transpose_output_size(n: int, k: int, stride: int, pad: int, output_padding: int = 0) -> int:
    return (n - 1) * stride - 2 * pad + k + output_padding


def conv2d_transpose(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1,
                     pad: int = 0, output_padding: int = 0) -> Tensor:
    """Transposed convolution, the adjoint of ``conv2d`` with the same weight.

    x: [B,C_in,H,W]; w: [C_in,C_out,kh,kw] (the shape conv2d would use to map
    C_out channels back to C_in).
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d_transpose expects rank-4 input and weight, got {x.shape} and {w.shape}")
    bsz, cin, h, wd = x.shape
    wcin, cout, kh, kw = w.shape
    if wcin != cin:
        raise ShapeError(f"conv2d_transpose channel mismatch: input has {cin}, weight expects {wcin}")
    if not 0 <= output_padding < stride and not (stride == 1 and output_padding == 0):
        raise ShapeError(f"output_padding {output_padding} must be smaller than stride {stride}")
    oh = conv_transpose_output_size(h, kh, stride, pad, output_padding)
    ow = conv_transpose_output_size(wd, kw, stride, pad, output_padding)
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d_transpose output would be empty ({oh}x{ow})")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d_transpose bias shape {bias.shape} != ({cout},)")

    canvas = (bsz, cout, oh + 2 * pad, ow + 2 * pad)
    wm = w.data.reshape(cin, -1)
    xm = x.data.transpose(0, 2, 3, 1).reshape(-1, cin)
    outp = _col2im(xm @ wm, canvas, kh, kw, stride, h, wd)
    out = outp[:, :, pad : pad + oh, pad : pad + ow]
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1)

    def bw(g):
        gx = gw = gb = None
        cols = _im2col(_pad(g, pad), kh, kw, stride, h, wd)
        if x.requires_grad:
            gx = (cols @ wm.T).reshape(bsz, h, wd, cin).transpose(0, 3, 1, 2)
        if w.requires_grad:
            gw = (xm.T @ cols).reshape(w.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = (x, w) if bias is None else (x, w, bias)
    return _node(np.ascontiguousarray(out), parents, bw, "conv2d_transpose")


# ---------------------------------------------------------------------------
# finite differences


class FiniteDiffReport:
    """Outcome of comparing autograd against central differences."""

    def __init__(self, max_rel_error: float, checked: int, excluded: list[int], tol: float):
        self.max_rel_error = max_rel_error
        self.checked = checked
        self.excluded = excluded
        self.tol = tol

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol

    def __repr__(self):
        return (f"FiniteDiffReport(max_rel_error={self.max_rel_error:.3e}, checked={self.checked}, "
                f"excluded={len(self.excluded)}, passed={self.passed})")


def relative_error(a, b) -> np.ndarray:
    a, b = np.asarray(a, dtype=DTYPE), np.asarray(b, dtype=DTYPE)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5, tol: float = 1e-5,
                      indices: Iterable[int] | None = None, kink_tol: float = 1e-2) -> FiniteDiffReport:
    """Compare the autograd gradient of scalar ``f`` at ``x`` with central differences.

    A coordinate is excluded (a kink, e.g. relu at 0) when its one-sided
    differences disagree by more than ``kink_tol`` relative to their size.
    ``indices`` restricts the check to a subset of flat positions.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x.grad = None
    x.requires_grad = True
    out = f(x)
    if out.requires_grad:
        backward(out)
    analytic = np.zeros(x.shape) if x.grad is None else x.grad.copy()
    x.grad = None

    flat = x.data.reshape(-1)
    positions = range(flat.size) if indices is None else indices
    worst, checked, excluded = 0.0, 0, []
    with no_grad():
        f0 = float(f(x).data)
        for i in positions:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(x).data)
            flat[i] = orig - h
            fm = float(f(x).data)
            flat[i] = orig
            fwd, bwd = (fp - f0) / h, (f0 - fm) / h
            if abs(fwd - bwd) > kink_tol * max(1.0, abs(fwd), abs(bwd)):
                excluded.append(i)
                continue
            numeric = (fp - fm) / (2 * h)
            worst = max(worst, float(relative_error(analytic.reshape(-1)[i], numeric)))
            checked += 1
    return FiniteDiffReport(worst, checked, excluded, tol)


def numerical_grad(f: Callable[[], float], arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a closure over ``arr`` (mutated in place, restored)."""
    flat = arr.reshape(-1)
    out = np.zeros(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        out[i] = (fp - fm) / (2 * h)
    return out.reshape(arr.shape)


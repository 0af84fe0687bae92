"""Float64 tensors with reverse-mode automatic differentiation.

Each :class:`Tensor` produced by an operation on a gradient-tracking input
keeps references to its parents together with a backward rule.  The chain of
references is the tape of that forward pass; there is no global recorder, so
independent forward passes never share state.

Broadcasting is deliberately narrow: operands must have identical shapes,
or equal rank with extent 1 on the broadcast axes, or one operand must be a
0-d scalar.  Anything else raises :class:`~vitae.errors.ShapeMismatch`.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from .errors import NonFinite, NotScalar, ShapeMismatch

DTYPE = np.float64
DEFAULT_LEAKY_SLOPE = 0.1

OP_KINDS = (
    "add", "sub", "mul", "div", "neg", "matmul", "sum", "mean", "reshape",
    "transpose", "slice", "concat", "take", "exp", "log", "sqrt", "sin", "cos",
    "sigmoid", "softplus", "leakyrelu", "clamp", "interp2d",
    "bernoulli_loglik",
)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = "leaf"
        self._parents: tuple = ()
        self._backward = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __len__(self):
        return self.data.shape[0]

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # -- operator sugar ------------------------------------------------
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self):
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(out: np.ndarray, op: str):
    # A single reduction catches NaN/Inf; the elementwise scan only runs on failure.
    if not np.isfinite(out.sum()) and not np.isfinite(out).all():
        raise NonFinite(f"{op} produced a non-finite value")


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


# -- broadcasting --------------------------------------------------------
def _broadcast_shape(a: tuple, b: tuple, op: str) -> tuple:
    if a == b:
        return a
    if len(a) == 0:
        return b
    if len(b) == 0:
        return a
    if len(a) != len(b):
        raise ShapeMismatch(f"{op}: rank mismatch {a} vs {b}")
    shape = []
    for m, n in zip(a, b):
        if m == n or n == 1:
            shape.append(m)
        elif m == 1:
            shape.append(n)
        else:
            raise ShapeMismatch(f"{op}: cannot broadcast {a} with {b}")
    return tuple(shape)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    axes = tuple(i for i, (m, n) in enumerate(zip(shape, g.shape)) if m == 1 and n != 1)
    return g.sum(axis=axes, keepdims=True)


# -- elementwise binary ----------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "mul")

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


# -- linear algebra --------------------------------------------------------
def matmul(a, b) -> Tensor:
    """Matrix product; batched over equal leading axes, or a batch times a 2-D matrix."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    if a.ndim != b.ndim and min(a.ndim, b.ndim) != 2:
        raise ShapeMismatch(f"matmul: batch axes {a.shape} vs {b.shape}")
    if a.ndim == b.ndim and a.shape[:-2] != b.shape[:-2]:
        raise ShapeMismatch(f"matmul: batch axes {a.shape} vs {b.shape}")

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            if ga.shape != a.shape:
                ga = ga.reshape(-1, *a.shape).sum(axis=0)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
                if gb.shape != b.shape:
                    gb = gb.reshape(-1, *b.shape).sum(axis=0)
        return ga, gb

    return _node(a.data @ b.data, (a, b), bw, "matmul")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


# -- reductions and shape --------------------------------------------------
def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(np.asarray(a.data.sum(axis=axes, keepdims=keepdims)), (a,), bw, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return div(sum_(a, axis=axes, keepdims=keepdims), float(count))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeMismatch(f"reshape: {a.shape} -> {shape}") from exc
    return _node(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def slice_(a, key) -> Tensor:
    """Basic (view) indexing: ints, slices, Ellipsis, None."""
    a = as_tensor(a)
    keys = key if isinstance(key, tuple) else (key,)
    for k in keys:
        if not (k is None or k is Ellipsis or isinstance(k, (int, np.integer, slice))):
            raise ShapeMismatch("slice: only basic indexing is supported; use take()")
    out = a.data[key]

    def bw(g):
        ga = np.zeros_like(a.data)
        ga[key] += g
        return (ga,)

    return _node(np.array(out), (a,), bw, "slice")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(m != n for i, (m, n) in enumerate(zip(t.shape, ref)) if i != ax):
            raise ShapeMismatch(f"concat: {ref} vs {t.shape} on axis {axis}")
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=ax))

    return _node(np.concatenate([t.data for t in tensors], axis=ax), tensors, bw, "concat")


def take(a, indices: tuple) -> Tensor:
    """Advanced-index gather ``a[indices]`` with one integer array per axis.

    The backward rule scatter-adds, so repeated indices accumulate.
    """
    a = as_tensor(a)
    if len(indices) != a.ndim:
        raise ShapeMismatch(f"take: need {a.ndim} index arrays, got {len(indices)}")
    idx = np.broadcast_arrays(*[np.asarray(i, dtype=np.intp) for i in indices])
    flat = np.ravel_multi_index(idx, a.shape)
    out = a.data.reshape(-1)[flat]

    def bw(g):
        ga = np.bincount(flat.reshape(-1), weights=g.reshape(-1), minlength=a.size)
        return (ga.reshape(a.shape),)

    return _node(out, (a,), bw, "take")


def interp2d(image, coords, snap_tol: float = 1e-9) -> Tensor:
    """Bilinear lookup with zero padding, as one fused node.

    ``image`` is (B, C, H, W); ``coords`` is (nb, 2, N) continuous pixel
    coordinates, x (column) first, with the centre of pixel ``j`` at ``j``;
    B must equal nb or 1.  Returns (nb, C, N).  Coordinates within
    ``snap_tol`` of an integer read that pixel exactly; the derivative there
    is the one-sided difference towards the next pixel.  Differentiable in
    the image and the coordinates.
    """
    image, coords = as_tensor(image), as_tensor(coords)
    if image.ndim != 4 or coords.ndim != 3 or coords.shape[1] != 2:
        raise ShapeMismatch(f"interp2d: image {image.shape}, coords {coords.shape}")
    B, C, H, W = image.shape
    nb, _, N = coords.shape
    if B not in (1, nb):
        raise ShapeMismatch(f"interp2d: image batch {B} vs coordinate batch {nb}")

    def split(f):
        lo = np.floor(f + snap_tol)
        frac = f - lo
        frac[frac < snap_tol] = 0.0
        return lo.astype(np.intp), frac

    x0, ax = split(coords.data[:, 0, :])
    y0, ay = split(coords.data[:, 1, :])
    # Zero border: one pixel before and two after each axis, so every corner
    # lookup is in range and points entirely outside land on a zero 2x2 block.
    Hp, Wp = H + 3, W + 3
    pad = np.zeros((B, C, Hp, Wp))
    pad[:, :, 1:H + 1, 1:W + 1] = image.data
    # unsigned views fold the lower and upper bound checks into one comparison
    inside = ((x0 + 1).view(np.uintp) <= W) & ((y0 + 1).view(np.uintp) <= H)
    base = np.where(inside, (y0 + 1) * Wp + (x0 + 1), (H + 1) * Wp + (W + 1))
    offs = ((np.arange(nb) if B == nb else np.zeros(nb, dtype=np.intp))[:, None] * C
            + np.arange(C)[None, :]) * (Hp * Wp)
    gidx = offs[:, :, None] + base[:, None, :]  # (nb, C, N)
    src = pad.reshape(-1)
    v00, v10 = np.take(src, gidx), np.take(src, gidx + 1)
    v01, v11 = np.take(src, gidx + Wp), np.take(src, gidx + Wp + 1)
    bx, by = ax[:, None, :], ay[:, None, :]
    d0 = v10 - v00
    d1 = v11 - v01
    h0 = v00 + bx * d0
    h1 = v01 + bx * d1
    out = h0 + by * (h1 - h0)

    def bw(g):
        gi = None
        if image.requires_grad:
            flat = gidx.reshape(-1)
            gb = g * by
            ga = g - gb  # g * (1 - ay)
            t10, t11 = ga * bx, gb * bx
            n = pad.size
            acc = np.bincount(flat, weights=(ga - t10).reshape(-1), minlength=n)
            acc += np.bincount(flat + 1, weights=t10.reshape(-1), minlength=n)
            acc += np.bincount(flat + Wp, weights=(gb - t11).reshape(-1), minlength=n)
            acc += np.bincount(flat + Wp + 1, weights=t11.reshape(-1), minlength=n)
            gi = acc.reshape(pad.shape)[:, :, 1:H + 1, 1:W + 1]
            gi = gi.sum(axis=0, keepdims=True) if B != nb else gi
        gc = None
        if coords.requires_grad:
            gc = np.empty((nb, 2, N))
            gc[:, 0, :] = np.sum(g * (d0 + by * (d1 - d0)), axis=1)
            gc[:, 1, :] = np.sum(g * (h1 - h0), axis=1)
        return gi, gc

    return _node(out, (image, coords), bw, "interp2d")


def bernoulli_loglik(x, mu, eps: float = 1e-7) -> Tensor:
    """Row sums of x log m + (1 - x) log(1 - m) with m = clip(mu, eps, 1 - eps).

    ``x`` and ``mu`` are (B, D); returns (B,).  The gradient with respect to
    ``mu`` is zero where the clip is active.
    """
    x, mu = as_tensor(x), as_tensor(mu)
    if x.shape != mu.shape or mu.ndim != 2:
        raise ShapeMismatch(f"bernoulli_loglik: {x.shape} vs {mu.shape}")
    m = np.clip(mu.data, eps, 1.0 - eps)
    out = np.sum(x.data * np.log(m) + (1.0 - x.data) * np.log1p(-m), axis=1)

    def bw(g):
        gx = gm = None
        if x.requires_grad:
            gx = g[:, None] * (np.log(m) - np.log1p(-m))
        if mu.requires_grad:
            inside = (mu.data >= eps) & (mu.data <= 1.0 - eps)
            gm = g[:, None] * ((x.data - m) / (m * (1.0 - m)) * inside)
        return gx, gm

    return _node(out, (x, mu), bw, "bernoulli_loglik")


# -- elementwise unary -----------------------------------------------------
def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _node(out, (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)

    def bw(g):
        with np.errstate(divide="ignore"):
            return (g * 0.5 / out,)

    return _node(out, (a,), bw, "sqrt")


def sin(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),), "sin")


def cos(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),), "cos")


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _stable_sigmoid(a.data)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return _node(out, (a,), lambda g: (g * _stable_sigmoid(x),), "softplus")


def leakyrelu(a, alpha: float = DEFAULT_LEAKY_SLOPE) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    out = np.where(pos, a.data, alpha * a.data)
    return _node(out, (a,), lambda g: (np.where(pos, g, alpha * g),), "leakyrelu")


def clamp(a, lo: float, hi: float) -> Tensor:
    # Subgradient: 1 on the closed interval, 0 outside.
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _node(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clamp")


_DISPATCH = {
    "add": add, "sub": sub, "mul": mul, "div": div, "neg": neg, "matmul": matmul,
    "sum": sum_, "mean": mean, "reshape": reshape, "transpose": transpose,
    "slice": slice_, "concat": lambda *ts, **kw: concat(ts, **kw), "take": take,
    "exp": exp, "log": log, "sqrt": sqrt, "sin": sin, "cos": cos,
    "sigmoid": sigmoid, "softplus": softplus, "leakyrelu": leakyrelu, "clamp": clamp,
    "interp2d": interp2d, "bernoulli_loglik": bernoulli_loglik,
}


def apply(op_kind: str, *inputs, **attrs) -> Tensor:
    """Dispatch ``op_kind`` by name, e.g. ``apply("leakyrelu", x, alpha=0.1)``."""
    try:
        fn = _DISPATCH[op_kind]
    except KeyError:
        raise ValueError(f"unknown op_kind {op_kind!r}") from None
    return fn(*inputs, **attrs)


# -- reverse pass ----------------------------------------------------------
def _topological(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor):
    """Populate ``.grad`` on every gradient-tracking leaf reachable from ``loss``.

    The graph is kept, so calling this twice accumulates gradients into the
    leaves; call ``zero_grad`` on the leaves between steps.
    """
    if loss.size != 1:
        raise NotScalar(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def finite_diff_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|)."""
    x0 = np.array(as_tensor(x).data, dtype=DTYPE)
    leaf = Tensor(x0.copy(), requires_grad=True)
    out = f(leaf)
    if out.size != 1:
        raise NotScalar("finite_diff_check needs a scalar-valued function")
    out.backward()
    analytic = np.zeros_like(x0) if leaf.grad is None else leaf.grad.reshape(x0.shape)
    flat = x0.reshape(-1)
    numeric = np.empty(flat.size)
    for i in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += h
        xm[i] -= h
        fp = f(Tensor(xp.reshape(x0.shape))).item()
        fm = f(Tensor(xm.reshape(x0.shape))).item()
        numeric[i] = (fp - fm) / (2.0 * h)
    a = analytic.reshape(-1)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - numeric) / np.maximum(1.0, np.abs(a))))

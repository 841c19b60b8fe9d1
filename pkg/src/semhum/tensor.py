"""Reverse-mode automatic differentiation over dense float64 arrays.

A dynamic Tape records every primitive applied to tensors that require
gradients, together with a closure mapping the output adjoint to input
adjoints.  backward() replays the tape once in reverse recording order,
so gradient computation is deterministic: identical inputs give
bit-identical grads.  Gradients accumulate additively; callers zero them
between optimization steps.  Tapes are rebuilt per step.
"""
from __future__ import annotations

import numpy as np

from . import backend


class Tape:
    """Ordered record of primitive applications for one forward pass."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _tape_stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tape_stack.pop()
        return False


_tape_stack: list[Tape] = []


def active_tape():
    return _tape_stack[-1] if _tape_stack else None


class Tensor:
    """Dense float64 array with optional gradient tracking.

    Tensors are immutable after creation as far as the tape is concerned;
    inference-only code may share them freely across threads.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # arithmetic sugar
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

    def __getitem__(self, idx):
        return slice_(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose2d(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out: Tensor, inputs, backward_fn) -> Tensor:
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append((out, inputs, backward_fn))
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(kind: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ValueError(
            f"{kind}: incompatible shapes {a.data.shape} and {b.data.shape}"
        ) from None


# ---------------------------------------------------------------------------
# primitives


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    out = Tensor(a.data + b.data)

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _record(out, (a, b), bwd)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    out = Tensor(a.data - b.data)

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _record(out, (a, b), bwd)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    out = Tensor(a.data * b.data)

    def bwd(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _record(out, (a, b), bwd)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    out = Tensor(a.data / b.data)

    def bwd(g):
        return (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        )

    return _record(out, (a, b), bwd)


def neg(a):
    a = as_tensor(a)
    out = Tensor(-a.data)

    def bwd(g):
        return (-g,)

    return _record(out, (a,), bwd)


_DET_GEMM_DEPTH = 0


class deterministic_rows:
    """Context: route matmul forwards through the row-deterministic gemm
    kernel so results cannot depend on how rows are batched.  Used by
    inference rendering, where chunked and unchunked output must be
    bit-identical; training keeps the (faster) BLAS path."""

    def __enter__(self):
        global _DET_GEMM_DEPTH
        _DET_GEMM_DEPTH += 1
        return self

    def __exit__(self, exc_type, exc, tb):
        global _DET_GEMM_DEPTH
        _DET_GEMM_DEPTH -= 1
        return False


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ValueError(
            f"matmul: incompatible shapes {a.data.shape} and {b.data.shape}"
        )
    if _DET_GEMM_DEPTH:
        out = Tensor(backend.kernels().gemm_rows(a.data, b.data))
    else:
        out = Tensor(a.data @ b.data)

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return _record(out, (a, b), bwd)


def bmm(a, b):
    """Batched matmul over the last two axes (leading axes broadcast)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(
            f"bmm: incompatible shapes {a.data.shape} and {b.data.shape}"
        )
    out = Tensor(np.matmul(a.data, b.data))

    def bwd(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.data.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.data.shape)
        return ga, gb

    return _record(out, (a, b), bwd)


def mT(a):
    """Transpose of the last two axes."""
    a = as_tensor(a)
    if a.data.ndim < 2:
        raise ValueError(f"mT: expected ndim >= 2, got shape {a.data.shape}")
    out = Tensor(np.swapaxes(a.data, -1, -2))

    def bwd(g):
        return (np.swapaxes(g, -1, -2),)

    return _record(out, (a,), bwd)


def relu(a):
    a = as_tensor(a)
    out = Tensor(np.maximum(a.data, 0.0))
    mask = a.data > 0.0

    def bwd(g):
        return (g * mask,)

    return _record(out, (a,), bwd)


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    a = as_tensor(a)
    s = _stable_sigmoid(a.data)
    out = Tensor(s)

    def bwd(g):
        return (g * s * (1.0 - s),)

    return _record(out, (a,), bwd)


def exp(a):
    a = as_tensor(a)
    e = np.exp(a.data)
    out = Tensor(e)

    def bwd(g):
        return (g * e,)

    return _record(out, (a,), bwd)


def log(a):
    a = as_tensor(a)
    out = Tensor(np.log(a.data))

    def bwd(g):
        return (g / a.data,)

    return _record(out, (a,), bwd)


def sin(a):
    a = as_tensor(a)
    out = Tensor(np.sin(a.data))

    def bwd(g):
        return (g * np.cos(a.data),)

    return _record(out, (a,), bwd)


def cos(a):
    a = as_tensor(a)
    out = Tensor(np.cos(a.data))

    def bwd(g):
        return (-g * np.sin(a.data),)

    return _record(out, (a,), bwd)


def sqrt(a):
    a = as_tensor(a)
    r = np.sqrt(a.data)
    out = Tensor(r)

    def bwd(g):
        return (g / (2.0 * r),)

    return _record(out, (a,), bwd)


def softplus(a):
    """log(1 + e^x), computed overflow-free."""
    a = as_tensor(a)
    out = Tensor(np.logaddexp(0.0, a.data))

    def bwd(g):
        return (g * _stable_sigmoid(a.data),)

    return _record(out, (a,), bwd)


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))
    shape = a.data.shape

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, shape),)
        if not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            axes = tuple(ax % len(shape) for ax in axes)
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return _record(out, (a,), bwd)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for ax in axes:
            n *= a.data.shape[ax]
    # divide (not multiply by reciprocal): one rounding, keeps fixpoints exact
    return div(tsum(a, axis=axis, keepdims=keepdims), float(n))


def softmax(a, axis=-1):
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(s)

    def bwd(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _record(out, (a,), bwd)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    except ValueError:
        shapes = [t.data.shape for t in tensors]
        raise ValueError(f"concat: incompatible shapes {shapes}") from None
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(out, tuple(tensors), bwd)


def _has_advanced_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (np.ndarray, list)) for i in items)


def slice_(a, idx):
    a = as_tensor(a)
    out = Tensor(a.data[idx])
    shape = a.data.shape
    advanced = _has_advanced_index(idx)

    def bwd(g):
        ga = np.zeros(shape, dtype=np.float64)
        if advanced:
            np.add.at(ga, idx, g)  # duplicate indices accumulate
        else:
            ga[idx] += g
        return (ga,)

    return _record(out, (a,), bwd)


def reshape(a, shape):
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape))
    orig = a.data.shape

    def bwd(g):
        return (g.reshape(orig),)

    return _record(out, (a,), bwd)


def transpose2d(a):
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ValueError(f"transpose: expected 2-d tensor, got shape {a.data.shape}")
    out = Tensor(a.data.T)

    def bwd(g):
        return (g.T,)

    return _record(out, (a,), bwd)


def broadcast_to(a, shape):
    a = as_tensor(a)
    try:
        out = Tensor(np.broadcast_to(a.data, shape).copy())
    except ValueError:
        raise ValueError(
            f"broadcast: cannot broadcast {a.data.shape} to {tuple(shape)}"
        ) from None
    orig = a.data.shape

    def bwd(g):
        return (_unbroadcast(g, orig),)

    return _record(out, (a,), bwd)


def clamp(a, lo=None, hi=None):
    """Clip values; gradient is zero where the clip is active."""
    a = as_tensor(a)
    out = Tensor(np.clip(a.data, lo, hi))
    mask = np.ones(a.data.shape, dtype=bool)
    if lo is not None:
        mask &= a.data >= lo
    if hi is not None:
        mask &= a.data <= hi

    def bwd(g):
        return (g * mask,)

    return _record(out, (a,), bwd)


def exclusive_cumprod(a, axis=-1):
    """out_i = prod_{j<i} x_j along axis (out_0 = 1).

    The backward pass uses the reverse recurrence
    r_j = g_{j+1} + x_{j+1} r_{j+1}, dx_j = y_j r_j, which stays valid
    when entries are exactly zero (fully opaque render samples).
    """
    a = as_tensor(a)
    x = a.data
    ax = axis % x.ndim
    cp = np.cumprod(x, axis=ax)
    ones_shape = list(x.shape)
    ones_shape[ax] = 1
    lead = np.ones(ones_shape, dtype=np.float64)
    body = np.take(cp, np.arange(x.shape[ax] - 1), axis=ax)
    y = np.concatenate([lead, body], axis=ax)
    out = Tensor(y)

    def bwd(g):
        xm = np.moveaxis(x, ax, -1)
        gm = np.moveaxis(g, ax, -1)
        ym = np.moveaxis(y, ax, -1)
        d = xm.shape[-1]
        r = np.zeros_like(xm)
        acc = np.zeros(xm.shape[:-1], dtype=np.float64)
        for j in range(d - 2, -1, -1):
            acc = gm[..., j + 1] + xm[..., j + 1] * acc
            r[..., j] = acc
        return (np.moveaxis(ym * r, -1, ax),)

    return _record(out, (a,), bwd)


def trilinear(vol, pts, origin, step):
    """Differentiable trilinear sampling of a (C,nx,ny,nz) grid at (M,3) points.

    Out-of-lattice points produce zero rows (and zero gradients).  Gradients
    flow both into the grid values (scatter-add) and into the points.
    """
    vol, pts = as_tensor(vol), as_tensor(pts)
    origin = np.asarray(origin, dtype=np.float64)
    step = np.asarray(step, dtype=np.float64)
    kern = backend.kernels()
    outv, i0, frac, inside = kern.trilinear_forward(vol.data, pts.data, origin, step)
    out = Tensor(outv)
    shape = vol.data.shape

    def bwd(g):
        g = np.ascontiguousarray(g)
        gvol = (
            kern.trilinear_backward_vol(g, i0, frac, inside, shape)
            if vol.requires_grad
            else None
        )
        gpts = (
            kern.trilinear_backward_pts(g, vol.data, i0, frac, inside, 1.0 / step)
            if pts.requires_grad
            else None
        )
        return gvol, gpts

    return _record(out, (vol, pts), bwd)


def cross_entropy_logits(logits, labels, valid=None):
    """Per-row -log softmax(logits)[label]; rows with valid=False give 0.

    labels is an int array, valid an optional bool array.  Returns a
    vector tensor; callers reduce it themselves.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n, l = logits.data.shape
    if labels.shape != (n,):
        raise ValueError(f"cross_entropy: labels shape {labels.shape} != ({n},)")
    if np.any((labels < 0) | (labels >= l)):
        bad = int(labels[(labels < 0) | (labels >= l)][0])
        raise ValueError(f"cross_entropy: label {bad} out of range [0, {l})")
    if valid is None:
        valid = np.ones(n, dtype=bool)
    else:
        valid = np.asarray(valid, dtype=bool)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    se = e.sum(axis=1, keepdims=True)
    p = e / se
    lse = np.log(se[:, 0]) + logits.data.max(axis=1)
    ce = (lse - logits.data[np.arange(n), labels]) * valid
    out = Tensor(ce)

    def bwd(g):
        gl = p * (g * valid)[:, None]
        gl[np.arange(n), labels] -= g * valid
        return (gl,)

    return _record(out, (logits,), bwd)


# ---------------------------------------------------------------------------
# dispatch + backward


_PRIMITIVES = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "matmul": matmul,
    "relu": relu,
    "sigmoid": sigmoid,
    "exp": exp,
    "log": log,
    "sin": sin,
    "cos": cos,
    "sqrt": sqrt,
    "softplus": softplus,
    "sum": tsum,
    "broadcast": broadcast_to,
    "softmax": softmax,
    "concat": concat,
    "slice": slice_,
    "reshape": reshape,
    "clamp": clamp,
    "bmm": bmm,
}


def forward_primitive(kind: str, *inputs, **attrs):
    """Apply a primitive by name; unknown kinds and bad shapes are rejected."""
    fn = _PRIMITIVES.get(kind)
    if fn is None:
        raise ValueError(f"unknown primitive {kind!r}")
    if kind == "concat":
        return fn(list(inputs), **attrs)
    return fn(*inputs, **attrs)


def backward(root: Tensor, tape: Tape | None = None) -> None:
    """Populate .grad for every requires_grad tensor reachable from root.

    root must be a scalar (size-1) tensor.  Adjoints accumulate into any
    existing .grad, so repeated backward calls add up.
    """
    if root.data.size != 1:
        raise ValueError(f"backward: root must be scalar, got shape {root.data.shape}")
    tape = tape if tape is not None else active_tape()
    if tape is None or not tape.nodes:
        raise ValueError("backward: no tape in scope (or tape is empty)")

    adjoint: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    touched: dict[int, Tensor] = {id(root): root}

    for out, inputs, fn in reversed(tape.nodes):
        g = adjoint.get(id(out))
        if g is None:
            continue
        grads = fn(g)
        for t, gi in zip(inputs, grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in adjoint:
                adjoint[key] = adjoint[key] + gi
            else:
                adjoint[key] = gi
                touched[key] = t

    for key, t in touched.items():
        if not t.requires_grad:
            continue
        g = adjoint[key]
        # adjoint arrays are freshly built per backward call (accumulation
        # always allocates), so handing them out without copying is safe
        t.grad = g if t.grad is None else t.grad + g

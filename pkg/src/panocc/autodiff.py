"""Reverse-mode automatic differentiation on numpy arrays.

A ``Tape`` records operations in execution order; ``backward`` replays them
in reverse, accumulating vector-Jacobian products.  The op set is exactly
what the occupancy model needs: elementwise arithmetic, reductions, matmul,
3D convolution, gather/scatter, softmax, elu, and shape surgery.

Every public op is a module-level function that dispatches on input type:
``Variable`` inputs are recorded on the tape, plain ``np.ndarray`` inputs
fall through to numpy.  Model code written against these functions runs
unchanged in training (tracked) and evaluation (untracked) mode.
"""

from __future__ import annotations

import builtins
from typing import Callable, Sequence

import numpy as np


class AutodiffError(RuntimeError):
    pass


class Tape:
    """Operation record.  Node order equals recording order, which is a
    valid topological order because values are created before use."""

    def __init__(self):
        self._nodes: list[tuple[Variable, tuple[Variable, ...], Callable]] = []

    def __len__(self):
        return len(self._nodes)

    def leaf(self, value, requires_grad: bool = False) -> "Variable":
        arr = np.asarray(value)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        return Variable(arr, self, requires_grad=requires_grad)

    def record(self, value: np.ndarray, parents: Sequence["Variable"],
               backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> "Variable":
        """Register an op.  ``backward(grad_out)`` must return one gradient
        (or None) per parent, in order."""
        parents = tuple(parents)
        out = Variable(value, self, requires_grad=any(p.requires_grad for p in parents))
        if out.requires_grad:
            self._nodes.append((out, parents, backward))
        return out


class Variable:
    """A tensor tracked on a tape.  ``value`` is the forward result; ``grad``
    is populated by ``backward`` and has the same shape."""

    __slots__ = ("value", "tape", "requires_grad", "grad")

    # keep numpy from intercepting ndarray <op> Variable
    __array_ufunc__ = None

    def __init__(self, value: np.ndarray, tape: Tape, requires_grad: bool = False):
        self.value = np.asarray(value)
        self.tape = tape
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        return f"Variable(shape={self.value.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, key):
        return getitem(self, key)


def is_variable(x) -> bool:
    return isinstance(x, Variable)


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Variable) else np.asarray(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (the adjoint of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _binary(a, b, fwd, bwd_a, bwd_b):
    av, bv = value_of(a), value_of(b)
    out = fwd(av, bv)
    if not (isinstance(a, Variable) or isinstance(b, Variable)):
        return out
    tape = a.tape if isinstance(a, Variable) else b.tape
    parents, slots = [], []
    if isinstance(a, Variable):
        parents.append(a)
        slots.append("a")
    if isinstance(b, Variable):
        parents.append(b)
        slots.append("b")

    def backward(g):
        grads = []
        for slot in slots:
            if slot == "a":
                grads.append(_unbroadcast(bwd_a(g, av, bv, out), np.shape(av)))
            else:
                grads.append(_unbroadcast(bwd_b(g, av, bv, out), np.shape(bv)))
        return grads

    return tape.record(out, parents, backward)


def _unary(a, fwd, bwd):
    av = value_of(a)
    out = fwd(av)
    if not isinstance(a, Variable):
        return out
    return a.tape.record(out, (a,), lambda g: (bwd(g, av, out),))


# ---------------------------------------------------------------------------
# elementwise


def add(a, b):
    return _binary(a, b, lambda x, y: x + y,
                   lambda g, x, y, o: g, lambda g, x, y, o: g)


def sub(a, b):
    return _binary(a, b, lambda x, y: x - y,
                   lambda g, x, y, o: g, lambda g, x, y, o: -g)


def mul(a, b):
    return _binary(a, b, lambda x, y: x * y,
                   lambda g, x, y, o: g * y, lambda g, x, y, o: g * x)


def div(a, b):
    return _binary(a, b, lambda x, y: x / y,
                   lambda g, x, y, o: g / y, lambda g, x, y, o: -g * x / (y * y))


def power(a, p: float):
    return _unary(a, lambda x: x ** p, lambda g, x, o: g * p * x ** (p - 1))


def exp(a):
    return _unary(a, np.exp, lambda g, x, o: g * o)


def log(a):
    return _unary(a, np.log, lambda g, x, o: g / x)


def sqrt(a):
    return _unary(a, np.sqrt, lambda g, x, o: g * 0.5 / o)


def tanh(a):
    return _unary(a, np.tanh, lambda g, x, o: g * (1.0 - o * o))


def _sigmoid(x):
    out = np.empty_like(x, dtype=x.dtype)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    return _unary(a, _sigmoid, lambda g, x, o: g * o * (1.0 - o))


def elu(a):
    def fwd(x):
        return np.where(x > 0, x, np.expm1(x))

    def bwd(g, x, o):
        return g * np.where(x > 0, 1.0, np.exp(x))

    return _unary(a, fwd, bwd)


# ---------------------------------------------------------------------------
# reductions and linear algebra


def sum(a, axis=None, keepdims: bool = False):  # noqa: A001 - numpy-style name
    def bwd(g, x, o):
        if axis is None:
            return np.broadcast_to(g, x.shape).astype(x.dtype, copy=True)
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, x.shape).astype(x.dtype, copy=True)

    return _unary(a, lambda x: np.sum(x, axis=axis, keepdims=keepdims), bwd)


def mean(a, axis=None, keepdims: bool = False):
    av = value_of(a)
    if axis is None:
        n = av.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = 1
        for ax in axes:
            n *= av.shape[ax]
    return div(sum(a, axis=axis, keepdims=keepdims), float(n))


def matmul(a, b):
    def bwd_a(g, x, y, o):
        return g @ np.swapaxes(y, -1, -2) if np.ndim(y) > 1 else np.outer(g, y)

    def bwd_b(g, x, y, o):
        return np.swapaxes(x, -1, -2) @ g if np.ndim(x) > 1 else np.outer(x, g)

    return _binary(a, b, lambda x, y: x @ y, bwd_a, bwd_b)


# ---------------------------------------------------------------------------
# shape surgery


def reshape(a, shape):
    return _unary(a, lambda x: x.reshape(shape), lambda g, x, o: g.reshape(x.shape))


def moveaxis(a, src, dst):
    return _unary(a, lambda x: np.moveaxis(x, src, dst),
                  lambda g, x, o: np.moveaxis(g, dst, src))


def getitem(a, key):
    def bwd(g, x, o):
        out = np.zeros_like(x)
        np.add.at(out, key, g)
        return out

    return _unary(a, lambda x: x[key], bwd)


def take(a, indices, axis: int):
    """Gather along one axis.  Adjoint is scatter-add, correct under
    repeated indices."""
    indices = np.asarray(indices)

    def bwd(g, x, o):
        out = np.zeros_like(x)
        sl = [slice(None)] * x.ndim
        sl[axis] = indices
        np.add.at(out, tuple(sl), g)
        return out

    return _unary(a, lambda x: np.take(x, indices, axis=axis), bwd)


def concatenate(parts, axis: int = 0):
    if not any(isinstance(p, Variable) for p in parts):
        return np.concatenate(parts, axis=axis)
    tape = next(p.tape for p in parts if isinstance(p, Variable))
    vals = [value_of(p) for p in parts]
    out = np.concatenate(vals, axis=axis)
    var_parts = [(i, p) for i, p in enumerate(parts) if isinstance(p, Variable)]
    splits = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def backward(g):
        pieces = np.split(g, splits, axis=axis)
        return [pieces[i] for i, _ in var_parts]

    return tape.record(out, [p for _, p in var_parts], backward)


def pad(a, pad_width):
    """Zero padding; adjoint is the interior slice."""
    pad_width = tuple(tuple(p) for p in pad_width)

    def bwd(g, x, o):
        sl = tuple(slice(lo, g.shape[i] - hi) for i, (lo, hi) in enumerate(pad_width))
        return g[sl]

    return _unary(a, lambda x: np.pad(x, pad_width), bwd)


def softmax(a, axis: int = -1):
    """Shift-stabilized softmax.  The shift is a constant, which leaves the
    gradient exact because softmax is shift invariant."""
    shift = np.max(value_of(a), axis=axis, keepdims=True)
    e = exp(sub(a, shift))
    return div(e, sum(e, axis=axis, keepdims=True))


# ---------------------------------------------------------------------------
# 3D convolution


def _conv3d_fwd(x, w, b, stride, dilation, padding):
    B, Cin, X, Y, Z = x.shape
    Cout, Cin2, kx, ky, kz = w.shape
    if Cin != Cin2:
        raise AutodiffError(f"conv3d channel mismatch: {Cin} vs {Cin2}")
    sx, sy, sz = stride
    dx, dy, dz = dilation
    px, py, pz = padding
    xp = np.pad(x, ((0, 0), (0, 0), (px, px), (py, py), (pz, pz))) if any(padding) else x
    Xo = (xp.shape[2] - dx * (kx - 1) - 1) // sx + 1
    Yo = (xp.shape[3] - dy * (ky - 1) - 1) // sy + 1
    Zo = (xp.shape[4] - dz * (kz - 1) - 1) // sz + 1
    out = np.zeros((B, Cout, Xo, Yo, Zo), dtype=x.dtype)
    for a in range(kx):
        for c in range(ky):
            for e in range(kz):
                sl = xp[:, :,
                        a * dx: a * dx + sx * Xo: sx,
                        c * dy: c * dy + sy * Yo: sy,
                        e * dz: e * dz + sz * Zo: sz]
                out += np.einsum("oi,bixyz->boxyz", w[:, :, a, c, e], sl, optimize=True)
    if b is not None:
        out += b.reshape(1, -1, 1, 1, 1)
    return out, xp


def conv3d(x, w, b=None, stride=1, dilation=1, padding=0):
    """3D convolution (cross-correlation), NCXYZ layout, zero padding.

    ``stride``, ``dilation`` and ``padding`` may be ints or 3-tuples.
    """
    stride = (stride,) * 3 if isinstance(stride, int) else tuple(stride)
    dilation = (dilation,) * 3 if isinstance(dilation, int) else tuple(dilation)
    padding = (padding,) * 3 if isinstance(padding, int) else tuple(padding)
    xv, wv = value_of(x), value_of(w)
    bv = value_of(b) if b is not None else None
    out, xp = _conv3d_fwd(xv, wv, bv, stride, dilation, padding)
    tracked = [p for p in (x, w, b) if isinstance(p, Variable)]
    if not tracked:
        return out

    Cout, Cin, kx, ky, kz = wv.shape
    sx, sy, sz = stride
    dx, dy, dz = dilation
    px, py, pz = padding
    _, _, Xo, Yo, Zo = out.shape

    def backward(g):
        need_x = isinstance(x, Variable)
        need_w = isinstance(w, Variable)
        gxp = np.zeros_like(xp) if need_x else None
        gw = np.zeros_like(wv) if need_w else None
        for a in range(kx):
            for c in range(ky):
                for e in range(kz):
                    sl = (slice(None), slice(None),
                          slice(a * dx, a * dx + sx * Xo, sx),
                          slice(c * dy, c * dy + sy * Yo, sy),
                          slice(e * dz, e * dz + sz * Zo, sz))
                    if need_x:
                        gxp[sl] += np.einsum("oi,boxyz->bixyz", wv[:, :, a, c, e], g, optimize=True)
                    if need_w:
                        gw[:, :, a, c, e] = np.einsum("boxyz,bixyz->oi", g, xp[sl], optimize=True)
        grads = []
        for p in (x, w, b):
            if not isinstance(p, Variable):
                continue
            if p is x:
                gx = gxp
                if any(padding):
                    gx = gxp[:, :, px: gxp.shape[2] - px or None,
                             py: gxp.shape[3] - py or None,
                             pz: gxp.shape[4] - pz or None]
                grads.append(gx)
            elif p is w:
                grads.append(gw)
            else:
                grads.append(g.sum(axis=(0, 2, 3, 4)))
        return grads

    return tracked[0].tape.record(out, tracked, backward)


# ---------------------------------------------------------------------------
# backward pass and verification


def backward(tape: Tape, loss: Variable) -> None:
    """Accumulate gradients of `loss` into every tracked Variable's
    ``grad``.  Untracked constants stay gradient-free."""
    if not isinstance(loss, Variable):
        raise AutodiffError("loss must be a Variable")
    if loss.value.size != 1:
        raise AutodiffError(f"loss must be scalar, got shape {loss.value.shape}")
    if loss.tape is not tape:
        raise AutodiffError("loss was not recorded on this tape (detached graph)")
    for out, parents, _ in tape._nodes:
        out.grad = None
        for p in parents:
            p.grad = None
    loss.grad = np.ones_like(loss.value)
    for out, parents, bfn in reversed(tape._nodes):
        if out.grad is None:
            continue
        grads = bfn(out.grad)
        for p, g in zip(parents, grads):
            if g is None or not p.requires_grad:
                continue
            if p.grad is None:
                p.grad = np.zeros_like(p.value)
            p.grad = p.grad + g


def grad_check(fn: Callable[..., Variable], inputs: Sequence[np.ndarray],
               epsilon: float = 1e-5, sample: int | None = None,
               seed: int = 0) -> float:
    """Compare tape gradients against central finite differences.

    ``fn`` receives one Variable per input (fresh tape each call) and must
    return a scalar Variable.  When ``sample`` is given, only that many
    elements per input are probed (deterministic choice), which keeps large
    models checkable.  Returns the worst relative error, with the scale
    floored at 1 so tiny gradients are compared absolutely.
    """
    inputs = [np.asarray(x, dtype=np.float64) for x in inputs]

    def run(args):
        tape = Tape()
        vars_ = [tape.leaf(a, requires_grad=True) for a in args]
        out = fn(*vars_)
        backward(tape, out)
        return float(out.value), [v.grad if v.grad is not None else np.zeros_like(v.value)
                                  for v in vars_]

    _, analytic = run(inputs)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i, x in enumerate(inputs):
        flat_idx = np.arange(x.size)
        if sample is not None and x.size > sample:
            flat_idx = rng.choice(x.size, size=sample, replace=False)
        for j in flat_idx:
            shift = np.zeros_like(x)
            shift.flat[j] = epsilon
            fp, _ = run([x + shift if k == i else y for k, y in enumerate(inputs)])
            fm, _ = run([x - shift if k == i else y for k, y in enumerate(inputs)])
            numeric = (fp - fm) / (2 * epsilon)
            a = float(analytic[i].flat[j])
            err = abs(a - numeric) / builtins.max(1.0, abs(a), abs(numeric))
            worst = builtins.max(worst, err)
    return worst

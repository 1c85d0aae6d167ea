"""Minimal reverse-mode differentiation over a fixed set of array primitives.

Every primitive computes its forward value eagerly with numpy.  When a
:class:`Tape` is active the primitive also appends a node holding the
vector-Jacobian product needed by :meth:`Tape.backward`.  Outside a tape the
same functions act as plain numpy code, which is how inference runs.

Supported primitives: elementwise add/sub/mul/div/neg, matmul, einsum,
sum/sorted_sum/mean reductions, exp/log/tanh/sigmoid/relu, softmax/log_softmax,
layer_norm, reshape/transpose/concat/take, and two fused losses
(softmax cross-entropy and clamped binary cross-entropy).
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping

import numpy as np

from ..errors import ContractViolation, NumericFault

__all__ = [
    "Var", "Tape", "param", "const",
    "add", "sub", "mul", "div", "neg", "matmul", "einsum",
    "sum", "sorted_sum", "mean", "exp", "log", "tanh", "sigmoid", "relu",
    "softmax", "log_softmax", "layer_norm",
    "reshape", "transpose", "concat", "take",
    "softmax_cross_entropy", "binary_cross_entropy",
    "grad_eval", "finite_diff_check",
]

_TAPES: list["Tape"] = []


class Var:
    """A value plus a gradient slot of the same shape."""

    __slots__ = ("value", "grad", "requires_grad", "name")
    __array_ufunc__ = None  # make numpy defer to the reflected operators below

    def __init__(self, value, requires_grad=False, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.value) if requires_grad else None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.value)

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Var{tag}(shape={self.value.shape})"

    # Thin sugar over the primitives below.
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


def param(value, name=None) -> Var:
    return Var(np.array(value, dtype=np.float64), requires_grad=True, name=name)


def const(value) -> Var:
    return value if isinstance(value, Var) else Var(value)


class Tape:
    """Records primitive applications in execution order.

    Use as a context manager; nested tapes are allowed and each records
    only what runs while it is innermost.
    """

    def __init__(self):
        self.nodes: list[tuple[Var, tuple[Var, ...], Callable, str]] = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.pop()
        return False

    def record(self, out, inputs, vjp, op):
        self.nodes.append((out, inputs, vjp, op))

    def backward(self, loss: Var):
        if loss.value.size != 1:
            raise ContractViolation(f"backward needs a scalar loss, got shape {loss.value.shape}")
        adj = {id(loss): np.ones_like(loss.value)}
        for out, inputs, vjp, op in reversed(self.nodes):
            g = adj.pop(id(out), None)
            if g is None:
                continue
            grads = vjp(g)
            for inp, gi in zip(inputs, grads):
                if gi is None or not _tracked(inp):
                    continue
                if inp.requires_grad:
                    inp.grad = inp.grad + gi
                else:
                    key = id(inp)
                    adj[key] = adj[key] + gi if key in adj else gi


def _tracked(v: Var) -> bool:
    return v.requires_grad or getattr(v, "_on_tape", False)


class _Node(Var):
    """Intermediate result created while a tape is recording."""

    __slots__ = ("_on_tape",)


def _emit(value, inputs, vjp, op) -> Var:
    if not np.all(np.isfinite(value)):
        raise NumericFault(f"non-finite value produced by '{op}'")
    if _TAPES and any(_tracked(x) for x in inputs):
        out = _Node(value)
        out._on_tape = True
        _TAPES[-1].record(out, inputs, vjp, op)
        return out
    return Var(value)


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = const(a), const(b)
    return _emit(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b):
    a, b = const(a), const(b)
    return _emit(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b):
    a, b = const(a), const(b)
    av, bv = a.value, b.value
    return _emit(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)), "mul")


def div(a, b):
    a, b = const(a), const(b)
    av, bv = a.value, b.value
    return _emit(av / bv, (a, b),
                 lambda g: (_unbroadcast(g / bv, a.shape),
                            _unbroadcast(-g * av / (bv * bv), b.shape)), "div")


def neg(a):
    a = const(a)
    return _emit(-a.value, (a,), lambda g: (-g,), "neg")


def exp(a):
    a = const(a)
    out = np.exp(a.value)
    return _emit(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    a = const(a)
    av = a.value
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.log(av)
    return _emit(out, (a,), lambda g: (g / av,), "log")


def tanh(a):
    a = const(a)
    out = np.tanh(a.value)
    return _emit(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a):
    a = const(a)
    out = _sigmoid(a.value)
    return _emit(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def _sigmoid(x):
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def relu(a):
    a = const(a)
    mask = a.value > 0
    return _emit(a.value * mask, (a,), lambda g: (g * mask,), "relu")


# ------------------------------------------------------------- contractions

def matmul(a, b):
    """Batched matrix product; both operands must be at least 2-D."""
    a, b = const(a), const(b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2:
        raise ContractViolation("matmul operands must be at least 2-D")

    def vjp(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return _emit(av @ bv, (a, b), vjp, "matmul")


def einsum(spec: str, *operands):
    """Explicit-output einsum (``'ij,jk->ik'``) with no repeated subscripts per operand."""
    ops = tuple(const(x) for x in operands)
    lhs, out_sub = spec.replace(" ", "").split("->")
    in_subs = lhs.split(",")
    if len(in_subs) != len(ops):
        raise ContractViolation(f"einsum spec {spec!r} expects {len(in_subs)} operands")
    for s in in_subs:
        if len(set(s)) != len(s):
            raise ContractViolation("einsum: repeated subscripts within an operand unsupported")
    vals = [x.value for x in ops]
    out = np.einsum(spec, *vals, optimize=len(ops) > 2)

    def vjp(g):
        grads = []
        for k, sub_k in enumerate(in_subs):
            others = [s for i, s in enumerate(in_subs) if i != k]
            other_vals = [v for i, v in enumerate(vals) if i != k]
            present = set(out_sub).union(*others) if others else set(out_sub)
            missing = [c for c in sub_k if c not in present]
            if missing:
                # index summed only within this operand: gradient is broadcast along it
                reduced = "".join(c for c in sub_k if c in present)
                gk = np.einsum(",".join([out_sub] + others) + "->" + reduced, g, *other_vals)
                shape = [vals[k].shape[i] if c in present else 1 for i, c in enumerate(sub_k)]
                gk = np.broadcast_to(gk.reshape(shape), vals[k].shape).copy()
            else:
                gk = np.einsum(",".join([out_sub] + others) + "->" + sub_k, g, *other_vals,
                               optimize=len(others) > 1)
            grads.append(gk)
        return tuple(grads)

    return _emit(out, ops, vjp, "einsum")


# ----------------------------------------------------------------- reductions

def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    a = const(a)
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit(np.sum(a.value, axis=axis, keepdims=keepdims), (a,), vjp, "sum")


def sorted_sum(a, axis, keepdims=False):
    """Sum along ``axis`` after sorting it, so the result ignores element order.

    Plain floating-point sums depend on summation order; sorting first makes
    a permutation of the summed axis give bitwise-identical output.
    """
    a = const(a)
    shape = a.shape

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    out = np.sort(a.value, axis=axis).sum(axis=axis, keepdims=keepdims)
    return _emit(out, (a,), vjp, "sorted_sum")


def mean(a, axis=None, keepdims=False):
    a = const(a)
    n = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def softmax(a, axis=-1):
    a = const(a)
    z = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _emit(out, (a,), vjp, "softmax")


def log_softmax(a, axis=-1):
    a = const(a)
    z = a.value - a.value.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def vjp(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return _emit(out, (a,), vjp, "log_softmax")


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize over the last axis, then scale by ``gain`` and shift by ``bias``."""
    x, gain, bias = const(x), const(gain), const(bias)
    xv = x.value
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gv = gain.value
    d = xv.shape[-1]

    def vjp(g):
        gx_hat = g * gv
        gx = inv / d * (d * gx_hat - gx_hat.sum(-1, keepdims=True)
                        - xhat * (gx_hat * xhat).sum(-1, keepdims=True))
        return gx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape)

    return _emit(xhat * gv + bias.value, (x, gain, bias), vjp, "layer_norm")


# --------------------------------------------------------------------- shape

def reshape(a, shape):
    a = const(a)
    old = a.shape
    return _emit(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes):
    a = const(a)
    inv = np.argsort(axes)
    return _emit(np.transpose(a.value, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def concat(parts: Iterable, axis=-1):
    parts = tuple(const(p) for p in parts)
    sizes = [p.shape[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _emit(np.concatenate([p.value for p in parts], axis=axis), parts, vjp, "concat")


def take(a, index, axis=0):
    """Gather slices along ``axis``; repeated indices accumulate gradient."""
    a = const(a)
    index = np.asarray(index, dtype=np.intp)
    shape = a.shape

    def vjp(g):
        ga = np.zeros(shape)
        moved = np.moveaxis(ga, axis, 0)
        np.add.at(moved, index, np.moveaxis(g, axis, 0))
        return (ga,)

    return _emit(np.take(a.value, index, axis=axis), (a,), vjp, "take")


# -------------------------------------------------------------------- losses

def softmax_cross_entropy(logits, target, mask=None):
    """Mean over masked positions of -log softmax(logits)[target] (last axis = classes)."""
    logits = const(logits)
    lv = logits.value
    target = np.asarray(target, dtype=np.intp)
    if target.shape != lv.shape[:-1]:
        raise ContractViolation(f"target shape {target.shape} vs logits {lv.shape}")
    w = np.ones(target.shape) if mask is None else np.asarray(mask, dtype=np.float64)
    count = w.sum()
    if count <= 0:
        raise ContractViolation("cross-entropy over an empty selection")
    z = lv - lv.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    safe_t = np.where(w > 0, target, 0)
    picked = np.take_along_axis(logp, safe_t[..., None], axis=-1)[..., 0]
    loss = -(picked * w).sum() / count

    def vjp(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, safe_t[..., None], 1.0, axis=-1)
        return (g * (p - onehot) * (w / count)[..., None],)

    return _emit(np.array(loss), (logits,), vjp, "softmax_cross_entropy")


def binary_cross_entropy(prob, target, clamp=1e-7):
    """Mean Bernoulli negative log-likelihood with probabilities clipped to [clamp, 1-clamp]."""
    prob = const(prob)
    y = np.asarray(target, dtype=np.float64)
    pv = prob.value
    pc = np.clip(pv, clamp, 1.0 - clamp)
    inside = (pv >= clamp) & (pv <= 1.0 - clamp)
    n = pv.size
    loss = -(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc)).sum() / n

    def vjp(g):
        return (g * inside * (-(y / pc) + (1.0 - y) / (1.0 - pc)) / n,)

    return _emit(np.array(loss), (prob,), vjp, "binary_cross_entropy")


# ----------------------------------------------------------------- drivers

def grad_eval(fn: Callable[[Mapping[str, Var]], Var], params: Mapping[str, np.ndarray | Var]):
    """Evaluate scalar ``fn(params)`` and its gradient for every parameter.

    Returns ``(value, {name: gradient})``.  Parameters given as arrays are
    wrapped in fresh leaves so the caller's objects are left untouched.
    """
    leaves = {k: param(v.value if isinstance(v, Var) else v, name=k) for k, v in params.items()}
    with Tape() as tape:
        out = fn(leaves)
        out = const(out)
        if out.value.size != 1:
            raise ContractViolation(f"loss must be scalar, got shape {out.value.shape}")
        tape.backward(out)
    return float(out.value.reshape(())), {k: v.grad for k, v in leaves.items()}


def finite_diff_check(fn, params, step=1e-5):
    """Max relative error between tape gradients and central differences."""
    if not 1e-7 <= step <= 1e-3:
        raise ContractViolation(f"finite-difference step {step} outside [1e-7, 1e-3]")
    base = {k: np.array(v.value if isinstance(v, Var) else v, dtype=np.float64)
            for k, v in params.items()}
    _, grads = grad_eval(fn, base)

    def f(vals):
        out = float(const(fn({k: Var(v) for k, v in vals.items()})).value.reshape(()))
        if not np.isfinite(out):
            raise NumericFault("non-finite loss at perturbed point")
        return out

    worst = 0.0
    for name, arr in base.items():
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = f(base)
            flat[i] = orig - step
            down = f(base)
            flat[i] = orig
            numeric = (up - down) / (2.0 * step)
            analytic = grads[name].reshape(-1)[i]
            err = abs(analytic - numeric) / (abs(analytic) + abs(numeric) + 1e-12)
            worst = max(worst, err)
    return worst

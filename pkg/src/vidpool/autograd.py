"""Minimal reverse-mode autodiff on numpy arrays.

Every op builds a `Var` that remembers its parents and a vector-Jacobian
callback; `backward(loss)` walks the graph once in reverse topological
order.  Only what the pooling layers, classifier head, and embedding net
need is implemented: elementwise arithmetic with broadcasting, 2-D matmul,
reductions, and the stable softmax/logsumexp/normalize composites.

All values are float64.  Gradients of broadcast operands are summed back
to the operand's shape.
"""

from __future__ import annotations

import numpy as np


class Var:
    """A node in the computation graph."""

    __slots__ = ("value", "grad", "parents", "vjp")

    def __init__(self, value, parents: tuple = (), vjp=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.parents = parents
        self.vjp = vjp  # callable(out_grad) -> tuple of parent grads

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape})"

    # operator sugar; every overload defers to the module-level ops
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, c):
        return pow_const(self, c)

    def __getitem__(self, idx):
        return getitem(self, idx)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def backward(root: Var, seed=None) -> None:
    """Accumulate gradients of `root` into every reachable Var's .grad."""
    topo: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))

    for node in topo:
        node.grad = np.zeros_like(node.value)
    root.grad = np.ones_like(root.value) if seed is None else np.asarray(seed, dtype=np.float64)

    for node in reversed(topo):
        if node.vjp is None:
            continue
        for parent, g in zip(node.parents, node.vjp(node.grad)):
            if g is not None:
                parent.grad += g


# --- primitive ops --------------------------------------------------------


def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return Var(
        a.value + b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)),
    )


def sub(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return Var(
        a.value - b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.value.shape), _unbroadcast(-g, b.value.shape)),
    )


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return Var(
        a.value * b.value,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.value, a.value.shape),
            _unbroadcast(g * a.value, b.value.shape),
        ),
    )


def div(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return Var(
        a.value / b.value,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.value, a.value.shape),
            _unbroadcast(-g * a.value / (b.value * b.value), b.value.shape),
        ),
    )


def pow_const(a, c: float) -> Var:
    a = as_var(a)
    c = float(c)
    return Var(a.value**c, (a,), lambda g: (g * c * a.value ** (c - 1.0),))


def matmul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ValueError("matmul supports 2-D operands only; reshape first")
    return Var(a.value @ b.value, (a, b), lambda g: (g @ b.value.T, a.value.T @ g))


def transpose(a) -> Var:
    a = as_var(a)
    return Var(a.value.T, (a,), lambda g: (g.T,))


def reshape(a, shape) -> Var:
    a = as_var(a)
    return Var(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.value.shape),))


def getitem(a, idx) -> Var:
    a = as_var(a)

    def vjp(g):
        out = np.zeros_like(a.value)
        np.add.at(out, idx, g)
        return (out,)

    return Var(a.value[idx], (a,), vjp)


def concat(parts: list, axis: int = 0) -> Var:
    parts = [as_var(p) for p in parts]
    sizes = [p.value.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, splits, axis=axis))

    return Var(np.concatenate([p.value for p in parts], axis=axis), tuple(parts), vjp)


def exp(a) -> Var:
    a = as_var(a)
    out = np.exp(a.value)
    return Var(out, (a,), lambda g: (g * out,))


def log(a) -> Var:
    a = as_var(a)
    return Var(np.log(a.value), (a,), lambda g: (g / a.value,))


def sqrt(a) -> Var:
    a = as_var(a)
    out = np.sqrt(a.value)
    return Var(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a) -> Var:
    a = as_var(a)
    out = np.tanh(a.value)
    return Var(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a) -> Var:
    a = as_var(a)
    mask = a.value > 0
    return Var(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a) -> Var:
    a = as_var(a)
    # split by sign to avoid overflow in exp
    v = a.value
    out = np.where(v >= 0, 1.0 / (1.0 + np.exp(-np.abs(v))), np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v))))
    return Var(out, (a,), lambda g: (g * out * (1.0 - out),))


def clip(a, lo: float, hi: float) -> Var:
    """Clamp values; gradient passes through only inside the range."""
    a = as_var(a)
    mask = (a.value >= lo) & (a.value <= hi)
    return Var(np.clip(a.value, lo, hi), (a,), lambda g: (g * mask,))


def vsum(a, axis=None, keepdims: bool = False) -> Var:
    a = as_var(a)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.value.shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, a.value.shape).copy(),)

    return Var(a.value.sum(axis=axis, keepdims=keepdims), (a,), vjp)


def vmean(a, axis=None, keepdims: bool = False) -> Var:
    a = as_var(a)
    count = a.value.size if axis is None else a.value.shape[axis]
    return mul(vsum(a, axis, keepdims), 1.0 / count)


# --- composites -----------------------------------------------------------


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Var:
    """Stable log-sum-exp.

    The max shift is detached; its contribution to the derivative cancels
    exactly, so the gradient is the softmax as required.
    """
    a = as_var(a)
    shift = np.max(a.value, axis=axis, keepdims=True)
    shift = np.where(np.isfinite(shift), shift, 0.0)
    inner = log(vsum(exp(sub(a, shift)), axis=axis, keepdims=True))
    out = add(inner, shift)
    if not keepdims:
        out = reshape(out, _squeeze_shape(out.value.shape, axis))
    return out


def _squeeze_shape(shape: tuple, axis: int) -> tuple:
    axis = axis % len(shape)
    return tuple(s for i, s in enumerate(shape) if i != axis)


def softmax(a, axis: int = -1) -> Var:
    a = as_var(a)
    return exp(sub(a, logsumexp(a, axis=axis, keepdims=True)))


def l2_normalize(a, axis: int = -1, eps: float = 1e-24) -> Var:
    """Rows scaled to unit L2 norm; smooth at zero via the eps term."""
    a = as_var(a)
    norm = sqrt(add(vsum(mul(a, a), axis=axis, keepdims=True), eps))
    return div(a, norm)


# --- finite-difference harness --------------------------------------------


def numeric_gradient(fn, arrays: list, coords: list | None = None, h: float = 1e-5) -> list:
    """Central-difference gradient of fn(list of ndarrays) -> float.

    ``coords`` limits work to [(param_index, flat_index), ...]; with None,
    every coordinate is evaluated.  Untouched entries stay 0.
    """
    grads = [np.zeros_like(a, dtype=np.float64) for a in arrays]
    if coords is None:
        coords = [(i, j) for i, a in enumerate(arrays) for j in range(a.size)]
    work = [np.array(a, dtype=np.float64) for a in arrays]
    for i, j in coords:
        flat = work[i].reshape(-1)
        orig = flat[j]
        flat[j] = orig + h
        f_plus = float(fn(work))
        flat[j] = orig - h
        f_minus = float(fn(work))
        flat[j] = orig
        grads[i].reshape(-1)[j] = (f_plus - f_minus) / (2.0 * h)
    return grads


def check_gradients(build, params: list, coords: list | None = None, h: float = 1e-5) -> float:
    """Max relative error between tape and central-difference gradients.

    ``build`` maps a list of Var leaves to a scalar Var loss.  The relative
    error of a pair (a, n) is |a-n| / max(|a|, |n|, 1e-3) so exact zeros
    compare cleanly.
    """
    leaves = [Var(np.array(p, dtype=np.float64)) for p in params]
    loss = build(leaves)
    if loss.value.size != 1:
        raise ValueError("build must return a scalar loss")
    backward(loss)
    analytic = [leaf.grad.copy() for leaf in leaves]
    numeric = numeric_gradient(lambda arrs: build([Var(a) for a in arrs]).value, params, coords, h)
    if coords is None:
        coords = [(i, j) for i, p in enumerate(params) for j in range(np.asarray(p).size)]
    worst = 0.0
    for i, j in coords:
        a = analytic[i].reshape(-1)[j]
        n = numeric[i].reshape(-1)[j]
        worst = max(worst, abs(a - n) / max(abs(a), abs(n), 1e-3))
    return worst

"""Tape-based reverse-mode automatic differentiation over numpy arrays.

A `Tape` records every operation applied to `Node` values during a forward
pass; `backward` replays the tape in reverse creation order (which is a
topological order by construction) and accumulates adjoints. Losses here
are always scalar while parameter counts are large, so reverse mode gives
the whole gradient in one backward sweep.

All module-level math functions (`exp`, `matmul`, `where`, ...) dispatch on
their argument type: `Node` inputs are recorded on the tape, plain arrays
fall through to numpy. Code written against these functions therefore runs
identically with and without gradient tracking.

Broadcasting is supported for the elementwise binary ops in the limited
numpy-compatible form the rest of the package needs (adjoints are summed
back over broadcast axes); there is no general tensor-shape algebra beyond
that.
"""

from __future__ import annotations

import numpy as np


class DomainError(ValueError):
    """Input outside a primitive's mathematical domain (log/sqrt/division)."""


class Tape:
    """Ordered store of recorded nodes for one forward computation.

    Single-writer during recording; independent tapes may be built and
    differentiated concurrently since there is no shared global state.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def variable(self, value) -> "Node":
        """Declare a differentiable input (leaf node)."""
        return self._record(np.asarray(value, dtype=np.float64), ())

    def _record(self, value, parents) -> "Node":
        node = Node(self, len(self.nodes), value, parents)
        self.nodes.append(node)
        return node


class Node:
    """One recorded value: result, links to parents and a gradient slot.

    `parents` holds (parent node, vjp) pairs where vjp maps this node's
    adjoint to the parent's adjoint contribution — the local partial
    derivative in operator form.
    """

    __slots__ = ("tape", "index", "value", "parents", "adjoint")
    __array_ufunc__ = None  # keep numpy from absorbing Node operands

    def __init__(self, tape, index, value, parents):
        self.tape = tape
        self.index = index
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.adjoint = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self):
        return self.value.size

    def item(self) -> float:
        return float(self.value)

    def __repr__(self):
        return f"Node(#{self.index}, shape={self.value.shape})"

    # arithmetic operators; right-variants handle ndarray-or-scalar left sides
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return getitem(self, key)


def value_of(x) -> np.ndarray:
    """Underlying numpy value of a Node or array-like."""
    if isinstance(x, Node):
        return x.value
    return np.asarray(x, dtype=np.float64)


def _tape_of(*args) -> Tape | None:
    tape = None
    for a in args:
        if isinstance(a, Node):
            if tape is None:
                tape = a.tape
            elif tape is not a.tape:
                raise ValueError("cannot combine nodes from different tapes")
    return tape


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` back down to `shape` after numpy broadcasting."""
    grad = np.asarray(grad)
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _binary(a, b, out_value, vjp_a, vjp_b):
    tape = _tape_of(a, b)
    if tape is None:
        return out_value
    parents = []
    if isinstance(a, Node):
        parents.append((a, lambda g: _unbroadcast(vjp_a(g), a.value.shape)))
    if isinstance(b, Node):
        parents.append((b, lambda g: _unbroadcast(vjp_b(g), b.value.shape)))
    return tape._record(out_value, tuple(parents))


def _unary(x, out_value, vjp):
    if not isinstance(x, Node):
        return out_value
    return x.tape._record(out_value, ((x, vjp),))


# ---------------------------------------------------------------------------
# elementwise primitives
# ---------------------------------------------------------------------------

def add(a, b):
    return _binary(a, b, value_of(a) + value_of(b), lambda g: g, lambda g: g)


def sub(a, b):
    return _binary(a, b, value_of(a) - value_of(b), lambda g: g, lambda g: -g)


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    return _binary(a, b, av * bv, lambda g: g * bv, lambda g: g * av)


def div(a, b):
    av, bv = value_of(a), value_of(b)
    if np.any(bv == 0.0):
        raise DomainError("division by zero")
    out = av / bv
    return _binary(a, b, out, lambda g: g / bv, lambda g: -g * av / (bv * bv))


def neg(x):
    return _unary(x, -value_of(x), lambda g: -g)


def exp(x):
    out = np.exp(value_of(x))
    return _unary(x, out, lambda g: g * out)


def log(x):
    xv = value_of(x)
    if np.any(xv <= 0.0):
        raise DomainError("log of non-positive input")
    return _unary(x, np.log(xv), lambda g: g / xv)


def sqrt(x):
    xv = value_of(x)
    if np.any(xv <= 0.0):
        raise DomainError("sqrt of non-positive input")
    out = np.sqrt(xv)
    return _unary(x, out, lambda g: g * 0.5 / out)


def sin(x):
    xv = value_of(x)
    return _unary(x, np.sin(xv), lambda g: g * np.cos(xv))


def cos(x):
    xv = value_of(x)
    return _unary(x, np.cos(xv), lambda g: -g * np.sin(xv))


def square(x):
    xv = value_of(x)
    return _unary(x, xv * xv, lambda g: g * 2.0 * xv)


def clamp(x, lo=None, hi=None):
    """Clip to [lo, hi]; subgradient is 0 at and beyond the boundaries."""
    xv = value_of(x)
    out = np.clip(xv, lo, hi)
    inside = np.ones_like(xv, dtype=bool)
    if lo is not None:
        inside &= xv > lo
    if hi is not None:
        inside &= xv < hi
    return _unary(x, out, lambda g: g * inside)


def where(cond, a, b):
    """Select elementwise by a boolean array; `cond` is data, not differentiated."""
    cond = np.asarray(cond, dtype=bool)
    out = np.where(cond, value_of(a), value_of(b))
    return _binary(a, b, out, lambda g: g * cond, lambda g: g * ~cond)


# ---------------------------------------------------------------------------
# tensor primitives
# ---------------------------------------------------------------------------

def _reduce_to_shape(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def matmul(a, b):
    """Matrix product; operands must have ndim >= 2 (batch dims broadcast)."""
    av, bv = value_of(a), value_of(b)
    if av.ndim < 2 or bv.ndim < 2:
        raise ValueError("matmul operands must have at least 2 dimensions")
    out = av @ bv

    def vjp_a(g):
        return _reduce_to_shape(g @ np.swapaxes(bv, -1, -2), av.shape)

    def vjp_b(g):
        return _reduce_to_shape(np.swapaxes(av, -1, -2) @ g, bv.shape)

    return _binary(a, b, out, vjp_a, vjp_b)


def sum_(x, axis=None, keepdims=False):
    xv = value_of(x)
    out = xv.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, xv.shape).copy()

    return _unary(x, out, vjp)


def mean_(x, axis=None, keepdims=False):
    xv = value_of(x)
    n = xv.size if axis is None else np.prod([xv.shape[a] for a in np.atleast_1d(axis)])
    return div(sum_(x, axis=axis, keepdims=keepdims), float(n))


def reshape(x, shape):
    xv = value_of(x)
    return _unary(x, xv.reshape(shape), lambda g: np.asarray(g).reshape(xv.shape))


def transpose(x, axes):
    xv = value_of(x)
    inverse = np.argsort(axes)
    return _unary(x, xv.transpose(axes), lambda g: np.asarray(g).transpose(inverse))


def getitem(x, key):
    """Basic or integer-array indexing; adjoints scatter-add back."""
    xv = value_of(x)
    out = xv[key]

    def _has_array(k):
        if isinstance(k, tuple):
            return any(_has_array(e) for e in k)
        return isinstance(k, (np.ndarray, list))

    fancy = _has_array(key)

    def vjp(g):
        grad = np.zeros_like(xv)
        if fancy:
            np.add.at(grad, key, g)
        else:
            grad[key] += g
        return grad

    return _unary(x, out, vjp)


def stack(items, axis=0):
    values = [value_of(it) for it in items]
    tape = _tape_of(*items)
    out = np.stack(values, axis=axis)
    if tape is None:
        return out
    parents = []
    for i, it in enumerate(items):
        if isinstance(it, Node):
            parents.append((it, lambda g, i=i: np.take(np.asarray(g), i, axis=axis)))
    return tape._record(out, tuple(parents))


def concat(items, axis=0):
    values = [value_of(it) for it in items]
    tape = _tape_of(*items)
    out = np.concatenate(values, axis=axis)
    if tape is None:
        return out
    offsets = np.cumsum([0] + [v.shape[axis] for v in values])
    parents = []
    for i, it in enumerate(items):
        if isinstance(it, Node):
            def vjp(g, lo=offsets[i], hi=offsets[i + 1]):
                index = [slice(None)] * np.asarray(g).ndim
                index[axis] = slice(lo, hi)
                return np.asarray(g)[tuple(index)]
            parents.append((it, vjp))
    return tape._record(out, tuple(parents))


# ---------------------------------------------------------------------------
# backward pass and gradient checking
# ---------------------------------------------------------------------------

def backward(root: Node) -> None:
    """Accumulate adjoints of every node reachable from the scalar `root`.

    The tape's creation order is a topological order, so one reverse sweep
    visits each node exactly once. Unreachable nodes keep adjoint None
    (semantically zero).
    """
    if not isinstance(root, Node):
        raise TypeError("backward root must be a Node")
    if root.value.size != 1:
        raise ValueError("backward root must be scalar")

    tape = root.tape
    for node in tape.nodes:
        node.adjoint = None
    root.adjoint = np.ones_like(root.value)

    for node in reversed(tape.nodes[: root.index + 1]):
        if node.adjoint is None:
            continue
        for parent, vjp in node.parents:
            contribution = vjp(node.adjoint)
            if parent.adjoint is None:
                parent.adjoint = np.array(contribution, dtype=np.float64, copy=True)
            else:
                parent.adjoint = parent.adjoint + contribution


def gradient(root: Node, inputs) -> list[np.ndarray]:
    """Backward pass returning d(root)/d(input) for each declared input."""
    backward(root)
    grads = []
    for node in inputs:
        if node.adjoint is None:
            grads.append(np.zeros_like(node.value))
        else:
            grads.append(np.asarray(node.adjoint, dtype=np.float64).reshape(node.value.shape))
    return grads


EPS_REL = 1e-12  # relative-error denominator floor


def grad_check(f, x, step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` takes a sequence of scalars (Nodes or floats) and returns a scalar;
    the relative error per component is |analytic - fd| / (|analytic| + eps).
    Reports the maximum; never raises on mismatch.
    """
    x = np.asarray(x, dtype=np.float64).ravel()

    tape = Tape()
    leaves = [tape.variable(xi) for xi in x]
    root = f(leaves)
    analytic = np.array([g.item() if hasattr(g, "item") else float(g)
                         for g in gradient(root, leaves)])

    fd = np.empty_like(x)
    for i in range(x.size):
        xp = x.copy()
        xp[i] += step
        xm = x.copy()
        xm[i] -= step
        fp = f(list(xp))
        fm = f(list(xm))
        fd[i] = (float(value_of(fp)) - float(value_of(fm))) / (2.0 * step)

    rel = np.abs(analytic - fd) / (np.abs(analytic) + EPS_REL)
    return float(rel.max()) if rel.size else 0.0

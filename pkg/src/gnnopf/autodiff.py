"""A small tape-based reverse-mode differentiation engine over dense float64 arrays.

Only a fixed catalog of primitives is supported; it covers what the GNN, the
power-flow algebra and the penalty terms need. Arrays may carry leading batch
axes and elementwise ops broadcast like numpy.

    tape = Tape()
    x = tape.leaf(np.array([[3.0]]))
    y = square(x).sum()
    (gx,) = backward(y, [x])
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class Tape:
    """Ordered record of operations; parents always precede children."""

    def __init__(self):
        self.kinds: list[str] = []
        self.parents: list[tuple] = []
        self.rules: list[Callable | None] = []

    def __len__(self):
        return len(self.kinds)

    def _push(self, kind, data, parents, rule) -> Value:
        self.kinds.append(kind)
        self.parents.append(parents)
        self.rules.append(rule)
        return Value(data, self, len(self.kinds) - 1)

    def leaf(self, data) -> Value:
        """A differentiable input."""
        return self._push("leaf", np.array(data, dtype=np.float64), (), None)

    def constant(self, data) -> Value:
        """A non-differentiable input; never stored on the tape."""
        return Value(np.asarray(data, dtype=np.float64), self, None)


class Value:
    __slots__ = ("data", "tape", "node_id")
    __array_priority__ = 1000

    def __init__(self, data: np.ndarray, tape: Tape, node_id: int | None):
        self.data = data
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Value(shape={self.shape}, node={self.node_id})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    def __rmul__(self, other):
        return multiply(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __neg__(self):
        return negate(self)

    def __getitem__(self, key):
        return index(self, key)

    def sum(self, axis=None):
        return sum_reduce(self, axis)


# --------------------------------------------------------------------------- helpers

def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Value):
            return x.tape
    raise TypeError("at least one operand must be a Value")


def _lift(x, tape: Tape) -> Value:
    if isinstance(x, Value):
        if x.tape is not tape:
            raise ValueError("operands belong to different tapes")
        return x
    return tape.constant(x)


def _record(kind: str, data: np.ndarray, inputs: Sequence[Value], rule) -> Value:
    tape = inputs[0].tape
    parents = tuple(x.node_id for x in inputs)
    if all(p is None for p in parents):
        return tape.constant(data)
    return tape._push(kind, data, parents, rule)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(kind, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} do not broadcast") from None


# --------------------------------------------------------------------------- primitives

def add(a, b) -> Value:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def subtract(a, b) -> Value:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    _check_broadcast("subtract", a, b)
    sa, sb = a.shape, b.shape
    return _record("subtract", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def multiply(a, b) -> Value:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    _check_broadcast("multiply", a, b)
    ad, bd = a.data, b.data
    return _record("multiply", ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def matmul(a, b) -> Value:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    ad, bd = a.data, b.data

    def rule(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2)) if a.node_id is not None else None
        gb = np.matmul(np.swapaxes(ad, -1, -2), g) if b.node_id is not None else None
        return (None if ga is None else _unbroadcast(ga, ad.shape),
                None if gb is None else _unbroadcast(gb, bd.shape))

    return _record("matmul", np.matmul(ad, bd), (a, b), rule)


def scale(a: Value, c: float) -> Value:
    c = float(c)
    return _record("scale", a.data * c, (a,), lambda g: (g * c,))


def negate(a: Value) -> Value:
    return _record("negate", -a.data, (a,), lambda g: (-g,))


def sum_reduce(a: Value, axis=None) -> Value:
    shape = a.shape
    kept = a.data.sum(axis=axis, keepdims=True)
    data = kept.reshape(()) if axis is None else np.squeeze(kept, axis=axis)
    return _record("sum", data, (a,),
                   lambda g: (np.broadcast_to(g.reshape(kept.shape), shape).copy(),))


def _is_basic(key) -> bool:
    key = key if isinstance(key, tuple) else (key,)
    return all(k is Ellipsis or k is None or isinstance(k, (int, slice, np.integer)) for k in key)


def index(a: Value, key) -> Value:
    """Basic or integer-array indexing (row/column slices and gathers)."""
    shape = a.shape
    basic = _is_basic(key)

    def rule(g):
        full = np.zeros(shape)
        if basic:
            full[key] = g
        else:
            np.add.at(full, key, g)
        return (full,)

    return _record("index", a.data[key], (a,), rule)


def concat(xs: Sequence, axis: int = -1) -> Value:
    tape = _tape_of(*xs)
    xs = [_lift(x, tape) for x in xs]
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: shapes {[x.shape for x in xs]} along axis {axis}") from None
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _record("concat", out, xs, lambda g: tuple(np.split(g, sizes, axis=axis)))


def sin(a: Value) -> Value:
    d = a.data
    return _record("sin", np.sin(d), (a,), lambda g: (g * np.cos(d),))


def cos(a: Value) -> Value:
    d = a.data
    return _record("cos", np.cos(d), (a,), lambda g: (-g * np.sin(d),))


def square(a: Value) -> Value:
    d = a.data
    return _record("square", d * d, (a,), lambda g: (2.0 * g * d,))


def magnitude(re, im) -> Value:
    """sqrt(re^2 + im^2); the gradient at the origin is taken as zero."""
    tape = _tape_of(re, im)
    re, im = _lift(re, tape), _lift(im, tape)
    _check_broadcast("magnitude", re, im)
    out = np.hypot(re.data, im.data)
    safe = np.where(out > 0, out, 1.0)
    cr, ci = np.where(out > 0, re.data / safe, 0.0), np.where(out > 0, im.data / safe, 0.0)
    return _record("magnitude", out, (re, im),
                   lambda g: (_unbroadcast(g * cr, re.shape), _unbroadcast(g * ci, im.shape)))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: Value) -> Value:
    y = _sigmoid(a.data)
    return _record("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def relu(a: Value) -> Value:
    mask = a.data > 0
    return _record("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def tanh(a: Value) -> Value:
    y = np.tanh(a.data)
    return _record("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def extended_log(a: Value, s: float) -> Value:
    """Logarithm continued linearly with slope ``s`` below ``u = 1/s``."""
    from .loss import extended_log as fwd, extended_log_derivative as der

    d = a.data
    return _record("extended_log", fwd(d, s), (a,), lambda g: (g * der(d, s),))


def shift(gso, z: Value, k: int = 1) -> Value:
    """Apply the graph shift ``k`` times: ``A^k Z`` by repeated multiplication."""
    a = np.asarray(gso)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[1] != z.shape[-2]:
        raise ShapeError(f"shift: operator {a.shape} does not conform with signal {z.shape}")
    out = z.data
    for _ in range(k):
        out = np.matmul(a, out)
    at = a.T

    def rule(g):
        for _ in range(k):
            g = np.matmul(at, g)
        return (g,)

    return _record("shift", out, (z,), rule)


# --------------------------------------------------------------------------- backward

def backward(root: Value, leaves: Sequence[Value]) -> list[np.ndarray]:
    """Gradients of a scalar ``root`` with respect to ``leaves`` (zeros if unreachable)."""
    if root.data.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    tape = root.tape
    grads: list[np.ndarray | None] = [None] * len(tape)
    if root.node_id is not None:
        grads[root.node_id] = np.ones(root.shape)
        for nid in range(root.node_id, -1, -1):
            g = grads[nid]
            rule = tape.rules[nid]
            if g is None or rule is None:
                continue
            for pid, pg in zip(tape.parents[nid], rule(g)):
                if pid is None or pg is None:
                    continue
                grads[pid] = pg if grads[pid] is None else grads[pid] + pg
    out = []
    for leaf in leaves:
        if leaf.node_id is None:
            raise ValueError("constants have no gradient")
        g = grads[leaf.node_id]
        out.append(np.zeros(leaf.shape) if g is None else g)
    return out


def finite_difference_check(f: Callable[[Tape, list[Value]], Value], point: Sequence[np.ndarray],
                            h: float = 1e-5) -> float:
    """Max over coordinates of ``|analytic - central| / max(1, |analytic|)``.

    ``f(tape, leaves)`` must build a scalar on ``tape`` from the given leaves.
    """
    point = [np.array(p, dtype=np.float64) for p in point]
    tape = Tape()
    leaves = [tape.leaf(p) for p in point]
    analytic = backward(f(tape, leaves), leaves)

    def evaluate(arrays):
        t = Tape()
        return float(f(t, [t.leaf(a) for a in arrays]).data)

    worst = 0.0
    for k, p in enumerate(point):
        for j in np.ndindex(p.shape):
            plus = [q.copy() for q in point]
            minus = [q.copy() for q in point]
            plus[k][j] += h
            minus[k][j] -= h
            numeric = (evaluate(plus) - evaluate(minus)) / (2 * h)
            a = analytic[k][j]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst

"""A small reverse-mode tape over numpy arrays.

Operations are coarse (a linear layer, a grid lookup, a whole compositing
pass) and each records one closure that maps output adjoints to input
adjoints.  ``Tape.backward`` replays the closures in reverse order.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import UsageError


class Var:
    __slots__ = ("value", "grad", "requires_grad", "tape", "name")

    def __init__(self, value, requires_grad=False, tape=None, name=None):
        self.value = value
        self.grad = None
        self.requires_grad = requires_grad
        self.tape = tape
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def accum(self, g):
        if not self.requires_grad:
            return
        g = np.asarray(g, dtype=self.value.dtype)
        if self.grad is None:
            # adopt without copying; later contributions allocate instead of mutating
            self.grad = g
        else:
            self.grad = self.grad + g

    def __repr__(self):
        return f"Var({self.name or ''} shape={getattr(self.value, 'shape', ())})"


def const(value) -> Var:
    return value if isinstance(value, Var) else Var(np.asarray(value))


def detach(x: Var) -> Var:
    return Var(x.value)


class Tape:
    def __init__(self):
        self._records = []
        self._done = False

    def param(self, value, name=None) -> Var:
        return Var(value, True, self, name)

    def record(self, outputs, fn: Callable) -> None:
        self._records.append((outputs, fn))

    def backward(self, loss: Var) -> None:
        if self._done:
            raise UsageError("backward already ran on this tape")
        if loss.tape is not self:
            raise UsageError("loss was not recorded on this tape (no forward pass recorded)")
        if np.size(loss.value) != 1:
            raise UsageError("backward needs a scalar loss")
        loss.grad = np.ones_like(loss.value)
        for outputs, fn in reversed(self._records):
            if isinstance(outputs, Var):
                if outputs.grad is not None:
                    fn(outputs.grad)
            else:
                grads = [o.grad if o is not None else None for o in outputs]
                if any(g is not None for g in grads):
                    fn(grads)
        self._done = True
        self._records.clear()


def _tape_of(*xs: Var):
    for x in xs:
        if isinstance(x, Var) and x.requires_grad:
            return x.tape
    return None


def new_var(value, *inputs: Var, name=None) -> Var:
    tape = _tape_of(*inputs)
    return Var(value, tape is not None, tape, name)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ------------------------------------------------------------ elementwise


def add(a: Var, b: Var) -> Var:
    a, b = const(a), const(b)
    out = new_var(a.value + b.value, a, b)
    if out.requires_grad:
        out.tape.record(out, lambda g: (a.accum(_unbroadcast(g, a.shape)), b.accum(_unbroadcast(g, b.shape))))
    return out


def sub(a: Var, b: Var) -> Var:
    a, b = const(a), const(b)
    out = new_var(a.value - b.value, a, b)
    if out.requires_grad:
        out.tape.record(out, lambda g: (a.accum(_unbroadcast(g, a.shape)), b.accum(_unbroadcast(-g, b.shape))))
    return out


def mul(a: Var, b: Var) -> Var:
    a, b = const(a), const(b)
    out = new_var(a.value * b.value, a, b)
    if out.requires_grad:

        def back(g):
            a.accum(_unbroadcast(g * b.value, a.shape))
            b.accum(_unbroadcast(g * a.value, b.shape))

        out.tape.record(out, back)
    return out


def scale(a: Var, c: float) -> Var:
    out = new_var(a.value * c, a)
    if out.requires_grad:
        out.tape.record(out, lambda g: a.accum(g * c))
    return out


def relu(x: Var) -> Var:
    out = new_var(np.maximum(x.value, 0), x)
    if out.requires_grad:
        out.tape.record(out, lambda g: x.accum(g * (out.value > 0)))
    return out


def softplus(x: Var) -> Var:
    v = x.value
    out = new_var(np.logaddexp(0, v).astype(v.dtype), x)
    if out.requires_grad:
        sig = _flush_tiny(_sigmoid(v))
        out.tape.record(out, lambda g: x.accum(g * sig))
    return out


# Derivative factors below this are treated as zero: saturated units otherwise
# fill the backward pass with float32 denormals, which slow every matmul.
DERIV_FLOOR = 1e-30


def _flush_tiny(a):
    a[np.abs(a) < DERIV_FLOOR] = 0
    return a


def _sigmoid(v):
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1 / (1 + e), e / (1 + e)).astype(v.dtype)


def sigmoid(x: Var) -> Var:
    s = _sigmoid(x.value)
    out = new_var(s, x)
    if out.requires_grad:
        ds = _flush_tiny(s * (1 - s))
        out.tape.record(out, lambda g: x.accum(g * ds))
    return out


def absval(x: Var) -> Var:
    sgn = np.sign(x.value)
    out = new_var(np.abs(x.value), x)
    if out.requires_grad:
        out.tape.record(out, lambda g: x.accum(g * sgn))
    return out


# ------------------------------------------------------------ structure


def linear(x: Var, w: Var, b: Var) -> Var:
    x, w, b = const(x), const(w), const(b)
    out = new_var(x.value @ w.value + b.value, x, w, b)
    if out.requires_grad:

        def back(g):
            if w.requires_grad:
                w.accum(x.value.T @ g)
            if b.requires_grad:
                b.accum(g.sum(axis=0))
            if x.requires_grad:
                x.accum(g @ w.value.T)

        out.tape.record(out, back)
    return out


def concat(xs: Sequence[Var], axis=-1) -> Var:
    xs = [const(x) for x in xs]
    out = new_var(np.concatenate([x.value for x in xs], axis=axis), *xs)
    if out.requires_grad:
        sizes = np.cumsum([x.value.shape[axis] for x in xs])[:-1]

        def back(g):
            for x, piece in zip(xs, np.split(g, sizes, axis=axis)):
                x.accum(piece)

        out.tape.record(out, back)
    return out


def cols(x: Var, start: int, stop: int) -> Var:
    out = new_var(x.value[..., start:stop], x)
    if out.requires_grad:

        def back(g):
            full = np.zeros_like(x.value)
            full[..., start:stop] = g
            x.accum(full)

        out.tape.record(out, back)
    return out


def reshape(x: Var, shape) -> Var:
    out = new_var(x.value.reshape(shape), x)
    if out.requires_grad:
        out.tape.record(out, lambda g: x.accum(g.reshape(x.shape)))
    return out


def take_rows(x: Var, idx: np.ndarray) -> Var:
    out = new_var(x.value[idx], x)
    if out.requires_grad:

        def back(g):
            full = np.zeros_like(x.value)
            np.add.at(full, idx, g)
            x.accum(full)

        out.tape.record(out, back)
    return out


def total(x: Var) -> Var:
    out = new_var(np.asarray(x.value.sum()), x)
    if out.requires_grad:
        out.tape.record(out, lambda g: x.accum(np.broadcast_to(g, x.shape)))
    return out


def mean(x: Var) -> Var:
    n = x.value.size
    out = new_var(np.asarray(x.value.sum() / n), x)
    if out.requires_grad:
        out.tape.record(out, lambda g: x.accum(np.broadcast_to(g / n, x.shape)))
    return out


def weighted_sum(terms: Sequence[Var], weights: Sequence[float]) -> Var:
    """Scalar ``sum_k weights[k] * terms[k]``; terms must be scalars."""
    terms = [const(t) for t in terms]
    val = sum(float(w) * t.value for w, t in zip(weights, terms))
    out = new_var(np.asarray(val, dtype=terms[0].value.dtype), *terms)
    if out.requires_grad:

        def back(g):
            for w, t in zip(weights, terms):
                if w != 0:
                    t.accum(g * w)

        out.tape.record(out, back)
    return out

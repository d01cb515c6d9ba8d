"""Minimal reverse-mode tape over float64 numpy arrays.

Each operation stores its parents and a VJP closure; ``backward`` walks the
graph once in reverse topological order. Only the primitives the training
pipeline needs are provided; module-specific operations (convolutions,
segment pooling, losses) attach their hand-written VJPs via ``custom``.
"""

from __future__ import annotations

import numpy as np


class Var:
    """A tape node wrapping a float64 array (or scalar)."""

    __slots__ = ("value", "grad", "_parents", "_vjp")

    def __init__(self, value, parents=(), vjp=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self._parents = tuple(parents)
        self._vjp = vjp

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape}, leaf={self._vjp is None})"


def leaf(value) -> Var:
    return Var(value)


def custom(value, parents, vjp) -> Var:
    """Create a node with an explicit VJP: vjp(g) -> grads aligned with parents."""
    return Var(value, parents=parents, vjp=vjp)


def backward(root: Var) -> None:
    """Accumulate gradients of a scalar ``root`` into every reachable leaf."""
    if root.value.ndim != 0:
        raise ValueError("backward expects a scalar root")
    order: list[Var] = []
    seen: set[int] = set()
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
            if id(p) not in seen:
                stack.append((p, False))
    root.grad = np.asarray(1.0)
    for node in reversed(order):
        if node._vjp is None or node.grad is None:
            continue
        for parent, g in zip(node._parents, node._vjp(node.grad)):
            if g is None:
                continue
            if parent.grad is None:
                parent.grad = np.array(g, dtype=np.float64, copy=True)
            else:
                parent.grad = parent.grad + g
    return None


# ---------------------------------------------------------------------------
# generic primitives
# ---------------------------------------------------------------------------

def add(a: Var, b: Var) -> Var:
    """Elementwise add; b may be a row vector broadcast over a's rows."""
    out = a.value + b.value

    def vjp(g):
        ga = g
        gb = g
        if b.value.shape != out.shape:
            gb = g.reshape(-1, b.value.shape[-1]).sum(axis=0).reshape(b.value.shape)
        if a.value.shape != out.shape:
            ga = g.reshape(-1, a.value.shape[-1]).sum(axis=0).reshape(a.value.shape)
        return ga, gb

    return Var(out, (a, b), vjp)


def sub(a: Var, b: Var) -> Var:
    return Var(a.value - b.value, (a, b), lambda g: (g, -g))


def scale(a: Var, c: float) -> Var:
    return Var(a.value * c, (a,), lambda g: (g * c,))


def matmul(a: Var, b: Var) -> Var:
    return Var(
        a.value @ b.value,
        (a, b),
        lambda g: (g @ b.value.T, a.value.T @ g),
    )


def relu(a: Var) -> Var:
    mask = a.value > 0
    return Var(a.value * mask, (a,), lambda g: (g * mask,))


def tanh(a: Var) -> Var:
    t = np.tanh(a.value)
    return Var(t, (a,), lambda g: (g * (1.0 - t * t),))


def sigmoid(a: Var) -> Var:
    s = 1.0 / (1.0 + np.exp(-a.value))
    return Var(s, (a,), lambda g: (g * s * (1.0 - s),))


def sum_all(a: Var) -> Var:
    return Var(np.sum(a.value), (a,), lambda g: (np.broadcast_to(g, a.value.shape).copy(),))


def add_scalars(terms: list[Var]) -> Var:
    """Fixed-order sum of scalar nodes."""
    out = terms[0]
    for t in terms[1:]:
        out = Var(out.value + t.value, (out, t), lambda g: (g, g))
    return out


def affine_vec(h: Var, w: Var, b: Var) -> Var:
    """(T, C) @ (C,) + scalar bias -> (T,)."""
    out = h.value @ w.value + b.value

    def vjp(g):
        return np.outer(g, w.value), h.value.T @ g, np.sum(g).reshape(b.value.shape)

    return Var(out, (h, w, b), vjp)


def softmax_rows(a: Var) -> Var:
    z = a.value - np.max(a.value, axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / np.sum(e, axis=-1, keepdims=True)

    def vjp(g):
        dot = np.sum(g * s, axis=-1, keepdims=True)
        return (s * (g - dot),)

    return Var(s, (a,), vjp)


def transpose(a: Var) -> Var:
    return Var(a.value.T, (a,), lambda g: (g.T,))

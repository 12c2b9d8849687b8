"""Dense float64 reverse-mode differentiation over numpy arrays.

Every primitive returns a :class:`Node` holding its forward value and a
closure mapping the output cotangent to one cotangent per parent. Backward
traversal is ordered by node creation sequence, which is a valid reverse
topological order because a node can only be built from existing nodes.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

CLAMP = 30.0
NORM_EPS = 1e-12

_creation = itertools.count()


class DimensionError(ValueError):
    pass


class DegenerateVectorError(ValueError):
    pass


class EvaluationError(RuntimeError):
    pass


class Node:
    __slots__ = ("value", "grad", "parents", "vjp", "order", "requires_grad")

    def __init__(self, value, parents: Sequence["Node"] = (), vjp=None, requires_grad=None):
        self.value = np.asarray(value, dtype=np.float64)
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in parents)
        self.requires_grad = requires_grad
        # constant subgraphs keep no history, so inference frees memory as it goes
        self.parents = tuple(parents) if requires_grad else ()
        self.vjp = vjp if requires_grad else None
        self.grad = None
        self.order = next(_creation)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(shape={self.value.shape}, requires_grad={self.requires_grad})"

    def backward(self, seed=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable node."""
        nodes = _reachable(self)
        for n in nodes:
            n.grad = None
        if seed is None:
            if self.value.size != 1:
                raise DimensionError(f"backward needs a scalar or a seed, got shape {self.shape}")
            seed = np.ones_like(self.value)
        self.grad = np.asarray(seed, dtype=np.float64)
        for n in sorted(nodes, key=lambda n: n.order, reverse=True):
            if n.grad is None or n.vjp is None:
                continue
            for parent, g in zip(n.parents, n.vjp(n.grad)):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.array(g, dtype=np.float64)
                else:
                    parent.grad = parent.grad + g

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_node(other)))

    def __rsub__(self, other):
        return add(as_node(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Node):
            raise TypeError("division by a Node is not supported")
        return scale(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)


def _reachable(root: Node) -> list[Node]:
    seen = {id(root): root}
    stack = [root]
    while stack:
        n = stack.pop()
        for p in n.parents:
            if id(p) not in seen:
                seen[id(p)] = p
                stack.append(p)
    return list(seen.values())


def leaf(value) -> Node:
    """A trainable input."""
    return Node(np.array(value, dtype=np.float64), requires_grad=True)


def constant(value) -> Node:
    return Node(value, requires_grad=False)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def primitive(value, parents: Sequence[Node], vjp: Callable) -> Node:
    """Register a custom differentiable op."""
    return Node(value, parents, vjp)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    try:
        out = a.value + b.value
    except ValueError:
        raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}") from None
    return Node(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def neg(a: Node) -> Node:
    return Node(-a.value, (a,), lambda g: (-g,))


def scale(a: Node, c: float) -> Node:
    return Node(a.value * c, (a,), lambda g: (g * c,))


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    try:
        out = a.value * b.value
    except ValueError:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}") from None
    return Node(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)),
    )


def relu(x: Node) -> Node:
    # subgradient at exactly 0 is 0
    pos = x.value > 0
    return Node(np.where(pos, x.value, 0.0), (x,), lambda g: (g * pos,))


def sigmoid(x: Node) -> Node:
    s = 1.0 / (1.0 + np.exp(-np.clip(x.value, -CLAMP, CLAMP)))
    inside = np.abs(x.value) <= CLAMP
    return Node(s, (x,), lambda g: (g * s * (1.0 - s) * inside,))


def tanh(x: Node) -> Node:
    t = np.tanh(x.value)
    return Node(t, (x,), lambda g: (g * (1.0 - t * t),))


def exp(x: Node) -> Node:
    e = np.exp(x.value)
    return Node(e, (x,), lambda g: (g * e,))


def log(x: Node) -> Node:
    return Node(np.log(x.value), (x,), lambda g: (g / x.value,))


# ------------------------------------------------------------------ reductions


def sum(x: Node, axis=None, keepdims=False) -> Node:  # noqa: A001
    out = x.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Node(out, (x,), vjp)


def mean(x: Node, axis=None, keepdims=False) -> Node:
    n = x.value.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum(x, axis, keepdims), 1.0 / n)


# -------------------------------------------------------------- shape plumbing


def reshape(x: Node, shape) -> Node:
    return Node(x.value.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Node, axes=None) -> Node:
    if axes is None:
        axes = tuple(reversed(range(x.value.ndim)))
    inv = np.argsort(axes)
    return Node(np.transpose(x.value, axes), (x,), lambda g: (np.transpose(g, inv),))


def swap_last(x: Node) -> Node:
    axes = list(range(x.value.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, tuple(axes))


def index(x: Node, key) -> Node:
    fancy = any(isinstance(k, (np.ndarray, list)) for k in (key if isinstance(key, tuple) else (key,)))

    def vjp(g):
        out = np.zeros_like(x.value)
        if fancy:
            np.add.at(out, key, g)
        else:
            out[key] = g
        return (out,)

    return Node(x.value[key], (x,), vjp)


def concat(nodes: Sequence[Node], axis=0) -> Node:
    nodes = [as_node(n) for n in nodes]
    try:
        out = np.concatenate([n.value for n in nodes], axis=axis)
    except ValueError:
        shapes = ", ".join(str(n.shape) for n in nodes)
        raise DimensionError(f"cannot concatenate shapes {shapes} along axis {axis}") from None
    bounds = np.cumsum([n.shape[axis] for n in nodes])[:-1]
    return Node(out, nodes, lambda g: tuple(np.split(g, bounds, axis=axis)))


def broadcast_to(x: Node, shape) -> Node:
    return Node(np.broadcast_to(x.value, shape).copy(), (x,), lambda g: (_unbroadcast(g, x.shape),))


# ---------------------------------------------------------------- linear maps


def matmul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    if a.value.ndim < 2 or b.value.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"cannot matmul shapes {a.shape} and {b.shape}")
    out = a.value @ b.value

    def vjp(g):
        ga = g @ np.swapaxes(b.value, -1, -2)
        gb = np.swapaxes(a.value, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Node(out, (a, b), vjp)


def affine(x, W, b) -> Node:
    """``W @ x + b`` applied over the last axis of ``x`` (any leading batch dims)."""
    x, W, b = as_node(x), as_node(W), as_node(b)
    if W.value.ndim != 2 or x.shape[-1:] != W.shape[1:] or b.shape != W.shape[:1]:
        raise DimensionError(
            f"affine: x {x.shape} incompatible with W {W.shape} and b {b.shape}"
        )
    n, m = W.shape
    out = x.value @ W.value.T + b.value

    def vjp(g):
        g2 = g.reshape(-1, n)
        return g @ W.value, g2.T @ x.value.reshape(-1, m), g2.sum(axis=0)

    return Node(out, (x, W, b), vjp)


# -------------------------------------------------------- normalised outputs


def softmax(x: Node, axis=-1, mask=None) -> Node:
    """Stable softmax; positions where ``mask`` is False get exactly zero weight.

    Logits are shifted by their maximum and the shifted values clamped at
    ``-CLAMP`` so every unmasked weight stays strictly positive while the
    output remains invariant to a constant shift.
    """
    z = x.value if mask is None else np.where(mask, x.value, -np.inf)
    top = z.max(axis=axis, keepdims=True)
    shifted = z - top
    inside = shifted >= -CLAMP
    e = np.exp(np.where(inside, shifted, -CLAMP))
    if mask is not None:
        e = np.where(mask, e, 0.0)
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        gy = (g - (g * s).sum(axis=axis, keepdims=True)) * s
        clipped = np.where(inside, 0.0, gy)
        # clamped entries sit at a fixed offset below the max, so their share flows to the argmax
        argmax = np.expand_dims(np.argmax(z, axis=axis), axis)
        onehot = np.zeros_like(s)
        np.put_along_axis(onehot, argmax, 1.0, axis=axis)
        return (gy * inside + onehot * clipped.sum(axis=axis, keepdims=True),)

    return Node(s, (x,), vjp)


def log_softmax(x: Node, axis=-1) -> Node:
    z = x.value - x.value.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)
    return Node(out, (x,), lambda g: (g - s * g.sum(axis=axis, keepdims=True),))


def l2_normalize(x: Node, axis=-1) -> Node:
    norm = np.sqrt((x.value * x.value).sum(axis=axis, keepdims=True))
    if np.any(norm <= NORM_EPS):
        raise DegenerateVectorError(f"cannot normalise a vector with norm <= {NORM_EPS}")
    y = x.value / norm

    def vjp(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / norm,)

    return Node(y, (x,), vjp)


def layer_norm(x: Node, gain: Node, bias: Node, eps=1e-5) -> Node:
    mu = x.value.mean(axis=-1, keepdims=True)
    xc = x.value - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.value + bias.value

    def vjp(g):
        gx = g * gain.value
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return dx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape)

    return Node(out, (x, gain, bias), vjp)


# ----------------------------------------------------------- gradient checks


@dataclass
class GradCheckReport:
    tol: float
    max_rel_error: dict = field(default_factory=dict)
    flagged: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.flagged

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)


def rel_error(a, n):
    return np.abs(a - n) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))


def grad_check(
    f: Callable[[Mapping[str, Node]], Node],
    params: Mapping[str, np.ndarray],
    h: float = 1e-5,
    tol: float = 1e-4,
    max_entries: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar ``f`` with central differences.

    ``max_entries`` caps the number of coordinates probed per parameter; the
    probed coordinates are drawn with a seeded generator.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    leaves = {k: leaf(v) for k, v in base.items()}
    out = f(leaves)
    if out.value.size != 1:
        raise DimensionError(f"grad_check needs a scalar function, got shape {out.shape}")
    out.backward()

    def evaluate(arrays):
        val = float(f({k: constant(v) for k, v in arrays.items()}).value.reshape(()))
        if not np.isfinite(val):
            raise EvaluationError("function returned a non-finite value during grad_check")
        return val

    rng = np.random.default_rng(seed)
    report = GradCheckReport(tol=tol)
    for name, value in base.items():
        analytic = leaves[name].grad
        if analytic is None:
            analytic = np.zeros_like(value)
        coords = np.arange(value.size)
        if max_entries is not None and value.size > max_entries:
            coords = rng.choice(value.size, size=max_entries, replace=False)
        worst = 0.0
        for flat in coords:
            idx = np.unravel_index(flat, value.shape)
            probe = dict(base)
            plus = value.copy()
            plus[idx] += h
            probe[name] = plus
            fp = evaluate(probe)
            minus = value.copy()
            minus[idx] -= h
            probe[name] = minus
            fm = evaluate(probe)
            numeric = (fp - fm) / (2 * h)
            err = float(rel_error(analytic[idx], numeric))
            worst = max(worst, err)
            if err > tol:
                report.flagged.append((name, tuple(int(i) for i in idx), float(analytic[idx]), numeric))
        report.max_rel_error[name] = worst
    return report

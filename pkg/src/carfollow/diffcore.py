"""Reverse-mode differentiation on dense numpy tensors, plus an Adam optimizer.

Every operation returns a :class:`Tensor` holding its value and a closure that
pushes the output adjoint back to its inputs. Calling :meth:`Tensor.backward`
on a scalar walks the recorded nodes in reverse topological order.

:class:`Graph` wraps a plain function of named tensors so that a computation
can be bound, evaluated and differentiated as a unit::

    g = Graph(lambda x, y: x * y)
    forward(g, {"x": 3.0, "y": 4.0})   # 12.0
    backward(g)                        # {"x": 4.0, "y": 3.0}
"""

from __future__ import annotations

import inspect
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np


class DiffError(RuntimeError):
    """Raised for misuse of the engine (unbound inputs, shape errors, ...)."""


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("value", "grad", "parents", "backward_fn", "op", "name", "requires_grad")

    __array_priority__ = 100.0

    def __init__(self, value, parents=(), backward_fn=None, op="leaf", name=None, requires_grad=None):
        self.value = _as_array(value)
        self.grad: np.ndarray | None = None
        self.parents: tuple[Tensor, ...] = tuple(parents)
        self.backward_fn = backward_fn
        self.op = op
        self.name = name
        if requires_grad is None:
            requires_grad = op == "leaf" or any(p.requires_grad for p in self.parents)
        self.requires_grad = requires_grad

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(op={self.op}, shape={self.shape})"

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def item(self) -> float:
        return float(self.value)

    def numpy(self) -> np.ndarray:
        return self.value

    # arithmetic sugar
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

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self, seed=None) -> None:
        """Accumulate d(self)/d(node) into ``.grad`` of every upstream node."""
        if seed is None:
            if self.value.size != 1:
                raise DiffError(f"backward needs a scalar output, got shape {self.shape}")
            seed = np.ones_like(self.value)
        order = topological_order(self)
        for node in order:
            node.grad = None
        self.grad = _as_array(seed).reshape(self.shape).copy()
        for node in reversed(order):
            if node.backward_fn is None or node.grad is None:
                continue
            grads = node.backward_fn(node.grad)
            for parent, g in zip(node.parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                g = _unbroadcast(np.asarray(g, dtype=np.float64), parent.shape)
                if parent.grad is None:
                    parent.grad = g.copy()
                else:
                    parent.grad += g


def tensor(value, name=None) -> Tensor:
    return Tensor(value, name=name)


def constant(value) -> Tensor:
    return Tensor(value, op="const", requires_grad=False)


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root``; every node appears after its inputs."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    return Tensor(a.value + b.value, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    return Tensor(a.value - b.value, (a, b), lambda g: (g, -g), "sub")


def neg(a) -> Tensor:
    a = _t(a)
    return Tensor(-a.value, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    av, bv = a.value, b.value
    return Tensor(av * bv, (a, b), lambda g: (g * bv, g * av), "mul")


def div(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    av, bv = a.value, b.value
    out = av / bv
    return Tensor(out, (a, b), lambda g: (g / bv, -g * out / bv), "div")


def power(a, p: float) -> Tensor:
    a = _t(a)
    av = a.value
    if p == 2:
        return Tensor(av * av, (a,), lambda g: (2.0 * g * av,), "square")
    return Tensor(av**p, (a,), lambda g: (g * p * av ** (p - 1),), "pow")


def square(a) -> Tensor:
    return power(a, 2)


def exp(a) -> Tensor:
    a = _t(a)
    out = np.exp(a.value)
    return Tensor(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = _t(a)
    av = a.value
    return Tensor(np.log(av), (a,), lambda g: (g / av,), "log")


def sqrt(a) -> Tensor:
    a = _t(a)
    out = np.sqrt(a.value)
    return Tensor(out, (a,), lambda g: (0.5 * g / out,), "sqrt")


def sin(a) -> Tensor:
    a = _t(a)
    av = a.value
    return Tensor(np.sin(av), (a,), lambda g: (g * np.cos(av),), "sin")


def cos(a) -> Tensor:
    a = _t(a)
    av = a.value
    return Tensor(np.cos(av), (a,), lambda g: (-g * np.sin(av),), "cos")


def tanh(a) -> Tensor:
    a = _t(a)
    out = np.tanh(a.value)
    return Tensor(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a) -> Tensor:
    a = _t(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return Tensor(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a) -> Tensor:
    a = _t(a)
    mask = a.value > 0
    return Tensor(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,), "relu")


def softplus(a) -> Tensor:
    a = _t(a)
    av = a.value
    out = np.logaddexp(0.0, av)
    sig = 0.5 * (1.0 + np.tanh(0.5 * av))
    return Tensor(out, (a,), lambda g: (g * sig,), "softplus")


def absolute(a) -> Tensor:
    a = _t(a)
    sign = np.sign(a.value)
    return Tensor(np.abs(a.value), (a,), lambda g: (g * sign,), "abs")


def where(cond, a, b) -> Tensor:
    a, b = _t(a), _t(b)
    cond = np.asarray(cond, dtype=bool)
    return Tensor(
        np.where(cond, a.value, b.value),
        (a, b),
        lambda g: (np.where(cond, g, 0.0), np.where(cond, 0.0, g)),
        "where",
    )


# ---------------------------------------------------------------------------
# reductions and shape manipulation


def _expand(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _t(a)
    shape = a.shape
    return Tensor(
        a.value.sum(axis=axis, keepdims=keepdims),
        (a,),
        lambda g: (_expand(g, shape, axis, keepdims),),
        "sum",
    )


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = _t(a)
    shape = a.shape
    if axis is None:
        n = a.value.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([shape[ax] for ax in axes]))
    return Tensor(
        a.value.mean(axis=axis, keepdims=keepdims),
        (a,),
        lambda g: (_expand(g, shape, axis, keepdims) / n,),
        "mean",
    )


def reshape(a, shape) -> Tensor:
    a = _t(a)
    old = a.shape
    return Tensor(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = _t(a)
    inv = None if axes is None else np.argsort(axes)
    return Tensor(
        np.transpose(a.value, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose"
    )


def getitem(a, idx) -> Tensor:
    a = _t(a)
    shape = a.shape

    def back(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return Tensor(a.value[idx], (a,), back, "getitem")


def stack(tensors: Sequence, axis=0) -> Tensor:
    ts = [_t(t) for t in tensors]

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return Tensor(np.stack([t.value for t in ts], axis=axis), ts, back, "stack")


def concatenate(tensors: Sequence, axis=0) -> Tensor:
    ts = [_t(t) for t in tensors]
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor(np.concatenate([t.value for t in ts], axis=axis), ts, back, "concat")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    av, bv = a.value, b.value

    def back(g):
        if av.ndim == 1 and bv.ndim == 1:
            return g * bv, g * av
        if av.ndim == 1:
            return (g[..., None, :] * bv).sum(-1), av[:, None] * g[..., None, :]
        if bv.ndim == 1:
            return g[..., :, None] * bv, (g[..., :, None] * av).reshape(-1, av.shape[-1]).sum(axis=0)
        return g @ np.swapaxes(bv, -1, -2), np.swapaxes(av, -1, -2) @ g

    if av.ndim >= 1 and bv.ndim >= 1 and av.shape[-1] != bv.shape[-2 if bv.ndim > 1 else 0]:
        raise DiffError(f"matmul shape mismatch: {av.shape} @ {bv.shape}")
    return Tensor(av @ bv, (a, b), back, "matmul")


def einsum(subscripts: str, a, b) -> Tensor:
    """Two-operand einsum. Every index of an operand must also appear in the
    output or in the other operand."""
    a, b = _t(a), _t(b)
    lhs, out = subscripts.replace(" ", "").split("->")
    sa, sb = lhs.split(",")
    for s, other in ((sa, sb), (sb, sa)):
        if any(c not in out and c not in other for c in s) or len(set(s)) != len(s):
            raise DiffError(f"unsupported einsum pattern {subscripts!r}")
    av, bv = a.value, b.value

    def back(g):
        return (
            np.einsum(f"{out},{sb}->{sa}", g, bv),
            np.einsum(f"{out},{sa}->{sb}", g, av),
        )

    return Tensor(np.einsum(subscripts, av, bv), (a, b), back, "einsum")


# ---------------------------------------------------------------------------
# log-space primitives


def logsumexp(a, axis=-1, keepdims=False) -> Tensor:
    a = _t(a)
    av = a.value
    m = np.max(av, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    s = np.log(np.sum(np.exp(av - m), axis=axis, keepdims=True)) + m
    out = s if keepdims else np.squeeze(s, axis=axis)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * np.exp(av - s),)

    return Tensor(out, (a,), back, "logsumexp")


def log_softmax(a, axis=-1) -> Tensor:
    a = _t(a)
    av = a.value
    m = np.max(av, axis=axis, keepdims=True)
    out = av - m - np.log(np.sum(np.exp(av - m), axis=axis, keepdims=True))
    p = np.exp(out)
    return Tensor(
        out, (a,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),), "log_softmax"
    )


def softmax(a, axis=-1) -> Tensor:
    a = _t(a)
    av = a.value
    e = np.exp(av - np.max(av, axis=axis, keepdims=True))
    p = e / e.sum(axis=axis, keepdims=True)
    return Tensor(
        p, (a,), lambda g: (p * (g - (g * p).sum(axis=axis, keepdims=True)),), "softmax"
    )


# ---------------------------------------------------------------------------
# graphs


@dataclass
class Graph:
    """A differentiable computation over named leaf inputs.

    ``fn`` receives one :class:`Tensor` per parameter name and returns a
    tensor. After :func:`forward`, ``nodes`` lists every node in topological
    order and ``output`` holds the result.
    """

    fn: Callable[..., Tensor]
    names: tuple[str, ...] = field(default=())
    nodes: list[Tensor] = field(default_factory=list, repr=False)
    leaves: dict[str, Tensor] = field(default_factory=dict, repr=False)
    output: Tensor | None = field(default=None, repr=False)

    def __post_init__(self):
        if not self.names:
            self.names = tuple(inspect.signature(self.fn).parameters)

    def index(self, node: Tensor) -> int:
        for i, n in enumerate(self.nodes):
            if n is node:
                return i
        raise KeyError(node)


def forward(graph: Graph, inputs: Mapping[str, object]) -> np.ndarray:
    missing = [n for n in graph.names if n not in inputs]
    if missing:
        raise DiffError(f"unbound graph inputs: {missing}")
    extra = set(inputs) - set(graph.names)
    if extra:
        raise DiffError(f"unknown graph inputs: {sorted(extra)}")
    graph.leaves = {n: Tensor(inputs[n], name=n) for n in graph.names}
    try:
        out = _t(graph.fn(**graph.leaves))
    except ValueError as exc:  # numpy broadcasting failures
        raise DiffError(f"shape mismatch in forward: {exc}") from exc
    graph.output = out
    graph.nodes = topological_order(out)
    for leaf in graph.leaves.values():
        if all(leaf is not n for n in graph.nodes):
            graph.nodes.insert(0, leaf)
    return out.value


def backward(graph: Graph) -> dict[str, np.ndarray]:
    """Gradient of the (scalar) graph output with respect to each named input."""
    if graph.output is None:
        raise DiffError("backward called before forward")
    graph.output.backward()
    return {
        n: (leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value))
        for n, leaf in graph.leaves.items()
    }


def value_and_grad(fn: Callable[..., Tensor], params: Mapping[str, np.ndarray]):
    """Evaluate ``fn(**params)`` and return ``(value, grads)``."""
    g = Graph(fn, names=tuple(params))
    val = forward(g, params)
    return float(val), backward(g)


def grad_check(
    f: Callable, x, step: float = 1e-5, floor: float = 1e-8, kink_tol: float = 1e-2
) -> float:
    """Max relative error between the reverse-mode gradient and central differences.

    ``f`` maps a Tensor to a scalar Tensor. Returns ``inf`` when ``f`` is
    non-finite at a perturbed point, or when the one-sided slopes disagree by
    more than ``kink_tol`` (a kink, where the check is meaningless).
    """
    x = _as_array(x)
    leaf = Tensor(x.copy())
    out = _t(f(leaf))
    out.backward()
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(x)
    f0 = float(out.value)
    numeric = np.zeros(x.size)
    for i in range(x.size):
        xp = x.copy().reshape(-1)
        xm = x.copy().reshape(-1)
        xp[i] += step
        xm[i] -= step
        fp = float(_t(f(constant(xp.reshape(x.shape)))).value)
        fm = float(_t(f(constant(xm.reshape(x.shape)))).value)
        if not (np.isfinite(fp) and np.isfinite(fm) and np.isfinite(f0)):
            return float("inf")
        numeric[i] = (fp - fm) / (2 * step)
        one_sided_gap = abs((fp - f0) - (f0 - fm)) / step
        if one_sided_gap > kink_tol * (1.0 + abs(numeric[i])):
            return float("inf")
    analytic = analytic.reshape(-1)
    if not np.all(np.isfinite(analytic)):
        return float("inf")
    err = np.abs(analytic - numeric) / (np.abs(analytic) + floor)
    return float(err.max()) if err.size else 0.0


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def opt_step(
    params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: OptimState
) -> tuple[dict[str, np.ndarray], OptimState]:
    """One Adam update. Returns new parameter arrays; ``state`` is advanced in place."""
    for k, g in grads.items():
        if np.shape(g) != np.shape(params[k]):
            raise DiffError(f"gradient shape {np.shape(g)} != parameter shape {np.shape(params[k])} for {k!r}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {k!r}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    new = {}
    for k, p in params.items():
        g = np.asarray(grads.get(k, np.zeros_like(p)), dtype=np.float64)
        m = state.m.get(k)
        if m is None:
            m = np.zeros_like(g)
            state.v[k] = np.zeros_like(g)
        m = b1 * m + (1 - b1) * g
        v = b2 * state.v[k] + (1 - b2) * g * g
        state.m[k], state.v[k] = m, v
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        new[k] = p - state.lr * mhat / (np.sqrt(vhat) + state.eps)
    return new, state

"""Reverse-mode automatic differentiation over dense float64 arrays of rank <= 2.

Every differentiable operation returns a new :class:`Tensor` holding the
forward value, references to its inputs, and a closure mapping the output
gradient to one gradient per input. :func:`backward` walks the graph in
reverse topological order.

Gradients accumulate into ``.grad`` of leaf tensors only (tensors created by
the user with ``requires_grad=True``). Intermediate results do not retain
gradients. Calling :func:`backward` twice without :meth:`Tensor.zero_grad`
adds the second pass on top of the first.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np

from . import kernels
from .errors import ContractError, DimensionError, NumericError


class Tensor:
    __slots__ = ("values", "requires_grad", "grad", "op", "parents", "_backward", "name")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        arr = np.array(values, dtype=np.float64)
        if arr.ndim > 2:
            raise DimensionError(f"tensors are at most rank 2, got shape {arr.shape}")
        if 0 in arr.shape:
            raise DimensionError(f"empty tensor of shape {arr.shape}")
        self.values = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.op = "leaf"
        self.parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    @classmethod
    def _from_op(cls, values, op: str, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
        out = cls.__new__(cls)
        out.values = np.asarray(values, dtype=np.float64)
        out.requires_grad = any(p.requires_grad for p in parents)
        out.grad = None
        out.op = op
        out.parents = parents
        out._backward = backward_fn
        out.name = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.values.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.values

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.values)

    def __repr__(self) -> str:
        label = self.name or self.op
        return f"Tensor({label}, shape={self.shape}, requires_grad={self.requires_grad})"

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

    def __getitem__(self, index):
        return take(self, index)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return Tensor._from_op(
        a.values + b.values, "add", (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return Tensor._from_op(
        a.values - b.values, "sub", (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    av, bv = a.values, b.values
    return Tensor._from_op(
        av * bv, "mul", (a, b),
        lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    av, bv = a.values, b.values
    return Tensor._from_op(
        av / bv, "div", (a, b),
        lambda g: (_unbroadcast(g / bv, a.shape), _unbroadcast(-g * av / (bv * bv), b.shape)),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._from_op(-a.values, "neg", (a,), lambda g: (-g,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    # subgradient at exactly 0 is 0
    mask = a.values > 0
    return Tensor._from_op(np.where(mask, a.values, 0.0), "relu", (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.values
    ex = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + ex), ex / (1.0 + ex))
    return Tensor._from_op(s, "sigmoid", (a,), lambda g: (g * s * (1.0 - s),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.values)
    return Tensor._from_op(out, "exp", (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    x = a.values
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x)
    return Tensor._from_op(out, "log", (a,), lambda g: (g / x,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.values)

    def back(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            return (g / (2.0 * out),)

    return Tensor._from_op(out, "sqrt", (a,), back)


# ---------------------------------------------------------------- reductions / shape


def tsum(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return Tensor._from_op(a.values.sum(axis=axis), "sum", (a,), back)


def mean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else a.shape[axis]
    return tsum(a, axis) / float(count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.values.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view shape {old} as {tuple(shape)}") from None
    if out.ndim > 2:
        raise DimensionError(f"reshape: rank {out.ndim} exceeds 2")
    return Tensor._from_op(out, "reshape", (a,), lambda g: (g.reshape(old),))


def take(a, index) -> Tensor:
    """Differentiable indexing (basic or integer-array indexing)."""
    a = as_tensor(a)
    out = a.values[index]
    shape = a.shape

    def back(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._from_op(np.array(out, dtype=np.float64), "take", (a,), back)


def stack(tensors: Sequence[Tensor]) -> Tensor:
    """Stack equal-shape vectors (or scalars) into one tensor along a new first axis."""
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise DimensionError("stack: empty sequence")
    shapes = {t.shape for t in ts}
    if len(shapes) != 1:
        raise DimensionError(f"stack: mismatched shapes {sorted(shapes)}")
    out = np.stack([t.values for t in ts])
    return Tensor._from_op(out, "stack", tuple(ts), lambda g: tuple(g[i] for i in range(len(ts))))


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not chain")
    av, bv = a.values, b.values
    return Tensor._from_op(av @ bv, "matmul", (a, b), lambda g: (g @ bv.T, av.T @ g))


def softmax(v, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis`` (rows of a matrix, or a whole vector)."""
    v = as_tensor(v)
    x = v.values
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    s = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(s, "softmax", (v,), back)


def logsumexp(v, axis: int = -1) -> Tensor:
    """``log(sum(exp(v)))`` along ``axis``, with max subtraction. A vector reduces to a scalar."""
    v = as_tensor(v)
    x = v.values
    top = x.max(axis=axis, keepdims=True)
    e = np.exp(x - top)
    s = e.sum(axis=axis, keepdims=True)
    out = np.squeeze(top + np.log(s), axis=axis)
    soft = e / s

    def back(g):
        return (np.expand_dims(g, axis) * soft,)

    return Tensor._from_op(out, "logsumexp", (v,), back)


def squared_euclidean(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape or a.values.ndim != 1:
        raise DimensionError(f"squared_euclidean: needs equal-length vectors, got {a.shape} and {b.shape}")
    diff = a.values - b.values
    return Tensor._from_op(
        np.dot(diff, diff), "squared_euclidean", (a, b),
        lambda g: (2.0 * g * diff, -2.0 * g * diff),
    )


# ---------------------------------------------------------------- fused episode-head ops


def pairwise_sqdist(a, b) -> Tensor:
    """(m, e) x (n, e) -> (m, n) matrix of squared Euclidean distances."""
    a, b = as_tensor(a), as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"pairwise_sqdist: shapes {a.shape} and {b.shape} disagree")
    av = np.ascontiguousarray(a.values)
    bv = np.ascontiguousarray(b.values)
    return Tensor._from_op(
        kernels.pairwise_sqdist(av, bv), "pairwise_sqdist", (a, b),
        lambda g: kernels.pairwise_sqdist_backward(av, bv, np.ascontiguousarray(g)),
    )


def proto_cross_entropy(d, targets) -> Tensor:
    """Mean over rows of ``d[i, y_i] + logsumexp_j(-d[i, j])`` for a distance matrix ``d``."""
    d = as_tensor(d)
    y = np.ascontiguousarray(targets, dtype=np.int64)
    if d.values.ndim != 2 or y.shape != (d.shape[0],):
        raise DimensionError(f"proto_cross_entropy: distances {d.shape} vs targets {y.shape}")
    if y.min() < 0 or y.max() >= d.shape[1]:
        raise ContractError(f"proto_cross_entropy: target outside 0..{d.shape[1] - 1}")
    loss, grad = kernels.proto_xent(np.ascontiguousarray(d.values), y)
    return Tensor._from_op(np.array(loss), "proto_cross_entropy", (d,), lambda g: (g * grad,))


def segment_weighted_mean(z, w, labels, n: int, normalize: bool = False) -> Tensor:
    """Per-class ``sum(w_i z_i)`` over rows with label c, divided by the class count.

    With ``normalize=True`` the divisor is the class weight sum instead.
    """
    z, w = as_tensor(z), as_tensor(w)
    lab = np.ascontiguousarray(labels, dtype=np.int64)
    if z.values.ndim != 2 or w.shape != (z.shape[0],) or lab.shape != (z.shape[0],):
        raise DimensionError(
            f"segment_weighted_mean: rows {z.shape}, weights {w.shape}, labels {lab.shape}"
        )
    counts = np.bincount(lab, minlength=n)
    if len(counts) > n:
        raise ContractError(f"segment_weighted_mean: label {lab.max()} outside 0..{n - 1}")
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        raise ContractError(f"class {int(empty[0])} has no support samples")
    zv = np.ascontiguousarray(z.values)
    wv = np.ascontiguousarray(w.values)
    out = kernels.segment_weighted_mean(zv, wv, lab, n, normalize)
    return Tensor._from_op(
        out, "segment_weighted_mean", (z, w),
        lambda g: kernels.segment_weighted_mean_backward(
            zv, wv, lab, n, np.ascontiguousarray(g), normalize
        ),
    )


# ---------------------------------------------------------------- graph + backward


@dataclass
class Graph:
    """Topologically ordered nodes reachable from a scalar root."""

    nodes: list[Tensor]
    root: Tensor

    @classmethod
    def build(cls, root: Tensor) -> Graph:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack_: list[tuple[Tensor, bool]] = [(root, False)]
        while stack_:
            node, expanded = stack_.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack_.append((node, True))
            for parent in node.parents:
                if id(parent) not in seen:
                    stack_.append((parent, False))
        return cls(order, root)


def backward(root: Tensor | Graph) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every leaf with ``requires_grad``."""
    graph = root if isinstance(root, Graph) else Graph.build(root)
    top = graph.root
    if top.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {top.shape}")
    if not np.all(np.isfinite(top.values)):
        # name the earliest node whose output is non-finite, not just the root
        culprit = next(n for n in graph.nodes if not np.all(np.isfinite(n.values)))
        raise NumericError(f"non-finite value produced by op '{culprit.op or 'leaf'}'")
    grads: dict[int, np.ndarray] = {id(top): np.ones_like(top.values)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None or not node.requires_grad:
            continue
        if node.is_leaf:
            node.grad = node.grad + g if node.grad is not None else g.copy()
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node.parents, parent_grads):
            if not parent.requires_grad:
                continue
            if not np.all(np.isfinite(pg)):
                raise NumericError(f"non-finite gradient flowing out of op '{node.op}'")
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    step_count: int = 0
    first_moment: list[np.ndarray] = field(default_factory=list)
    second_moment: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[Tensor]) -> AdamState:
        return cls(
            0,
            [np.zeros_like(p.values) for p in params],
            [np.zeros_like(p.values) for p in params],
        )


def adam_step(
    params: Sequence[Tensor],
    state: AdamState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """One bias-corrected Adam update, in place on ``params`` and ``state``.

    A parameter whose gradient is entirely zero is skipped: neither its value
    nor its moments change. Gradients are left for the caller to zero.
    """
    if len(state.first_moment) != len(params) or len(state.second_moment) != len(params):
        raise ContractError(
            f"Adam state tracks {len(state.first_moment)} tensors, got {len(params)} parameters"
        )
    for p, m, v in zip(params, state.first_moment, state.second_moment):
        if m.shape != p.shape or v.shape != p.shape:
            raise ContractError(f"Adam moment shape {m.shape} does not match parameter {p.shape}")
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for p, m, v in zip(params, state.first_moment, state.second_moment):
        g = p.grad
        if g is None or not np.any(g):
            continue
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.values -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


class Adam:
    def __init__(self, params: Sequence[Tensor], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = AdamState.for_params(self.params)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        adam_step(self.params, self.state, self.lr, self.beta1, self.beta2, self.eps)


# ---------------------------------------------------------------- gradient checking


class GradCheck(NamedTuple):
    max_rel_error: float
    nan_count: int


def finite_diff_check(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-4) -> GradCheck:
    """Compare analytic gradients of ``loss_fn()`` against central differences.

    ``loss_fn`` must rebuild its graph from the current parameter values on
    every call. The relative error per coordinate is
    ``|g_ad - g_fd| / max(1e-8, |g_fd|)``.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    for p in params:
        p.zero_grad()
    backward(loss_fn())
    analytic = [p.grad.copy() for p in params]
    worst = 0.0
    nans = 0
    for p, ga in zip(params, analytic):
        flat = p.values.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = loss_fn().item()
            flat[i] = orig - eps
            down = loss_fn().item()
            flat[i] = orig
            fd = (up - down) / (2.0 * eps)
            err = abs(gflat[i] - fd) / max(1e-8, abs(fd))
            if np.isnan(err):
                nans += 1
                continue
            worst = max(worst, err)
    for p in params:
        p.zero_grad()
    return GradCheck(worst if nans == 0 else float("nan"), nans)

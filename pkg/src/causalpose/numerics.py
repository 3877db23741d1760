"""Small reverse-mode autodiff engine over float64 numpy arrays.

Graphs are built by running ordinary Python code on :class:`Tensor` values
(define-by-run). Every op records its parents and a vector-Jacobian closure;
:func:`backward` walks the recorded graph in reverse topological order.

The op set is deliberately closed: add, sub, mul, scale, matmul, sum, mean,
concat, gather (``take`` / ``take_along``), reshape, softmax, sigmoid, relu,
kl_div and stop_gradient. Everything the model needs is composed from these.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Mapping

import numpy as np

KL_EPS = 1e-12

_ids = itertools.count()


class ShapeError(ValueError):
    """Raised when an op receives operands with incompatible shapes."""

    def __init__(self, op: str, shapes, detail: str = ""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        msg = f"{op}: incompatible shapes {self.shapes}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "parents", "_vjp", "id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self.parents: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None
        self.id = next(_ids)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self):
        label = self.name or self.op
        return f"Tensor<{label}>(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(op: str, data: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.parents = parents
    out.requires_grad = any(p.requires_grad for p in parents)
    out._vjp = vjp
    out.id = next(_ids)
    out.name = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _broadcast_shape(op, a: Tensor, b: Tensor):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, (a.shape, b.shape)) from None


# ---------------------------------------------------------------- arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node("add", a.data + b.data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node("sub", a.data - b.data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node("mul", a.data * b.data, (a, b), vjp)


def scale(a, c: float) -> Tensor:
    """Multiply by a constant scalar."""
    a = as_tensor(a)
    c = float(c)
    return _node("scale", a.data * c, (a,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    """Batched matrix product; both operands must be at least 2-D."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", (a.shape, b.shape))
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError("matmul", (a.shape, b.shape), "batch dims") from None

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node("matmul", out, (a, b), vjp)


# ---------------------------------------------------------------- reductions


def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        return (np.array(_expand_reduced(g, a.shape, axis, keepdims)),)

    return _node("sum", np.asarray(out, dtype=np.float64), (a,), vjp)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = np.mean(a.data, axis=axis, keepdims=keepdims)
    count = a.data.size // max(np.asarray(out).size, 1)

    def vjp(g):
        return (np.array(_expand_reduced(g, a.shape, axis, keepdims)) / count,)

    return _node("mean", np.asarray(out, dtype=np.float64), (a,), vjp)


# ---------------------------------------------------------------- shape ops


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", (a.shape, tuple(shape))) from None
    return _node("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Iterable, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat", [t.shape for t in ts]) from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node("concat", out, ts, vjp)


def take(a, index, axis: int = 0) -> Tensor:
    """Gather slices of ``a`` along ``axis`` by an integer index array."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.intp)
    axis = axis % a.ndim
    if index.size and (index.min() < -a.shape[axis] or index.max() >= a.shape[axis]):
        raise ShapeError("take", (a.shape, index.shape), f"index out of range on axis {axis}")
    out = np.take(a.data, index, axis=axis)

    def vjp(g):
        ga = np.zeros_like(a.data)
        moved = np.moveaxis(ga, axis, 0)
        gm = np.moveaxis(g, tuple(range(axis, axis + index.ndim)), tuple(range(index.ndim)))
        np.add.at(moved, index, gm)
        return (ga,)

    return _node("take", out, (a,), vjp)


def take_along(a, index, axis: int) -> Tensor:
    """``np.take_along_axis`` with scatter-add backward."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.intp)
    try:
        out = np.take_along_axis(a.data, index, axis=axis)
    except (ValueError, IndexError):
        raise ShapeError("take_along", (a.shape, index.shape)) from None

    def vjp(g):
        ga = np.zeros_like(a.data)
        # np.add.at so repeated indices accumulate
        idx = list(np.indices(index.shape, sparse=True))
        idx[axis % a.ndim] = index
        np.add.at(ga, tuple(idx), g)
        return (ga,)

    return _node("take_along", out, (a,), vjp)


def max_along(a, axis: int) -> Tensor:
    """Max reduction composed from argmax + gather; ties go to the first index."""
    a = as_tensor(a)
    idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)
    picked = take_along(a, idx, axis)
    shape = list(picked.shape)
    del shape[axis % a.ndim]
    return reshape(picked, tuple(shape))


# ---------------------------------------------------------------- nonlinearities


def relu(a) -> Tensor:
    a = as_tensor(a)
    on = a.data > 0
    return _node("relu", np.where(on, a.data, 0.0), (a,), lambda g: (g * on,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _node("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / np.sum(e, axis=axis, keepdims=True)

    def vjp(g):
        return (p * (g - np.sum(g * p, axis=axis, keepdims=True)),)

    return _node("softmax", p, (a,), vjp)


def kl_div(q, p, axis: int = -1, eps: float = KL_EPS) -> Tensor:
    """KL(q || p) reduced over ``axis``.

    Uses 0 * log(0 / p) = 0 and clamps p from below at ``eps`` before the log.
    Entries with q == p contribute exactly 0, so KL(q || q) == 0 even below eps.
    """
    q, p = as_tensor(q), as_tensor(p)
    if q.shape != p.shape:
        raise ShapeError("kl_div", (q.shape, p.shape))
    qd, pd = q.data, p.data
    pc = np.maximum(pd, eps)
    pos = qd > 0
    safe_q = np.where(pos, qd, 1.0)
    terms = np.where(pos & (qd != pd), qd * (np.log(safe_q) - np.log(pc)), 0.0)
    out = np.sum(terms, axis=axis)

    def vjp(g):
        g = np.expand_dims(g, axis)
        gq = np.where(pos, np.log(safe_q) - np.log(pc) + 1.0, 0.0) * g
        gp = np.where(pd > eps, -qd / pc, 0.0) * g
        return gq, gp

    return _node("kl_div", np.asarray(out, dtype=np.float64), (q, p), vjp)


def stop_gradient(a) -> Tensor:
    """Identity in the forward pass; contributes no gradient upstream."""
    a = as_tensor(a)
    out = _node("stop_gradient", a.data.copy(), (a,), None)
    out.requires_grad = False
    return out


# ---------------------------------------------------------------- graph walk


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root``; every parent precedes its consumers."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for p in node.parents:
            if p.id not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> list[Tensor]:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf.

    Returns the leaves that received a gradient. Existing ``.grad`` values on
    leaves are added to, matching the usual accumulate-then-zero convention.
    """
    if loss.data.size != 1:
        raise ShapeError("backward", (loss.shape,), "loss must be scalar")
    order = topological_order(loss)
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    leaves = []
    for node in reversed(order):
        g = grads.pop(node.id, None)
        if g is None or not node.requires_grad:
            continue
        if node._vjp is None:
            if node.op == "leaf":
                node.grad = g.copy() if node.grad is None else node.grad + g
                leaves.append(node)
            continue
        for parent, pg in zip(node.parents, node._vjp(g)):
            if not parent.requires_grad:
                continue
            if parent.id in grads:
                grads[parent.id] = grads[parent.id] + pg
            else:
                grads[parent.id] = np.asarray(pg, dtype=np.float64)
    return leaves


def grad(loss_fn: Callable[[Mapping[str, Tensor]], Tensor],
         params: Mapping[str, np.ndarray]) -> tuple[float, dict[str, np.ndarray]]:
    """Evaluate ``loss_fn`` on fresh leaves and return (loss, gradients)."""
    leaves = {k: Tensor(v, requires_grad=True, name=k) for k, v in params.items()}
    loss = loss_fn(leaves)
    backward(loss)
    return loss.item(), {
        k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in leaves.items()
    }


def grad_check(loss_fn: Callable[[Mapping[str, Tensor]], Tensor],
               params: Mapping[str, np.ndarray], step: float = 1e-5,
               max_entries: int | None = None, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    The error for one parameter tensor is ``|a - n| / max(|a|, |n|, 1e-8)``
    with ``|.|`` the Euclidean norm over that tensor; the maximum over all
    parameter tensors is returned. ``max_entries`` checks a seeded random
    subset of each tensor's entries instead of all of them.
    """
    if not 0 < step <= 1e-2:
        raise ValueError(f"step must lie in (0, 1e-2], got {step}")
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    value, analytic = grad(loss_fn, params)
    if not np.isfinite(value):
        raise NonFiniteError("loss is not finite at the check point")

    def evaluate(vals):
        out = loss_fn({k: Tensor(v) for k, v in vals.items()}).item()
        if not np.isfinite(out):
            raise NonFiniteError("loss became non-finite under perturbation")
        return out

    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, value in params.items():
        flat = value.reshape(-1)
        entries = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            entries = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        numeric = np.zeros(entries.size)
        for j, i in enumerate(entries):
            orig = flat[i]
            flat[i] = orig + step
            hi = evaluate(params)
            flat[i] = orig - step
            lo = evaluate(params)
            flat[i] = orig
            numeric[j] = (hi - lo) / (2 * step)
        a = analytic[name].reshape(-1)[entries]
        if not np.all(np.isfinite(a)):
            raise NonFiniteError(f"non-finite analytic gradient for {name}")
        denom = max(np.linalg.norm(a), np.linalg.norm(numeric), 1e-8)
        worst = max(worst, float(np.linalg.norm(a - numeric) / denom))
    return worst

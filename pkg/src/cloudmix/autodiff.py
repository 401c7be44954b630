"""Reverse-mode automatic differentiation over float64 numpy arrays.

Ground rules:
 - elementwise primitives require operands of identical shape; the only
   implicit shape change anywhere is the explicit broadcast_to op
 - ops validate shapes up front and errors name both shapes
 - randomness (dropout) comes from an explicit Generator
 - a built graph supports exactly one backward pass
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

Array = np.ndarray


class NumericError(ArithmeticError):
    """A forward op produced NaN/Inf while debug checks were enabled."""


_debug_checks = False


def set_debug_checks(enabled: bool) -> None:
    global _debug_checks
    _debug_checks = bool(enabled)


def debug_checks_enabled() -> bool:
    return _debug_checks


class Tensor:
    """Node in a dynamically built computation graph.

    Wraps a float64 array (at most 4 dimensions). Ops record parent nodes
    and vector-Jacobian closures on their outputs; ``backward`` walks the
    resulting graph once, accumulating gradients into ``.grad``.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_vjps", "_spent")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 4:
            raise ValueError(f"tensors support at most 4 dims, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._vjps: tuple[Callable[[Array], Array], ...] = ()
        self._spent = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, self.shape), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other, self.shape), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, shape: tuple[int, ...] | None = None) -> Tensor:
    """Wrap x as a constant Tensor; scalars expand to `shape` when given."""
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=np.float64)
    if shape is not None and arr.shape != tuple(shape):
        arr = np.broadcast_to(arr, shape).copy()
    return Tensor(arr)


def _node(data: Array, op: str, parents: Sequence[Tensor], vjps: Sequence[Callable]) -> Tensor:
    arr = np.asarray(data, dtype=np.float64)
    if _debug_checks and not np.all(np.isfinite(arr)):
        raise NumericError(f"{op} produced a non-finite value")
    need = any(p.requires_grad for p in parents)
    out = Tensor(arr, requires_grad=need)
    out.op = op
    if need:
        out._parents = tuple(parents)
        out._vjps = tuple(vjps)
    return out


def _pair(a, b, op: str) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor):
        a = as_tensor(a, shape=b.shape if isinstance(b, Tensor) else None)
    if not isinstance(b, Tensor):
        b = as_tensor(b, shape=a.shape)
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
    return a, b


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _pair(a, b, "add")
    return _node(a.data + b.data, "add", (a, b), (lambda g: g, lambda g: g))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b, "sub")
    return _node(a.data - b.data, "sub", (a, b), (lambda g: g, lambda g: -g))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b, "mul")
    ad, bd = a.data, b.data
    return _node(ad * bd, "mul", (a, b), (lambda g: g * bd, lambda g: g * ad))


def div(a, b) -> Tensor:
    a, b = _pair(a, b, "div")
    ad, bd = a.data, b.data
    return _node(ad / bd, "div", (a, b), (lambda g: g / bd, lambda g: -g * ad / (bd * bd)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, "neg", (a,), (lambda g: -g,))


def abs_(a) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.data)
    return _node(np.abs(a.data), "abs", (a,), (lambda g: g * sign,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, "exp", (a,), (lambda g: g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _node(np.log(ad), "log", (a,), (lambda g: g / ad,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    root = np.sqrt(a.data)
    # gradient denominator floored so an exact zero stays finite
    safe = np.maximum(root, 1e-12)
    return _node(root, "sqrt", (a,), (lambda g: g * 0.5 / safe,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), "relu", (a,), (lambda g: g * mask,))


def _stable_sigmoid(x: Array) -> Array:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _stable_sigmoid(a.data)
    return _node(s, "sigmoid", (a,), (lambda g: g * s * (1.0 - s),))


# ---------------------------------------------------------- shape / indexing


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _node(ad @ bd, "matmul", (a, b), (lambda g: g @ bd.T, lambda g: ad.T @ g))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ValueError(f"transpose: need 2 dims, got shape {a.shape}")
    return _node(a.data.T, "transpose", (a,), (lambda g: g.T,))


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    if int(np.prod(shape, dtype=np.int64)) != a.data.size:
        raise ValueError(f"reshape: cannot view {a.shape} as {shape}")
    src = a.shape
    return _node(a.data.reshape(shape), "reshape", (a,), (lambda g: g.reshape(src),))


def broadcast_to(a, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        data = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ValueError(f"broadcast_to: cannot expand {a.shape} to {shape}") from None
    src = a.shape

    def vjp(g: Array) -> Array:
        extra = g.ndim - len(src)
        if extra > 0:
            g = g.sum(axis=tuple(range(extra)))
        axes = tuple(i for i, s in enumerate(src) if s == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return g

    return _node(np.array(data), "broadcast_to", (a,), (vjp,))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError("concat: need at least one tensor")
    try:
        data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ValueError(
            f"concat: incompatible shapes {[t.shape for t in ts]} along axis {axis}"
        ) from None
    stops = np.cumsum([t.data.shape[axis] for t in ts])
    starts = np.concatenate([[0], stops[:-1]])

    def make_vjp(i: int):
        sl = [slice(None)] * data.ndim
        sl[axis] = slice(int(starts[i]), int(stops[i]))
        sl = tuple(sl)
        return lambda g: g[sl]

    return _node(data, "concat", ts, [make_vjp(i) for i in range(len(ts))])


def gather_rows(a, indices) -> Tensor:
    """Index rows of a by an integer array; output shape indices.shape + a.shape[1:]."""
    a = as_tensor(a)
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise TypeError(f"gather_rows: indices must be integers, got {idx.dtype}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ValueError(f"gather_rows: index out of range for {a.shape[0]} rows")
    src = a.data

    def vjp(g: Array) -> Array:
        out = np.zeros_like(src)
        np.add.at(out, idx, g)
        return out

    return _node(src[idx], "gather_rows", (a,), (vjp,))


# ------------------------------------------------------------------ reductions


def _check_axis(a: Tensor, axis: int, op: str) -> int:
    if not -a.ndim <= axis < a.ndim:
        raise ValueError(f"{op}: axis {axis} out of range for shape {a.shape}")
    return axis % a.ndim


def reduce_sum(a, axis: int) -> Tensor:
    a = as_tensor(a)
    axis = _check_axis(a, axis, "reduce_sum")
    shape = a.shape
    return _node(
        a.data.sum(axis=axis),
        "reduce_sum",
        (a,),
        (lambda g: np.broadcast_to(np.expand_dims(g, axis), shape).copy(),),
    )


def reduce_mean(a, axis: int) -> Tensor:
    a = as_tensor(a)
    axis = _check_axis(a, axis, "reduce_mean")
    shape = a.shape
    n = shape[axis]
    return _node(
        a.data.mean(axis=axis),
        "reduce_mean",
        (a,),
        (lambda g: np.broadcast_to(np.expand_dims(g, axis) / n, shape).copy(),),
    )


def _extreme(a, axis: int, op: str, fn) -> Tensor:
    a = as_tensor(a)
    axis = _check_axis(a, axis, op)
    data = fn(a.data, axis=axis)
    eq = a.data == np.expand_dims(data, axis)
    # ties route gradient to the first extremal entry only
    first = eq & (np.cumsum(eq, axis=axis) == 1)
    return _node(data, op, (a,), (lambda g: np.expand_dims(g, axis) * first,))


def reduce_max(a, axis: int) -> Tensor:
    return _extreme(a, axis, "reduce_max", np.max)


def reduce_min(a, axis: int) -> Tensor:
    return _extreme(a, axis, "reduce_min", np.min)


# ---------------------------------------------------------------- stochastic


def dropout(a, p: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Zero entries with probability p and scale survivors by 1/(1-p).

    Identity outside training. The mask comes from `rng`, so callers in
    deterministic mode must pass a seeded stream.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout: p must be in [0, 1), got {p}")
    a = as_tensor(a)
    if not training or p == 0.0:
        return a
    keep = rng.random(a.shape) >= p
    scale = 1.0 / (1.0 - p)
    factor = keep * scale
    return _node(a.data * factor, "dropout", (a,), (lambda g: g * factor,))


# ----------------------------------------------------------------- composites


def pointwise_linear(x, w, b) -> Tensor:
    """Shared linear map over rows: x (N, Cin) @ w (Cin, Cout) + b (Cout,)."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    y = matmul(x, w)
    return add(y, broadcast_to(reshape(b, (1, b.data.size)), y.shape))


# ------------------------------------------------------------------- backward


class Tape:
    """Topological ordering of every node reachable from a root tensor."""

    def __init__(self, root: Tensor):
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, ready = stack.pop()
            if ready:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.order = order  # parents precede children

    def run(self, root: Tensor, seed: Array) -> None:
        for node in self.order:
            if node._parents and node._spent:
                raise RuntimeError("backward already ran through this graph; rerun the forward pass")
        grads: dict[int, Array] = {id(root): seed}
        for node in reversed(self.order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            for parent, vjp in zip(node._parents, node._vjps):
                if not parent.requires_grad:
                    continue
                pg = vjp(g)
                pid = id(parent)
                grads[pid] = pg if pid not in grads else grads[pid] + pg
            if node._parents:
                node._spent = True


def backward(loss: Tensor, seed=None) -> None:
    """Reverse-mode pass from a scalar loss; fills .grad on requires_grad nodes.

    Gradients accumulate when a node feeds multiple paths. The walked graph
    is spent afterwards; a second backward raises RuntimeError.
    """
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any requires_grad tensor")
    if seed is None:
        if loss.data.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.data.shape}")
        seed = np.ones_like(loss.data)
    else:
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != loss.data.shape:
            raise ValueError(f"seed shape {seed.shape} vs loss shape {loss.data.shape}")
    Tape(loss).run(loss, seed)


def grad_check(fn, arrays: Sequence[Array], eps: float = 1e-5, sample: int | None = None,
               rng: np.random.Generator | None = None) -> float:
    """Max relative error of backward grads vs central finite differences.

    fn maps a list of Tensors to a scalar Tensor and must be deterministic
    across calls (fix any rng it uses per call). Relative error uses
    denominator max(|analytic|, |numeric|, 1e-8). `sample` caps the number
    of probed coordinates per array; None probes all of them.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(leaves)
    if out.data.size != 1:
        raise ValueError(f"fn must return a scalar, got shape {out.data.shape}")
    backward(out)

    def value_at(ai: int, idx, delta: float) -> float:
        probe = [a.copy() for a in arrays]
        probe[ai][idx] += delta
        res = fn([Tensor(p) for p in probe])
        return float(res.data)

    worst = 0.0
    for ai, (leaf, base) in enumerate(zip(leaves, arrays)):
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(base)
        coords = list(np.ndindex(*base.shape))
        if sample is not None and len(coords) > sample:
            picker = rng if rng is not None else np.random.default_rng(0)
            chosen = picker.choice(len(coords), size=sample, replace=False)
            coords = [coords[int(i)] for i in chosen]
        for idx in coords:
            numeric = (value_at(ai, idx, eps) - value_at(ai, idx, -eps)) / (2.0 * eps)
            ana = float(analytic[idx])
            if not (np.isfinite(numeric) and np.isfinite(ana)):
                raise NumericError(f"non-finite gradient at array {ai} index {idx}")
            err = abs(ana - numeric) / max(abs(ana), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst

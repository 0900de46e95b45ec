"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op creates a node stamped with a monotonically increasing id; the ids
form the tape. ``backward`` collects the nodes reachable from the loss and
replays their backward rules in descending id order, which is a valid
reverse topological order and makes gradient accumulation deterministic.
"""

from __future__ import annotations

import itertools
import math
from collections import OrderedDict
from typing import Callable, Iterator, Sequence

import numpy as np

_ids = itertools.count()
_DEBUG = False


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""

    def __init__(self, op: str, *shapes: tuple):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes " + " and ".join(str(tuple(s)) for s in shapes))


class DegenerateRowError(ValueError):
    """Raised when a softmax row has no finite entry."""


class RankError(ValueError):
    pass


def set_debug(flag: bool) -> None:
    """Toggle NaN checking on every forward op."""
    global _DEBUG
    _DEBUG = bool(flag)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "_prev", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id = next(_ids)
        self._prev: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    @property
    def T(self):
        return transpose(self, None)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.node_id = next(_ids)
    out.name = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._prev = tuple(parents)
        out._backward = backward
    else:
        out._prev = ()
        out._backward = None
    if _DEBUG and np.isnan(data).any():
        finite_in = all(np.isfinite(p.data).all() for p in parents)
        if finite_in:
            raise FloatingPointError(f"NaN produced from finite inputs (node {out.node_id})")
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# -- elementwise arithmetic ------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast("add", a, b)

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast("sub", a, b)

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast("mul", a, b)

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast("div", a, b)
    out = a.data / b.data

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    def bw(g):
        a._accum(g * c)

    return _make(a.data * c, (a,), bw)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bw(g):
        a._accum(g * out)

    return _make(out, (a,), bw)


def log(a: Tensor) -> Tensor:
    def bw(g):
        a._accum(g / a.data)

    return _make(np.log(a.data), (a,), bw)


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def bw(g):
        a._accum(g * 0.5 / out)

    return _make(out, (a,), bw)


def square(a: Tensor) -> Tensor:
    def bw(g):
        a._accum(2.0 * g * a.data)

    return _make(a.data * a.data, (a,), bw)


def abs_(a: Tensor) -> Tensor:
    def bw(g):
        a._accum(g * np.sign(a.data))

    return _make(np.abs(a.data), (a,), bw)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bw(g):
        a._accum(g * mask)

    return _make(np.where(mask, a.data, 0.0), (a,), bw)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh approximation of GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        a._accum(g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner))

    return _make(out, (a,), bw)


# -- linear algebra and shape manipulation ---------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product; leading dimensions broadcast like ``np.matmul``."""
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                # fold the batch dims instead of materialising per-batch products
                b._accum(a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1]))
            else:
                b._accum(_unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _make(out, (a, b), bw)


def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None

    def bw(g):
        a._accum(g.reshape(a.shape))

    return _make(out, (a,), bw)


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))

    def bw(g):
        a._accum(np.transpose(g, inv))

    return _make(np.transpose(a.data, axes), (a,), bw)


def index(a: Tensor, idx) -> Tensor:
    """Basic or advanced indexing; gradients scatter-add back."""

    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(p, (int, np.integer, slice)) or p is None or p is Ellipsis for p in parts)

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        a._accum(full)

    return _make(a.data[idx], (a,), bw)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accum(np.broadcast_to(g, a.shape))

    return _make(np.asarray(out, dtype=np.float64), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return scale(sum_(a, axis, keepdims), 1.0 / float(n))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(t.shape for t in tensors)) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        for t, piece in zip(tensors, np.split(g, bounds, axis=axis)):
            if t.requires_grad:
                t._accum(piece)

    return _make(out, tensors, bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError("stack", *(t.shape for t in tensors))

    def bw(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t._accum(np.take(g, i, axis=axis))

    return _make(np.stack([t.data for t in tensors], axis=axis), tensors, bw)


def gather_rows(a: Tensor, rows) -> Tensor:
    """Select rows ``a[rows]`` of a 2-D tensor."""
    rows = np.asarray(rows, dtype=np.intp)
    if rows.size and (rows.min() < 0 or rows.max() >= a.shape[0]):
        raise IndexError(f"gather_rows: row index out of range for {a.shape[0]} rows")

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, rows, g)
        a._accum(full)

    return _make(a.data[rows], (a,), bw)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.intp)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding_lookup: id out of range for vocabulary of {table.shape[0]}")

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        table._accum(full)

    return _make(table.data[ids], (table,), bw)


def scatter_rows(src: Tensor, rows, n_rows: int) -> Tensor:
    """Place the rows of ``src`` at ``rows`` of an ``n_rows``-row zero matrix (adding duplicates)."""
    rows = np.asarray(rows, dtype=np.intp)
    out = np.zeros((n_rows,) + src.shape[1:])
    np.add.at(out, rows, src.data)

    def bw(g):
        src._accum(g[rows])

    return _make(out, (src,), bw)


def masked_fill(a: Tensor, mask, value: float = -np.inf) -> Tensor:
    """Write ``value`` where ``mask`` is true; no gradient flows through those entries."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    keep = ~mask

    def bw(g):
        a._accum(g * keep)

    return _make(np.where(mask, value, a.data), (a,), bw)


def detach(a: Tensor) -> Tensor:
    return Tensor(a.data)


def scale_grad(a: Tensor, c: float) -> Tensor:
    """Identity forward; multiplies the incoming gradient by ``c``."""

    def bw(g):
        a._accum(g * c)

    return _make(a.data, (a,), bw)


def straight_through(value: Tensor, proxy: Tensor) -> Tensor:
    """Forward returns ``value``; backward sends the same gradient to ``value`` and ``proxy``."""
    if value.shape != proxy.shape:
        raise ShapeError("straight_through", value.shape, proxy.shape)

    def bw(g):
        if value.requires_grad:
            value._accum(g)
        if proxy.requires_grad:
            proxy._accum(g)

    return _make(value.data.copy(), (value, proxy), bw)


# -- reductions with special structure -------------------------------------

def softmax_rows(x: Tensor) -> Tensor:
    """Softmax along the last axis; ``-inf`` entries map to exactly 0."""
    m = x.data.max(axis=-1, keepdims=True)
    if not np.isfinite(m).all():
        raise DegenerateRowError("softmax row without any finite entry")
    e = np.exp(x.data - m)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        x._accum(out * (g - (g * out).sum(axis=-1, keepdims=True)))

    return _make(out, (x,), bw)


def log_softmax_rows(x: Tensor) -> Tensor:
    m = x.data.max(axis=-1, keepdims=True)
    if not np.isfinite(m).all():
        raise DegenerateRowError("log-softmax row without any finite entry")
    shifted = x.data - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def bw(g):
        x._accum(g - p * g.sum(axis=-1, keepdims=True))

    return _make(out, (x,), bw)


def logsumexp_rows(x: Tensor) -> Tensor:
    """log(sum(exp(x))) over the last axis; ``-inf`` entries contribute nothing."""
    m = x.data.max(axis=-1, keepdims=True)
    if not np.isfinite(m).all():
        raise DegenerateRowError("logsumexp row without any finite entry")
    e = np.exp(x.data - m)
    s = e.sum(axis=-1, keepdims=True)
    out = (m + np.log(s))[..., 0]

    def bw(g):
        x._accum((e / s) * g[..., None])

    return _make(out, (x,), bw)


def l2_norm_rows(x: Tensor) -> Tensor:
    """Euclidean norm over the last axis; subgradient 0 at the zero vector."""
    n = np.sqrt((x.data * x.data).sum(axis=-1))

    def bw(g):
        safe = np.where(n > 0, n, 1.0)
        x._accum(np.where((n > 0)[..., None], x.data / safe[..., None], 0.0) * g[..., None])

    return _make(n, (x,), bw)


def normalize_rows(x: Tensor, eps: float = 0.0) -> Tensor:
    n = l2_norm_rows(x)
    denom = n.reshape(n.shape + (1,))
    if eps:
        denom = add(denom, eps)
    return div(x, denom)


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    d = x.shape[-1]

    def bw(g):
        x._accum(inv * (g - g.mean(axis=-1, keepdims=True) - xhat * (g * xhat).mean(axis=-1, keepdims=True)))

    out = _make(xhat, (x,), bw)
    if gamma is not None:
        if gamma.shape != (d,):
            raise ShapeError("layer_norm", x.shape, gamma.shape)
        out = mul(out, gamma)
    if beta is not None:
        out = add(out, beta)
    return out


def cross_entropy_nll(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under row-softmax of ``logits``."""
    targets = np.asarray(targets, dtype=np.intp).reshape(-1)
    flat = logits.data.reshape(-1, logits.shape[-1])
    m, v = flat.shape
    if targets.shape[0] != m:
        raise ShapeError("cross_entropy_nll", logits.shape, targets.shape)
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise IndexError(f"cross_entropy_nll: target out of range [0, {v})")
    mx = flat.max(axis=1, keepdims=True)
    shifted = flat - mx
    lse = np.log(np.exp(shifted).sum(axis=1))
    nll = float((lse - shifted[np.arange(m), targets]).mean())

    def bw(g):
        p = np.exp(shifted - lse[:, None])
        p[np.arange(m), targets] -= 1.0
        logits._accum((float(g) / m * p).reshape(logits.shape))

    return _make(np.array(nll), (logits,), bw)


def mse(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.shape != b.shape:
        raise ShapeError("mse", a.shape, b.shape)
    return mean(square(sub(a, b)))


# -- backward pass ----------------------------------------------------------

def backward(loss: Tensor, retain_graph: bool = False) -> None:
    """Populate ``.grad`` on every requires-grad tensor reachable from ``loss``.

    Leaf gradients accumulate; interior nodes drop theirs after use. Unless
    ``retain_graph`` is set, the graph is released as it is consumed.
    """
    if loss.data.size != 1 or loss.ndim > 1:
        raise RankError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    nodes: dict[int, Tensor] = {}
    stack_ = [loss]
    while stack_:
        t = stack_.pop()
        if t.node_id in nodes:
            continue
        nodes[t.node_id] = t
        stack_.extend(p for p in t._prev if p.requires_grad)
    order = sorted(nodes, reverse=True)
    loss.grad = np.ones_like(loss.data)
    for nid in order:
        t = nodes[nid]
        if t._backward is not None and t.grad is not None:
            t._backward(t.grad)
            # interior nodes do not keep their gradient
            t.grad = None
            if not retain_graph:
                t._prev = ()
                t._backward = None


class ParameterStore:
    """Ordered name -> Tensor map; iteration order equals insertion order."""

    def __init__(self):
        self._params: OrderedDict[str, Tensor] = OrderedDict()
        self.frozen: set[str] = set()

    def add(self, name: str, data, frozen: bool = False) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(data, requires_grad=not frozen, name=name)
        self._params[name] = t
        if frozen:
            self.frozen.add(name)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def freeze(self, name: str) -> None:
        self.frozen.add(name)
        self._params[name].requires_grad = False
        self._params[name].grad = None

    def unfreeze(self, name: str) -> None:
        self.frozen.discard(name)
        self._params[name].requires_grad = True

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(k, v) for k, v in self._params.items() if k not in self.frozen]

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def num_parameters(self) -> int:
        return int(sum(t.data.size for t in self._params.values()))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, v in self._params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != v.shape:
                raise ShapeError(f"load {k}", v.shape, arr.shape)
            v.data = arr.copy()


def finite_difference_check(fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
                            max_entries: int | None = None, rng: np.random.Generator | None = None,
                            floor: float = 1e-6) -> float:
    """Max relative error between autodiff and central differences for ``fn``.

    ``fn`` must rebuild the graph from the current ``.data`` of ``params``.
    Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    for p in params:
        p.grad = None
    loss = fn()
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat_idx = np.arange(p.data.size)
        if max_entries is not None and p.data.size > max_entries:
            rng = rng or np.random.default_rng(0)
            flat_idx = rng.choice(p.data.size, size=max_entries, replace=False)
        for fi in flat_idx:
            ix = np.unravel_index(fi, p.shape)
            orig = p.data[ix]
            p.data[ix] = orig + h
            up = fn().item()
            p.data[ix] = orig - h
            down = fn().item()
            p.data[ix] = orig
            num = (up - down) / (2 * h)
            a = ga[ix]
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
    for p in params:
        p.grad = None
    return worst

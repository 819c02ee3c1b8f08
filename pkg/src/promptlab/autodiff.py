"""Dense reverse-mode autodiff over numpy float64 arrays.

Every op records its parents and a closure that pushes the output gradient
back into them. ``backward`` walks the recorded graph once in reverse
topological order and then releases it.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64
LAYER_NORM_EPS = 1e-5
GELU_C = 0.7978845608
GELU_A = 0.044715
MASK_VALUE = -1e9

_grad_enabled = True


class ShapeError(ValueError):
    pass


class NonFiniteError(ValueError):
    pass


@contextlib.contextmanager
def no_grad():
    """Run ops without recording a graph (inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the data."""
        return self.data.reshape(-1)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad += g

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return swap_last(self)


class Parameter(Tensor):
    """A named leaf tensor; ``trainable`` decides whether it receives gradients."""

    __slots__ = ("name",)

    def __init__(self, data, name: str, trainable: bool = True):
        super().__init__(as_array(data), requires_grad=trainable)
        self.name = name

    @property
    def trainable(self) -> bool:
        return self.requires_grad

    @trainable.setter
    def trainable(self, flag: bool) -> None:
        self.requires_grad = bool(flag)
        if not flag:
            self.grad = None

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, trainable={self.trainable})"


def as_array(x) -> np.ndarray:
    arr = np.array(x, dtype=DTYPE)
    if not np.isfinite(arr).all():
        raise NonFiniteError("non-finite values in input")
    return arr


def tensor(x, requires_grad: bool = False) -> Tensor:
    return Tensor(as_array(x), requires_grad=requires_grad)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else tensor(x)


def _make(data, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), backward)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _binary(op: str, fn, a: Tensor, b: Tensor) -> np.ndarray:
    try:
        return fn(a.data, b.data)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = _make(_binary("add", np.add, a, b), (a, b), None)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    out._backward = backward
    return out


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = _make(_binary("mul", np.multiply, a, b), (a, b), None)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    out._backward = backward
    return out


def scale(a: Tensor, c: float) -> Tensor:
    out = _make(a.data * c, (a,), None)
    out._backward = lambda g: a._accumulate(g * c)
    return out


def add_mask(x: Tensor, mask: np.ndarray) -> Tensor:
    """Add a constant (broadcastable) mask, e.g. causal or key padding."""
    try:
        data = x.data + mask
    except ValueError:
        raise ShapeError(f"add_mask: mask {mask.shape} does not broadcast to {x.shape}") from None
    if data.shape != x.shape:
        raise ShapeError(f"add_mask: mask {mask.shape} would grow {x.shape}")
    out = _make(data, (x,), None)
    out._backward = lambda g: x._accumulate(g)
    return out


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    u = x.data
    u2 = u * u
    t = np.tanh(GELU_C * u * (1.0 + GELU_A * u2))
    out = _make(0.5 * u * (1.0 + t), (x,), None)

    def backward(g):
        dinner = GELU_C * (1.0 + 3.0 * GELU_A * u2)
        x._accumulate(g * (0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * dinner))

    out._backward = backward
    return out


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        data = a.data @ b.data
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None
    out = _make(data, (a, b), None)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    out._backward = backward
    return out


def swap_last(x: Tensor) -> Tensor:
    out = _make(np.swapaxes(x.data, -1, -2), (x,), None)
    out._backward = lambda g: x._accumulate(np.swapaxes(g, -1, -2))
    return out


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = _make(np.transpose(x.data, axes), (x,), None)
    out._backward = lambda g: x._accumulate(np.transpose(g, inverse))
    return out


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None
    out = _make(data, (x,), None)
    out._backward = lambda g: x._accumulate(g.reshape(x.shape))
    return out


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        data = np.broadcast_to(x.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {x.shape} to {shape}") from None
    out = _make(data, (x,), None)
    out._backward = lambda g: x._accumulate(_unbroadcast(g, x.shape))
    return out


# ---------------------------------------------------------------- row ops

def concat(tensors: Sequence[Tensor], axis: int = -2) -> Tensor:
    """Concatenate along ``axis`` (default: rows)."""
    tensors = [_wrap(t) for t in tensors]
    ndim = tensors[0].data.ndim
    ax = axis % ndim
    for t in tensors[1:]:
        if t.data.ndim != ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != ax
        ):
            shapes = ", ".join(str(s.shape) for s in tensors)
            raise ShapeError(f"concat: shapes {shapes} disagree off axis {axis}")
    out = _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, None)
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * ndim
                idx[ax] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    out._backward = backward
    return out


def concat_rows(a: Tensor, b: Tensor) -> Tensor:
    return concat([a, b], axis=-2)


def getitem(x: Tensor, index) -> Tensor:
    out = _make(x.data[index], (x,), None)

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g) if _is_fancy(index) else _assign_add(full, index, g)
        x._accumulate(full)

    out._backward = backward
    return out


def _is_fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def _assign_add(full, index, g):
    full[index] += g


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start <= stop <= x.shape[-2]:
        raise ShapeError(f"slice_rows: [{start}, {stop}) outside {x.shape[-2]} rows")
    return getitem(x, (Ellipsis, slice(start, stop), slice(None)))


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2:
        raise ShapeError(f"embedding: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: ids outside [0, {table.shape[0]})")
    out = _make(table.data[ids], (table,), None)

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        table._accumulate(full)

    out._backward = backward
    return out


# ---------------------------------------------------------------- normalisation

def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm: affine {gain.shape}/{bias.shape} vs features {x.shape[-1]}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = _make(xhat * gain.data + bias.data, (x, gain, bias), None)

    def backward(g):
        if gain.requires_grad:
            gain._accumulate((g * xhat).reshape(-1, x.shape[-1]).sum(axis=0))
        if bias.requires_grad:
            bias._accumulate(g.reshape(-1, x.shape[-1]).sum(axis=0))
        if x.requires_grad:
            gx = g * gain.data
            x._accumulate(
                inv * (gx - gx.mean(axis=-1, keepdims=True)
                       - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
            )

    out._backward = backward
    return out


def softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    out = _make(p, (x,), None)
    out._backward = lambda g: x._accumulate(p * (g - (g * p).sum(axis=-1, keepdims=True)))
    return out


def cross_entropy(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean token cross-entropy over positions where ``mask`` is true."""
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    if logits.shape[:-1] != targets.shape or targets.shape != mask.shape:
        raise ShapeError(
            f"cross_entropy: logits {logits.shape}, targets {targets.shape}, mask {mask.shape}"
        )
    count = int(mask.sum())
    if count == 0:
        raise ValueError("cross_entropy: empty mask")
    safe_t = np.where(mask, targets, 0)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logz
    picked = np.take_along_axis(logp, safe_t[..., None], axis=-1)[..., 0]
    loss = -(picked * mask).sum() / count
    out = _make(np.array(loss), (logits,), None)

    def backward(g):
        d = np.exp(logp)
        np.put_along_axis(d, safe_t[..., None],
                          np.take_along_axis(d, safe_t[..., None], axis=-1) - 1.0, axis=-1)
        logits._accumulate(d * (mask[..., None] * (g / count)))

    out._backward = backward
    return out


def sum_all(x: Tensor) -> Tensor:
    out = _make(np.array(x.data.sum()), (x,), None)
    out._backward = lambda g: x._accumulate(np.broadcast_to(g, x.shape))
    return out


# ---------------------------------------------------------------- graph traversal

def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every trainable leaf reachable from ``loss``.

    The graph is released afterwards.
    """
    if loss.data.size != 1 or loss.data.ndim != 0:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    loss.grad = np.ones((), dtype=DTYPE)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
        if node._parents:
            node.grad = None  # intermediate; leaves keep theirs
            node._parents = ()
            node._backward = None


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def finite_diff_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Parameter],
    eps: float = 1e-5,
    samples_per_param: int = 64,
    seed: int = 0,
) -> float:
    """Max relative error between backprop and central differences.

    Samples ``samples_per_param`` coordinates of each parameter (all of them
    when the parameter is smaller). ``loss_fn`` must rebuild the graph on
    every call.
    """
    if not eps > 0:
        raise ValueError("finite_diff_check: eps must be positive")
    params = list(params)
    zero_grad(params)
    loss = loss_fn()
    reference = float(loss.data)
    backward(loss)
    with no_grad():
        if float(loss_fn().data) != reference:
            raise RuntimeError("finite_diff_check: loss_fn is not deterministic")
    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for p in params:
            analytic = np.zeros(p.data.size) if p.grad is None else p.grad.reshape(-1).copy()
            flat = p.data.reshape(-1)
            n = flat.size
            coords = np.arange(n) if n <= samples_per_param else rng.choice(
                n, size=samples_per_param, replace=False)
            for i in coords:
                orig = flat[i]
                flat[i] = orig + eps
                up = float(loss_fn().data)
                flat[i] = orig - eps
                down = float(loss_fn().data)
                flat[i] = orig
                numeric = (up - down) / (2.0 * eps)
                a = analytic[i]
                err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-12)
                worst = max(worst, err)
    zero_grad(params)
    return worst

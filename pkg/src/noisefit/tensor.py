"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every operation that touches a tensor with ``requires_grad`` records its
parents and a backward closure on the result.  :func:`backward` walks that
tape in reverse topological order, leaves the gradients on the leaves and
drops the tape.

Kernels are numpy; nothing here runs in parallel beyond what BLAS does for
a single matmul, so results are bit-reproducible for a fixed seed.
"""

from __future__ import annotations

import contextlib
import zlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractViolation, DomainError, ShapeError, UsageError

KL_EPS = 1e-12

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A float64 array that can take part in reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    # -- introspection -----------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- arithmetic ----------------------------------------------------------

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    # -- method forms ------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def var(self, axis=None, keepdims=False):
        return var(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def abs(self):
        return tabs(self)

    def sqrt(self):
        return sqrt(self)

    def tanh(self):
        return tanh(self)

    def clip(self, lo, hi):
        return clip(self, lo, hi)

    def median(self, axis=-1, keepdims=False):
        return median(self, axis, keepdims)


def _raise_item(t):
    raise UsageError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``data``; record the tape entry only if some parent needs a gradient."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op, a: Tensor, b: Tensor):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# -- elementwise binary --------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    if np.any(b.data == 0):
        raise DomainError("division by zero")
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    if isinstance(exponent, Tensor):
        raise UsageError("power() supports scalar exponents only")
    p = float(exponent)

    def backward(g):
        return (g * p * a.data ** (p - 1.0),)

    return _make(a.data**p, (a,), backward)


# -- elementwise unary -----------------------------------------------------------


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log of a nonpositive value")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def tabs(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError("sqrt of a negative value")
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; gradient passes only where the value was inside."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def gelu(a) -> Tensor:
    """tanh approximation of GELU."""
    a = as_tensor(a)
    x = a.data
    c = np.sqrt(2.0 / np.pi)
    x2 = x * x
    inner = c * (x + 0.044715 * x2 * x)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = c * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(out, (a,), backward)


# -- reductions ------------------------------------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def _expand_back(g, shape, axes, keepdims):
    if not keepdims:
        for ax in axes:
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)

    def backward(g):
        return (np.array(_expand_back(g, a.shape, axes, keepdims)),)

    return _make(a.data.sum(axis=axes, keepdims=keepdims), (a,), backward)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    if count == 0:
        raise ShapeError("mean", a.shape, detail="reduction over an empty axis")

    def backward(g):
        return (np.array(_expand_back(g, a.shape, axes, keepdims)) / count,)

    return _make(a.data.mean(axis=axes, keepdims=keepdims), (a,), backward)


def var(a, axis=None, keepdims=False) -> Tensor:
    """Population variance (divides by the count, not count - 1)."""
    a = as_tensor(a)
    m = mean(a, axis, keepdims=True)
    d = a - m
    return mean(d * d, axis, keepdims)


def median(a, axis=-1, keepdims=False) -> Tensor:
    """Median along one axis; even lengths average the two middle order statistics.

    The gradient goes to the selected order statistic(s), which is the
    derivative almost everywhere (away from ties).
    """
    a = as_tensor(a)
    axis = axis % a.ndim
    n = a.shape[axis]
    if n == 0:
        raise ShapeError("median", a.shape, detail="empty axis")
    x = np.moveaxis(a.data, axis, -1)
    order = np.argsort(x, axis=-1, kind="stable")
    if n % 2:
        picks = order[..., n // 2 : n // 2 + 1]
        weights = np.array([1.0])
    else:
        picks = order[..., n // 2 - 1 : n // 2 + 1]
        weights = np.array([0.5, 0.5])
    vals = np.take_along_axis(x, picks, axis=-1)
    out = (vals * weights).sum(axis=-1) if n % 2 == 0 else vals[..., 0]
    if keepdims:
        out = np.expand_dims(out, axis)
    else:
        out = np.asarray(out)

    def backward(g):
        if keepdims:
            g = np.squeeze(g, axis)
        gx = np.zeros_like(x)
        np.put_along_axis(gx, picks, g[..., None] * weights, axis=-1)
        return (np.moveaxis(gx, -1, axis),)

    return _make(out, (a,), backward)


# -- shape manipulation ------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    if isinstance(index, Tensor):
        index = index.data
    out = a.data[index]

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, index, g)
        return (ga,)

    return _make(np.array(out), (a,), backward)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``weight[ids]`` with scatter-add backward."""
    ids = np.asarray(ids, dtype=np.int64)
    out = weight.data[ids]

    def backward(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[-1]))
        return (gw,)

    return _make(out, (weight,), backward)


def masked_fill(a, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is true by the constant ``value``."""
    a = as_tensor(a)
    mask = np.asarray(mask, dtype=bool)
    try:
        out = np.where(mask, value, a.data)
    except ValueError:
        raise ShapeError("masked_fill", a.shape, mask.shape) from None
    if out.shape != a.shape:
        raise ShapeError("masked_fill", a.shape, mask.shape)
    keep = ~mask
    return _make(out, (a,), lambda g: (_unbroadcast(g * keep, a.shape),))


# -- linear algebra ------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(out, (a, b), backward)


# -- composite ops -----------------------------------------------------------------


def softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), backward)


def log_softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def backward(g):
        p = np.exp(out)
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), backward)


def kl_div(p, q, eps: float = KL_EPS, axis=-1) -> Tensor:
    """Row-wise KL(p || q) = sum p log((p + eps) / (q + eps)) over ``axis``.

    ``p`` and ``q`` are probability tensors of identical shape.
    """
    p, q = as_tensor(p), as_tensor(q)
    if p.shape != q.shape:
        raise ShapeError("kl_div", p.shape, q.shape)
    if np.any(p.data < 0) or np.any(q.data < 0):
        raise DomainError("KL divergence of a negative probability")
    if not (np.all(np.isfinite(p.data)) and np.all(np.isfinite(q.data))):
        raise DomainError("KL divergence of a non-finite probability")
    return tsum(p * (log(p + eps) - log(q + eps)), axis=axis)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    m = mean(x, -1, keepdims=True)
    d = x - m
    v = mean(d * d, -1, keepdims=True)
    return d / sqrt(v + eps) * gain + bias


# -- backward ------------------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
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
        for parent in reversed(node._parents):
            if id(parent) not in seen and parent.requires_grad:
                stack.append((parent, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every ``requires_grad`` leaf.

    Interior nodes lose their tape entries afterwards, so a graph can be
    differentiated only once.
    """
    if root.size != 1:
        raise UsageError(f"backward() needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise UsageError("backward() on a tensor that is not part of a recorded graph")
    order = _topo_order(root)
    pending: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if node._backward is None:
            if g is not None:
                node.grad = np.array(g) if node.grad is None else node.grad + g
            continue
        if g is None:
            continue
        grads = node._backward(g)
        for parent, pg in zip(node._parents, grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg
    for node in order:
        if node._backward is not None:
            node._parents = ()
            node._backward = None


# -- random numbers ------------------------------------------------------------------


def _key_part(k) -> int:
    if isinstance(k, (int, np.integer)):
        if k < 0:
            raise ValueError("stream keys must be nonnegative")
        return int(k)
    return zlib.crc32(str(k).encode("utf-8"))


class Rng:
    """Seeded counter-based (Philox) generator with named, independent substreams.

    ``Rng(seed).child("noise", step)`` always yields the same stream, so
    consumers that derive substreams by key never depend on call order.
    """

    def __init__(self, seed: int, key: Iterable = ()):
        if not 0 <= int(seed) < 2**64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")
        self.seed = int(seed)
        self.key = tuple(_key_part(k) for k in key)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.key)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def child(self, *key) -> "Rng":
        return Rng(self.seed, self.key + tuple(_key_part(k) for k in key))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def normal(self, shape) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def uniform(self, shape=None) -> np.ndarray:
        return self._gen.random(shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, p: np.ndarray) -> int:
        return int(self._gen.choice(n, p=p))

    def get_state(self) -> dict:
        st = self._gen.bit_generator.state
        return {
            "seed": self.seed,
            "key": list(self.key),
            "counter": [int(v) for v in st["state"]["counter"]],
            "bg_key": [int(v) for v in st["state"]["key"]],
            "buffer": [int(v) for v in st["buffer"]],
            "buffer_pos": int(st["buffer_pos"]),
            "has_uint32": int(st["has_uint32"]),
            "uinteger": int(st["uinteger"]),
        }

    @classmethod
    def from_state(cls, state: dict) -> "Rng":
        rng = cls(state["seed"], state["key"])
        st = rng._gen.bit_generator.state
        st["state"]["counter"] = np.array(state["counter"], dtype=np.uint64)
        st["state"]["key"] = np.array(state["bg_key"], dtype=np.uint64)
        st["buffer"] = np.array(state["buffer"], dtype=np.uint64)
        st["buffer_pos"] = state["buffer_pos"]
        st["has_uint32"] = state["has_uint32"]
        st["uinteger"] = state["uinteger"]
        rng._gen.bit_generator.state = st
        return rng


def gaussian(rng: Rng, shape) -> Tensor:
    """i.i.d. standard normal tensor drawn from ``rng``."""
    return Tensor(rng.normal(tuple(shape)))


# -- gradient oracle ------------------------------------------------------------------


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h_step: float = 1e-5) -> float:
    """Compare reverse-mode gradients of scalar ``f`` at ``x`` with central differences.

    Returns ``max_i |analytic_i - fd_i| / max(1, |fd_i|)``.  ``f`` must be a
    deterministic function of ``x`` (seed any randomness inside it); this is
    checked by evaluating it twice.
    """
    if not 1e-7 <= h_step <= 1e-3:
        raise UsageError(f"h_step must lie in [1e-7, 1e-3], got {h_step}")
    if not x.is_leaf:
        raise UsageError("grad_check needs a leaf tensor")
    with no_grad():
        first = as_tensor(f(x)).data.copy()
        second = as_tensor(f(x)).data.copy()
    if first.size != 1:
        raise UsageError("grad_check needs a scalar-valued function")
    if not np.array_equal(first, second):
        raise ContractViolation("f is not deterministic: two evaluations at the same point differ")

    was = x.requires_grad
    saved_grad = x.grad
    x.requires_grad = True
    x.grad = None
    try:
        y = as_tensor(f(x))
        if y.requires_grad:
            backward(y)
            analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
        else:
            analytic = np.zeros_like(x.data)
    finally:
        x.requires_grad = was
        x.grad = saved_grad

    flat = x.data.reshape(-1)
    worst = 0.0
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h_step
            up = float(as_tensor(f(x)).data.reshape(-1)[0])
            flat[i] = orig - h_step
            down = float(as_tensor(f(x)).data.reshape(-1)[0])
            flat[i] = orig
            fd = (up - down) / (2.0 * h_step)
            err = abs(analytic.reshape(-1)[i] - fd) / max(1.0, abs(fd))
            worst = max(worst, err)
    return worst

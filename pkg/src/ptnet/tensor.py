"""Dense tensors with define-by-run reverse-mode differentiation.

Every op records its parents and a closure mapping the output gradient to
one gradient per parent.  ``backward`` walks the recorded graph once in
reverse topological order and then frees it.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True


class NonFiniteError(FloatingPointError):
    """Raised when NaN or Inf shows up where finite values are required."""


def default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype new tensors are created with."""
    global _DEFAULT_DTYPE
    prev = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_freed", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self._op = ""
        self._freed = False
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return not self._parents

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))

    def check_finite(self, what="tensor"):
        if not self.is_finite():
            raise NonFiniteError(f"{what} contains NaN or Inf")
        return self

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.shape[0]

    # -- operator sugar ---------------------------------------------------
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_over(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_over(self, axis, keepdims)

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

    @property
    def T(self):
        return self.swapaxes(-1, -2)

    def backward(self):
        return backward(self)


def tensor(data, requires_grad=False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def parameter(data, dtype=None) -> Tensor:
    return Tensor(np.array(data, dtype=dtype or _DEFAULT_DTYPE), requires_grad=True)


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else _DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def _record(data, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._op = op
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise arithmetic ---------------------------------------------------

def add(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)
    return _record(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)
    return _record(out, (a, b), bw, "div")


def neg(a: Tensor) -> Tensor:
    return _record(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, p: float) -> Tensor:
    ad = a.data
    return _record(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _record(np.log(ad), (a,), lambda g: (g / ad,), "log")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    ad = a.data
    inside = (ad >= lo) & (ad <= hi)
    return _record(np.clip(ad, lo, hi), (a,), lambda g: (g * inside,), "clip")


def abs_diff(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise |a - b|; the subgradient at a tie is 0."""
    if a.shape != b.shape:
        raise ValueError(f"abs_diff shape mismatch: {a.shape} vs {b.shape}")
    d = a.data - b.data
    s = np.sign(d)
    return _record(np.abs(d), (a, b), lambda g: (g * s, -g * s), "abs_diff")


# -- nonlinearities -----------------------------------------------------------

def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # exp of a non-positive argument only, so neither branch overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    return _record(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _record(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a: Tensor) -> Tensor:
    x = a.data
    pos = x > 0
    return _record(x * pos, (a,), lambda g: (g * pos,), "relu")


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * (x * x * x))
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)
    return _record(out.astype(x.dtype, copy=False), (a,), bw, "gelu")


def softmax_last(a: Tensor) -> Tensor:
    x = a.data
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("softmax input contains NaN or Inf")
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)
    return _record(out, (a,), bw, "softmax")


def log_softmax_last(a: Tensor) -> Tensor:
    x = a.data
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("log_softmax input contains NaN or Inf")
    shifted = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)
    return _record(out, (a,), bw, "log_softmax")


def normalize_last(a: Tensor, eps=1e-5) -> Tensor:
    """Zero-mean, unit-variance over the last axis (layer-norm core)."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)
    return _record(xhat, (a,), bw, "normalize")


def l2_normalize(a: Tensor, eps=1e-12) -> Tensor:
    x = a.data
    n = np.sqrt((x * x).sum(axis=-1, keepdims=True) + eps)
    out = x / n

    def bw(g):
        return ((g - out * (g * out).sum(axis=-1, keepdims=True)) / n,)
    return _record(out, (a,), bw, "l2_normalize")


# -- reductions ---------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def sum_over(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)
    return _record(np.asarray(out), (a,), bw, "sum")


def mean_over(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    if n == 0:
        raise ValueError("mean over an empty axis")
    shape = a.shape
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, shape),)
    return _record(np.asarray(out), (a,), bw, "mean")


# -- linear algebra -----------------------------------------------------------

def matmul(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dims disagree: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            if ad.ndim == 2 and bd.ndim > 2 and g.shape[:-2] == bd.shape[:-2]:
                # a shared left operand: contract batch axes in one product
                axes = list(range(bd.ndim - 2)) + [bd.ndim - 1]
                ga = np.tensordot(g, bd, axes=(axes, axes))
            else:
                ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                # a shared weight: fold the batch into one product
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb
    return _record(ad @ bd, (a, b), bw, "matmul")


# -- shape manipulation -------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _record(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a: Tensor, idx) -> Tensor:
    shape, dtype = a.shape, a.dtype

    basic = all(isinstance(i, (slice, int, type(Ellipsis), type(None)))
                for i in (idx if isinstance(idx, tuple) else (idx,)))

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:   # basic indexing never repeats an element
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)
    return _record(np.asarray(a.data[idx]), (a,), bw, "getitem")


def concat(tensors: Sequence[Tensor], axis=0) -> Tensor:
    tensors = list(tensors)
    axis = axis % tensors[0].ndim
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))
    return _record(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def stack(tensors: Sequence[Tensor], axis=0) -> Tensor:
    tensors = list(tensors)
    n = len(tensors)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))
    return _record(np.stack([t.data for t in tensors], axis=axis), tensors, bw, "stack")


def pad2d(a: Tensor, p: int) -> Tensor:
    """Zero-pad axes 1 and 2 of a [B, H, W, C] tensor by p on each side."""
    widths = [(0, 0), (p, p), (p, p), (0, 0)]
    return _record(np.pad(a.data, widths), (a,), lambda g: (g[:, p:-p, p:-p, :],), "pad2d")


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of ``table`` at integer ``ids`` (any shape)."""
    ids = np.asarray(ids)
    shape, dtype = table.shape, table.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[-1]))
        return (full,)
    return _record(table.data[ids], (table,), bw, "embedding")


# -- graph traversal and backward ----------------------------------------------

def tape_of(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` that require grad, in topological order."""
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor) -> dict:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``.grad``.

    Returns a map from each leaf reached to its accumulated gradient.  The
    graph is released afterwards; calling again on the same loss raises.
    Leaves that ``loss`` does not depend on keep ``grad`` untouched (``None``
    unless set by an earlier pass).
    """
    if loss._freed:
        raise RuntimeError("graph already consumed by backward(); recompute the forward pass")
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise RuntimeError("loss does not depend on any tensor requiring grad")
    order = tape_of(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node.is_leaf:
            if g is not None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                leaves[node] = node.grad
            continue
        if g is None:
            continue
        pgs = node._backward(g)
        for p, pg in zip(node._parents, pgs):
            if pg is None or not p.requires_grad:
                continue
            pg = np.asarray(pg, dtype=p.dtype)
            k = id(p)
            if k in grads:
                grads[k] = grads[k] + pg
            else:
                grads[k] = pg
    for node in order:
        if not node.is_leaf:
            node._parents = ()
            node._backward = None
            node._freed = True
    loss._freed = True
    return leaves


# -- finite-difference oracle -----------------------------------------------------

def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[Tensor], probes=10, h=1e-5,
              rtol=1e-4, rng=None, atol_floor=1e-6) -> float:
    """Compare autograd against central differences at random coordinates.

    ``fn`` maps the inputs to a scalar Tensor.  Inputs must be float64.
    Returns the worst relative error seen; raises AssertionError above
    ``rtol``.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError("gradcheck needs float64 inputs")
        t.grad = None
        t.data = np.ascontiguousarray(t.data)
    out = fn(*inputs)
    backward(out)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    worst = 0.0
    for _ in range(probes):
        k = int(rng.integers(len(inputs)))
        t = inputs[k]
        j = int(rng.integers(t.size))
        flat = t.data.reshape(-1)
        orig = flat[j]
        with no_grad():
            flat[j] = orig + h
            fp = float(fn(*inputs).data)
            flat[j] = orig - h
            fm = float(fn(*inputs).data)
        flat[j] = orig
        num = (fp - fm) / (2 * h)
        ana = float(analytic[k].reshape(-1)[j])
        err = abs(num - ana) / max(abs(num), abs(ana), atol_floor)
        worst = max(worst, err)
    if worst > rtol:
        raise AssertionError(f"gradient check failed: worst relative error {worst:.3e} > {rtol:g}")
    return worst


def global_grad_norm(params: Iterable[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    return float(np.sqrt(total))

"""Parameter containers and the handful of layers the model is built from."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Attribute-walking parameter container.

    Parameters are discovered in attribute insertion order, so names and
    ordering are stable across runs.
    """

    def named_parameters(self, prefix=""):
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            yield from _walk(val, name)

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self):
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state, strict=True):
        own = dict(self.named_parameters())
        if strict:
            missing = set(own) - set(state)
            extra = set(state) - set(own)
            if missing or extra:
                raise KeyError(f"state mismatch: missing={sorted(missing)[:5]} unexpected={sorted(extra)[:5]}")
        for name, p in own.items():
            if name not in state:
                continue
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype).copy()

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def num_parameters(self):
        return int(sum(p.size for p in self.parameters()))


def _walk(val, name):
    if isinstance(val, Tensor):
        if val.requires_grad:
            yield name, val
    elif isinstance(val, Module):
        yield from val.named_parameters(name + ".")
    elif isinstance(val, (list, tuple)):
        for i, item in enumerate(val):
            yield from _walk(item, f"{name}.{i}")
    elif isinstance(val, dict):
        for k, item in val.items():
            yield from _walk(item, f"{name}.{k}")


def init_weight(rng, fan_in, fan_out, scale=1.0):
    std = scale / np.sqrt(fan_in)
    return T.parameter(rng.normal(0.0, std, size=(fan_in, fan_out)))


class Linear(Module):
    def __init__(self, rng, d_in, d_out, bias=True, scale=1.0, zero=False):
        if zero:
            self.weight = T.parameter(np.zeros((d_in, d_out)))
        else:
            self.weight = init_weight(rng, d_in, d_out, scale)
        self.bias = T.parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim):
        self.gain = T.parameter(np.ones(dim))
        self.shift = T.parameter(np.zeros(dim))

    def __call__(self, x):
        return T.normalize_last(x) * self.gain + self.shift


class MLP(Module):
    """Two linear layers with a GELU in between."""

    def __init__(self, rng, d_in, d_hidden, d_out):
        self.fc1 = Linear(rng, d_in, d_hidden)
        self.fc2 = Linear(rng, d_hidden, d_out)

    def __call__(self, x):
        return self.fc2(T.gelu(self.fc1(x)))


def split_heads(x: Tensor, heads: int) -> Tensor:
    """[..., L, D] -> [..., heads, L, D/heads]."""
    *lead, L, D = x.shape
    if D % heads:
        raise ValueError(f"dim {D} not divisible by {heads} heads")
    y = x.reshape(*lead, L, heads, D // heads)
    nd = y.ndim
    axes = list(range(nd - 3)) + [nd - 2, nd - 3, nd - 1]
    return y.transpose(axes)


def merge_heads(x: Tensor) -> Tensor:
    """[..., heads, L, dk] -> [..., L, heads*dk]."""
    *lead, H, L, dk = x.shape
    nd = x.ndim
    axes = list(range(nd - 3)) + [nd - 2, nd - 3, nd - 1]
    return x.transpose(axes).reshape(*lead, L, H * dk)


def attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None, return_weights=False):
    """Scaled dot-product attention over the last two axes.

    ``mask`` is an additive array broadcast onto the score matrix.
    """
    dk = q.shape[-1]
    scores = (q @ k.swapaxes(-1, -2)) * float(1.0 / np.sqrt(dk))
    if mask is not None:
        scores = scores + mask.astype(scores.dtype)
    w = T.softmax_last(scores)
    out = w @ v
    return (out, w) if return_weights else out


class SelfAttention(Module):
    def __init__(self, rng, dim, heads):
        self.heads = heads
        self.q = Linear(rng, dim, dim)
        self.k = Linear(rng, dim, dim)
        self.v = Linear(rng, dim, dim)
        self.o = Linear(rng, dim, dim)

    def __call__(self, x, mask=None):
        h = self.heads
        out = attention(split_heads(self.q(x), h), split_heads(self.k(x), h),
                        split_heads(self.v(x), h), mask)
        return self.o(merge_heads(out))


class TransformerBlock(Module):
    """Pre-norm self-attention block."""

    def __init__(self, rng, dim, heads, mlp_ratio=2):
        self.ln1 = LayerNorm(dim)
        self.attn = SelfAttention(rng, dim, heads)
        self.ln2 = LayerNorm(dim)
        self.mlp = MLP(rng, dim, mlp_ratio * dim, dim)

    def __call__(self, x, mask=None):
        x = x + self.attn(self.ln1(x), mask)
        return x + self.mlp(self.ln2(x))


def causal_mask(L, dtype=np.float32):
    m = np.triu(np.ones((L, L), dtype=bool), k=1)
    return np.where(m, -1e9, 0.0).astype(dtype)

"""Prototype-guided change-aware interaction.

For every pyramid level a change query is fused from both phases and their
absolute difference, attends over the flattened prototype bank to retrieve
a modulation map, and that map scales the keys/values of a bidirectional
cross-temporal attention with a residual connection.  Two such layers with
separate parameters are cascaded.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import NUM_LEVELS, FeaturePyramid
from .nn import MLP, LayerNorm, Linear, Module, attention, merge_heads, split_heads
from .tensor import Tensor


@dataclass
class ChangeAwareFeatures:
    phase1: list  # G_1^i, i = 1..4
    phase2: list

    def pairs(self):
        return list(zip(self.phase1, self.phase2))


def change_query(f1: Tensor, f2: Tensor, mlp: MLP) -> Tensor:
    """MLP over the channel concatenation [F1; F2; |F1 - F2|]."""
    if f1.shape != f2.shape:
        raise ValueError(f"phase features differ in shape: {f1.shape} vs {f2.shape}")
    return mlp(T.concat([f1, f2, T.abs_diff(f1, f2)], axis=-1))


class CrossDirection(Module):
    """Projections for one attention direction (queries from phase a)."""

    def __init__(self, rng, dim, zero_output=False):
        self.q = Linear(rng, dim, dim)
        self.k = Linear(rng, dim, dim)
        self.v = Linear(rng, dim, dim)
        self.o = Linear(rng, dim, dim, zero=zero_output)

    def copy_from(self, other: "CrossDirection"):
        for (_, dst), (_, src) in zip(self.named_parameters(), other.named_parameters()):
            dst.data = src.data.copy()


class LevelInteraction(Module):
    def __init__(self, rng, dim, heads, use_prototypes=True, zero_output=False, mirror=True):
        self.heads = heads
        self.use_prototypes = use_prototypes
        # pre-norm shared by both phases; the residual keeps the raw features
        self.norm = LayerNorm(dim)
        if use_prototypes:
            self.query_mlp = MLP(rng, 3 * dim, 2 * dim, dim)
            self.ret_q = Linear(rng, dim, dim)
            self.ret_k = Linear(rng, dim, dim)
            self.ret_v = Linear(rng, dim, dim)
            self.ret_o = Linear(rng, dim, dim)
        self.dir12 = CrossDirection(rng, dim, zero_output)
        self.dir21 = CrossDirection(rng, dim, zero_output)
        if mirror:
            # both directions start from the same weights
            self.dir21.copy_from(self.dir12)

    def modulation(self, f1, f2, bank: Tensor, return_weights=False):
        """Retrieve a per-token modulation map from the prototype bank."""
        u = change_query(f1, f2, self.query_mlp)
        K, N, D = bank.shape
        flat = bank.reshape(K * N, D)
        out, w = attention(split_heads(self.ret_q(u), self.heads),
                           split_heads(self.ret_k(flat), self.heads),
                           split_heads(self.ret_v(flat), self.heads), return_weights=True)
        m = self.ret_o(merge_heads(out))
        return (m, w) if return_weights else m

    def cross(self, fa, fb, m, direction: CrossDirection, return_weights=False):
        """Queries from ``fa``; keys and values from ``fb`` scaled by ``m``.

        ``fa``/``fb`` are the raw features: both are normalized for the
        projections and the residual adds the raw ``fa``.
        """
        na, nb = self.norm(fa), self.norm(fb)
        src = nb if m is None else nb * m
        h = self.heads
        out, w = attention(split_heads(direction.q(na), h), split_heads(direction.k(src), h),
                           split_heads(direction.v(src), h), return_weights=True)
        g = direction.o(merge_heads(out)) + fa
        return (g, w) if return_weights else g

    def __call__(self, f1, f2, bank=None):
        m = None
        if self.use_prototypes:
            m = self.modulation(self.norm(f1), self.norm(f2), bank)
        return self.cross(f1, f2, m, self.dir12), self.cross(f2, f1, m, self.dir21)


class PgCaiLayer(Module):
    def __init__(self, rng, dim, heads, use_prototypes=True, zero_output=False, mirror=True):
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        self.levels = [LevelInteraction(rng, dim, heads, use_prototypes, zero_output, mirror)
                       for _ in range(NUM_LEVELS)]

    def __call__(self, feats1, feats2, bank=None):
        g1, g2 = [], []
        for lvl, a, b in zip(self.levels, feats1, feats2):
            x, y = lvl(a, b, bank)
            g1.append(x)
            g2.append(y)
        return g1, g2


class PgCai(Module):
    """Two cascaded interaction layers sharing one prototype bank."""

    def __init__(self, rng, dim, heads, num_tokens, k=4, use_prototypes=True, zero_output=False,
                 mirror=True):
        self.use_prototypes = use_prototypes
        self.bank = T.parameter(np.zeros((k, num_tokens, dim))) if use_prototypes else None
        self.layers = [PgCaiLayer(rng, dim, heads, use_prototypes, zero_output, mirror)
                       for _ in range(2)]

    def set_bank(self, prototypes: np.ndarray):
        if self.bank is None:
            raise RuntimeError("prototype modulation is disabled")
        prototypes = np.asarray(prototypes)
        if prototypes.shape[1:] != self.bank.shape[1:]:
            raise ValueError(f"bank shape {prototypes.shape} incompatible with {self.bank.shape}")
        self.bank.data = prototypes.astype(self.bank.dtype).copy()

    def __call__(self, pyr1: FeaturePyramid, pyr2: FeaturePyramid) -> ChangeAwareFeatures:
        g1, g2 = list(pyr1), list(pyr2)
        for layer in self.layers:
            g1, g2 = layer(g1, g2, self.bank)
        return ChangeAwareFeatures(g1, g2)

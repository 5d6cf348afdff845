"""Contrastive alignment of caption-branch states with a frozen text anchor."""

from __future__ import annotations

import hashlib

import numpy as np

from . import tensor as T
from .nn import Linear, Module
from .tensor import Tensor


class TextAnchor:
    """Frozen caption embedder.

    Each word gets a fixed Gaussian vector seeded from a hash of the word;
    a caption is the mean of its word vectors pushed through a fixed random
    projection and L2-normalized.  Nothing here is trainable.
    """

    def __init__(self, dim=32, table_dim=64, seed=1234):
        self.dim = dim
        self.table_dim = table_dim
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.projection = rng.normal(0.0, 1.0 / np.sqrt(table_dim), size=(table_dim, dim))
        self._cache: dict[str, np.ndarray] = {}

    def word_vector(self, word: str) -> np.ndarray:
        vec = self._cache.get(word)
        if vec is None:
            digest = hashlib.sha256(f"{self.seed}:{word}".encode()).digest()
            rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
            vec = rng.normal(size=self.table_dim)
            self._cache[word] = vec
        return vec

    def embed(self, words) -> np.ndarray:
        words = list(words)
        if not words:
            raise ValueError("cannot embed an empty caption")
        pooled = np.mean([self.word_vector(w) for w in words], axis=0)
        e = pooled @ self.projection
        return e / np.linalg.norm(e)

    def embed_batch(self, captions) -> np.ndarray:
        return np.stack([self.embed(c) for c in captions])


def anchor_embed(words, anchor: TextAnchor) -> np.ndarray:
    return anchor.embed(words)


class AlignmentHead(Module):
    def __init__(self, rng, d_lm, d_t=32, tau=0.07):
        if tau <= 0:
            raise ValueError("temperature must be positive")
        self.proj = Linear(rng, d_lm, d_t)
        self.tau = tau

    def pool_project(self, hidden: Tensor, valid: np.ndarray | None = None) -> Tensor:
        """Mean over (valid) caption positions, project, L2-normalize."""
        if hidden.shape[-2] == 0:
            raise ValueError("no caption positions to pool")
        if valid is None:
            pooled = hidden.mean(axis=-2)
        else:
            w = valid.astype(hidden.dtype)
            counts = w.sum(axis=-1, keepdims=True)
            if np.any(counts == 0):
                raise ValueError("a caption has no valid positions to pool")
            pooled = (hidden * w[..., None]).sum(axis=-2) / counts
        return T.l2_normalize(self.proj(pooled))


def infonce(ev: Tensor, et, tau: float) -> Tensor:
    """Image-to-text InfoNCE with positives on the diagonal.

    ``ev`` and ``et`` are [B, d] unit rows; the denominator for row b runs
    over all text candidates b'.
    """
    et = et if isinstance(et, Tensor) else T.tensor(et, dtype=ev.dtype)
    B = ev.shape[0]
    if B < 2:
        raise ValueError("InfoNCE needs a batch of at least 2")
    logits = (ev @ et.T) * (1.0 / tau)
    logp = T.log_softmax_last(logits)
    idx = np.arange(B)
    return -logp[idx, idx].mean()

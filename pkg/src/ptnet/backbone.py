"""Siamese hierarchical token encoder.

A patch embedding followed by four pre-norm transformer blocks; the output
of block ``i`` is pyramid level ``i``.  Both temporal phases go through the
same weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Linear, Module, TransformerBlock
from .tensor import Tensor

NUM_LEVELS = 4


@dataclass
class FeaturePyramid:
    """Per-level token maps ``levels[i]`` of shape [B, N, D] (or [N, D])."""

    levels: list
    grid: int

    def __post_init__(self):
        if len(self.levels) != NUM_LEVELS:
            raise ValueError(f"expected {NUM_LEVELS} levels, got {len(self.levels)}")
        shapes = {lvl.shape[-2:] for lvl in self.levels}
        if len(shapes) != 1:
            raise ValueError(f"levels disagree in [N, D]: {shapes}")
        n = self.levels[0].shape[-2]
        if self.grid * self.grid != n:
            raise ValueError(f"N={n} is not grid {self.grid} squared")

    def __getitem__(self, i):
        return self.levels[i]

    def __iter__(self):
        return iter(self.levels)


def patchify(images: np.ndarray | Tensor, patch: int) -> Tensor:
    """[B, H, W, C] -> [B, N, patch*patch*C] in row-major token order."""
    x = images if isinstance(images, Tensor) else T.tensor(images)
    B, H, W, C = x.shape
    if H % patch or W % patch:
        raise ValueError(f"image {H}x{W} not divisible by patch {patch}")
    gh, gw = H // patch, W // patch
    x = x.reshape(B, gh, patch, gw, patch, C).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(B, gh * gw, patch * patch * C)


class Backbone(Module):
    def __init__(self, rng, image_size=32, channels=3, patch=8, dim=32, heads=2, mlp_ratio=2):
        if image_size % patch:
            raise ValueError("image size must be divisible by patch size")
        self.image_size = image_size
        self.channels = channels
        self.patch = patch
        self.dim = dim
        self.grid = image_size // patch
        n = self.grid * self.grid
        self.embed = Linear(rng, patch * patch * channels, dim)
        self.pos = T.parameter(rng.normal(0.0, 0.02, size=(n, dim)))
        self.blocks = [TransformerBlock(rng, dim, heads, mlp_ratio) for _ in range(NUM_LEVELS)]

    @property
    def num_tokens(self):
        return self.grid * self.grid

    def encode(self, images) -> FeaturePyramid:
        """Encode a batch [B, H, W, C] (or a single [H, W, C] image)."""
        single = (images.ndim == 3)
        if single:
            images = images[None] if isinstance(images, np.ndarray) else images.reshape(1, *images.shape)
        x = self.embed(patchify(images, self.patch)) + self.pos
        levels = []
        for block in self.blocks:
            x = block(x)
            levels.append(x)
        if single:
            levels = [lvl[0] for lvl in levels]
        return FeaturePyramid(levels, self.grid)

    def pyramid_pair(self, img1, img2):
        """Encode both phases in one pass with shared weights."""
        if img1.shape != img2.shape:
            raise ValueError(f"phase shapes differ: {img1.shape} vs {img2.shape}")
        single = img1.ndim == 3
        if single:
            img1, img2 = img1[None], img2[None]
        both = self.encode(np.concatenate([_arr(img1), _arr(img2)], axis=0))
        B = img1.shape[0]
        p1 = [lvl[:B] for lvl in both.levels]
        p2 = [lvl[B:] for lvl in both.levels]
        if single:
            p1 = [lvl[0] for lvl in p1]
            p2 = [lvl[0] for lvl in p2]
        return FeaturePyramid(p1, self.grid), FeaturePyramid(p2, self.grid)


def _arr(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def token_coords(grid: int) -> np.ndarray:
    """Row/column coordinates [N, 2] of each token on the grid."""
    r, c = np.divmod(np.arange(grid * grid), grid)
    return np.stack([r, c], axis=1).astype(np.float64)

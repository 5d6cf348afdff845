"""Task-adaptive multi-head gating and cross-level fusion."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import NUM_LEVELS
from .nn import Module
from .tensor import Tensor

TASKS = ("det", "cap")
SLOTS = 2 * NUM_LEVELS


@dataclass
class TaskFeatures:
    detection: Tensor
    caption: Tensor


def head_gate(g: Tensor, w: Tensor, b: Tensor, heads: int, return_gates=False):
    """Scale each head slice of ``g`` by sigmoid(w . avgpool(slice) + b).

    ``g`` is [..., N, D]; ``w`` is [..., H, D/H] and ``b`` is [..., H],
    with leading axes broadcast against those of ``g`` without N and D.
    """
    *lead, N, D = g.shape
    if D % heads:
        raise ValueError(f"dim {D} not divisible by {heads} heads")
    gh = g.reshape(*lead, N, heads, D // heads)
    pooled = gh.mean(axis=-3)                       # [..., H, dk]
    gates = T.sigmoid((pooled * w).sum(axis=-1) + b)  # [..., H]
    out = gh * gates.reshape(*gates.shape[:-1], 1, heads, 1)
    out = out.reshape(*lead, N, D)
    return (out, gates) if return_gates else out


def fusion_weights(scores: Tensor) -> Tensor:
    return T.softmax_last(scores)


def fuse_levels(gated: Tensor, scores: Tensor) -> Tensor:
    """Weighted sum over the slot axis.  ``gated`` is [B, S, N, D]."""
    beta = fusion_weights(scores)
    return (gated * beta.reshape(-1, 1, 1)).sum(axis=1)


class TaskGates(Module):
    def __init__(self, heads, dim, bias_init=2.0):
        dk = dim // heads
        self.weight = T.parameter(np.zeros((NUM_LEVELS, 2, heads, dk)))
        self.bias = T.parameter(np.full((NUM_LEVELS, 2, heads), bias_init))
        self.scores = T.parameter(np.zeros(SLOTS))


def stack_slots(cam) -> Tensor:
    """[B, 8, N, D] with slot order (level 1 phase 1, level 1 phase 2, ...)."""
    slots = []
    for g1, g2 in cam.pairs():
        slots += [g1, g2]
    return T.stack(slots, axis=1)


class Tamg(Module):
    def __init__(self, dim, heads, enabled=True, bias_init=2.0):
        self.heads = heads
        self.enabled = enabled
        if enabled:
            self.det = TaskGates(heads, dim, bias_init)
            self.cap = TaskGates(heads, dim, bias_init)

    def task_forward(self, stacked: Tensor, gates: TaskGates) -> Tensor:
        H = self.heads
        w = gates.weight.reshape(SLOTS, H, -1)
        b = gates.bias.reshape(SLOTS, H)
        return fuse_levels(head_gate(stacked, w, b, H), gates.scores)

    def __call__(self, cam) -> TaskFeatures:
        stacked = stack_slots(cam)
        if not self.enabled:
            shared = stacked.mean(axis=1)
            return TaskFeatures(shared, shared)
        return TaskFeatures(self.task_forward(stacked, self.det), self.task_forward(stacked, self.cap))

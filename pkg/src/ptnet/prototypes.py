"""Offline construction of the change-type prototype bank.

Training pairs are reduced to pooled difference vectors, clustered with
Lloyd's algorithm, spatially re-expanded with Gaussian RBF weights, and
aggregated into a [K, N, D] bank by soft cluster assignment.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .backbone import token_coords
from .tensor import no_grad


@dataclass
class ClusterModel:
    centers: np.ndarray  # [K, D]
    tau: float = 1.0
    iterations: int = 0
    labels: np.ndarray | None = None

    @property
    def k(self):
        return self.centers.shape[0]


@dataclass
class PrototypeBank:
    prototypes: np.ndarray  # [K, N, D]
    clusters: ClusterModel
    sigma: float
    provenance: dict = field(default_factory=dict)

    @property
    def shape(self):
        return self.prototypes.shape


def mask_to_tokens(mask: np.ndarray, grid: int, threshold=0.5) -> np.ndarray:
    """Token is changed when at least ``threshold`` of its pixels are."""
    H, W = mask.shape[-2:]
    ph, pw = H // grid, W // grid
    blocks = mask.reshape(*mask.shape[:-2], grid, ph, grid, pw).astype(np.float64)
    frac = blocks.mean(axis=(-3, -1))
    return (frac >= threshold).reshape(*mask.shape[:-2], grid * grid)


def pool_change_vector(Z: np.ndarray, mask_tokens: np.ndarray) -> np.ndarray:
    """Mean of the changed rows of Z, or of all rows if none changed."""
    sel = np.asarray(mask_tokens, dtype=bool)
    if sel.any():
        return Z[sel].mean(axis=0)
    return Z.mean(axis=0)


def _sq_dists(points, centers):
    return ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=-1)


def farthest_point_init(points: np.ndarray, k: int, seed: int) -> np.ndarray:
    """First center drawn from ``seed``; each next is the farthest point."""
    rng = np.random.default_rng(seed)
    idx = [int(rng.integers(len(points)))]
    d = _sq_dists(points, points[idx]).min(axis=1)
    for _ in range(1, k):
        nxt = int(np.argmax(d))
        idx.append(nxt)
        d = np.minimum(d, _sq_dists(points, points[[nxt]])[:, 0])
    return points[idx].copy()


def lloyd(points: np.ndarray, init: np.ndarray, max_iters=100):
    """Lloyd iterations from fixed initial centers.

    Ties go to the lowest cluster index (``argmin``); an emptied cluster is
    moved to the point farthest from its currently assigned center.
    """
    centers = init.astype(np.float64).copy()
    labels = None
    it = 0
    for it in range(1, max_iters + 1):
        d = _sq_dists(points, centers)
        new_labels = np.argmin(d, axis=1)
        for k in range(len(centers)):
            if not np.any(new_labels == k):
                far = int(np.argmax(d[np.arange(len(points)), new_labels]))
                new_labels[far] = k
                d[far] = 0.0
        centers = np.stack([points[new_labels == k].mean(axis=0) for k in range(len(centers))])
        if labels is not None and np.array_equal(labels, new_labels):
            labels = new_labels
            break
        labels = new_labels
    return centers, labels, it


def kmeans_fit(points: np.ndarray, k: int, seed: int = 0, max_iters=100, tau=1.0) -> ClusterModel:
    points = np.asarray(points, dtype=np.float64)
    if len(points) < k:
        raise ValueError(f"need at least K={k} points, got {len(points)}")
    init = farthest_point_init(points, k, seed)
    centers, labels, it = lloyd(points, init, max_iters)
    return ClusterModel(centers=centers, tau=tau, iterations=it, labels=labels)


def rbf_weights(coords: np.ndarray, changed: np.ndarray, sigma: float) -> np.ndarray:
    """Row-normalized Gaussian weights [N, |changed|] from changed tokens."""
    if sigma <= 0:
        raise ValueError("RBF bandwidth must be positive")
    src = coords[np.asarray(changed, dtype=bool)]
    d2 = ((coords[:, None, :] - src[None, :, :]) ** 2).sum(axis=-1)
    w = np.exp(-d2 / (2.0 * sigma * sigma))
    return w / w.sum(axis=1, keepdims=True)


def rbf_expand(Z: np.ndarray, mask_tokens: np.ndarray, coords: np.ndarray, sigma: float) -> np.ndarray:
    """Spread changed-token features over the whole grid.

    With no changed tokens every position receives the pooled vector.
    """
    sel = np.asarray(mask_tokens, dtype=bool)
    if sigma <= 0:
        raise ValueError("RBF bandwidth must be positive")
    if not sel.any():
        return np.broadcast_to(Z.mean(axis=0), Z.shape).copy()
    return rbf_weights(coords, sel, sigma) @ Z[sel]


def soft_assign(z: np.ndarray, model: ClusterModel) -> np.ndarray:
    """Softmax over negative squared distances scaled by the temperature."""
    if model.tau <= 0:
        raise ValueError("assignment temperature must be positive")
    d2 = ((np.asarray(z, dtype=np.float64)[..., None, :] - model.centers) ** 2).sum(axis=-1)
    logits = -d2 / model.tau
    logits -= logits.max(axis=-1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=-1, keepdims=True)


def difference_stats(features1: np.ndarray, features2: np.ndarray, masks: np.ndarray, grid: int):
    """Per-sample |F1 - F2|, changed-token sets and pooled vectors."""
    Z = np.abs(np.asarray(features1, np.float64) - np.asarray(features2, np.float64))
    omega = mask_to_tokens(masks, grid)
    pooled = np.stack([pool_change_vector(Z[s], omega[s]) for s in range(len(Z))])
    return Z, omega, pooled


def aggregate_bank(Z, omega, pooled, clusters: ClusterModel, coords, sigma):
    """Weighted sum of re-expanded maps; returns (bank, alphas, expanded)."""
    alphas = soft_assign(pooled, clusters)
    expanded = np.stack([rbf_expand(Z[s], omega[s], coords, sigma) for s in range(len(Z))])
    bank = np.einsum("sk,snd->knd", alphas, expanded)
    return bank, alphas, expanded


def build_bank_from_features(features1, features2, masks, grid, k, tau=1.0, sigma=2.0,
                             seed=0, max_iters=100) -> PrototypeBank:
    if len(features1) == 0:
        raise ValueError("cannot build a prototype bank from an empty dataset")
    Z, omega, pooled = difference_stats(features1, features2, masks, grid)
    clusters = kmeans_fit(pooled, k, seed=seed, max_iters=max_iters, tau=tau)
    coords = token_coords(grid)
    bank, _, _ = aggregate_bank(Z, omega, pooled, clusters, coords, sigma)
    # cluster closest to the mean pooled vector of unchanged samples
    unchanged = ~omega.any(axis=1)
    no_change = None
    if unchanged.any():
        ref = pooled[unchanged].mean(axis=0)
        no_change = int(np.argmin(((clusters.centers - ref) ** 2).sum(axis=1)))
    prov = {"k": k, "seed": seed, "tau": tau, "sigma": sigma, "samples": len(Z),
            "kmeans_iterations": clusters.iterations, "no_change_cluster": no_change}
    return PrototypeBank(bank, clusters, sigma, prov)


def build_bank(backbone, images1, images2, masks, k, tau=1.0, sigma=2.0, seed=0,
               batch_size=64, dataset_hash=None) -> PrototypeBank:
    """Run the frozen backbone over a dataset and cluster level-2 differences."""
    f1, f2 = [], []
    with no_grad():
        for s in range(0, len(images1), batch_size):
            p1, p2 = backbone.pyramid_pair(images1[s:s + batch_size], images2[s:s + batch_size])
            f1.append(p1[1].data)
            f2.append(p2[1].data)
    f1 = np.concatenate(f1) if f1 else np.zeros((0,))
    f2 = np.concatenate(f2) if f2 else np.zeros((0,))
    bank = build_bank_from_features(f1, f2, np.asarray(masks), backbone.grid, k, tau, sigma, seed)
    if dataset_hash is not None:
        bank.provenance["dataset_hash"] = dataset_hash
    return bank


def unit_rms(bank: np.ndarray):
    """(bank / rms, rms): one positive global factor, so each prototype keeps
    its direction and the prototypes keep their relative magnitudes."""
    bank = np.asarray(bank, dtype=np.float64)
    rms = float(np.sqrt(np.mean(bank * bank)))
    if rms == 0.0 or not np.isfinite(rms):
        raise ValueError("cannot rescale an all-zero or non-finite bank")
    return bank / rms, rms


def random_bank(shape, seed=0, scale=1.0) -> np.ndarray:
    """Unclustered initialization used by the random-init ablation."""
    return np.random.default_rng(seed).normal(0.0, scale, size=shape)


def hash_arrays(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()

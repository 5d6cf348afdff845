"""Synthetic bi-temporal scene benchmark.

Each pair shares a smooth value-noise background plus a few static blocks;
a single rectangular change (added, removed or recolored block) is drawn in
one 3x3 grid cell.  Masks are the exact footprint of the change, captions
come from a small template table, and unchanged pairs use a fixed set of
five sentences.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .container import read_container, read_pgm, write_container, write_pgm

GENERATOR_VERSION = "1"
CHANGE_TYPES = ("none", "add_block", "remove_block", "recolor_region")
CELL_NAMES = ("top left", "top", "top right",
              "left", "center", "right",
              "bottom left", "bottom", "bottom right")
NO_CHANGE_SENTENCES = (
    "the two scenes seem identical",
    "the scene is the same as before",
    "there is no difference",
    "no change has occurred",
    "almost nothing has changed",
)
CHANGE_TEMPLATES = {
    "add_block": (
        "a block was added at the {cell}",
        "a new block appears at the {cell}",
        "someone built a block at the {cell}",
        "a block has been added to the {cell}",
        "there is a new block at the {cell}",
    ),
    "remove_block": (
        "a block was removed at the {cell}",
        "a block disappears from the {cell}",
        "someone removed a block at the {cell}",
        "a block has been removed from the {cell}",
        "the block at the {cell} is gone",
    ),
    "recolor_region": (
        "a region was recolored at the {cell}",
        "a region changes color at the {cell}",
        "someone repainted a region at the {cell}",
        "a region has been recolored at the {cell}",
        "the color of the region at the {cell} changed",
    ),
}
# words that identify the change type of a caption
TYPE_KEYWORDS = {
    "none": {"identical", "same", "difference", "nothing", "occurred"},
    "add_block": {"added", "appears", "built", "new"},
    "remove_block": {"removed", "disappears", "gone"},
    "recolor_region": {"recolored", "color", "repainted"},
}
MIN_AREA_RATIO = 0.008
# changed:unchanged proportion of the reference benchmark (6645 vs 2355 pairs)
UNCHANGED_FRACTION = 2355 / 9000
SPLIT_RATIOS = (0.7, 0.1, 0.2)


@dataclass
class SceneConfig:
    size: int = 32
    channels: int = 3
    min_side: int = 4
    max_side: int = 9
    static_blocks: int = 2
    noise: float = 0.0
    reject_small: str = "regenerate"   # or "error"


@dataclass
class ScenePair:
    image1: np.ndarray
    image2: np.ndarray
    mask: np.ndarray
    change_type: str
    location: str | None
    captions: list = field(default_factory=list)
    pair_id: str = ""


class AreaFilterError(ValueError):
    pass


def cell_edges(size: int) -> np.ndarray:
    return np.round(np.linspace(0, size, 4)).astype(int)


def cell_of(row: float, col: float, size: int) -> str:
    edges = cell_edges(size)
    r = int(np.clip(np.searchsorted(edges, row, side="right") - 1, 0, 2))
    c = int(np.clip(np.searchsorted(edges, col, side="right") - 1, 0, 2))
    return CELL_NAMES[3 * r + c]


def mask_centroid_cell(mask: np.ndarray) -> str | None:
    rows, cols = np.nonzero(mask)
    if len(rows) == 0:
        return None
    # pixel centers sit at +0.5
    return cell_of(rows.mean() + 0.5, cols.mean() + 0.5, mask.shape[0])


def area_filter(mask: np.ndarray, change_type: str = "add_block") -> bool:
    """Accept unchanged pairs, and changed pairs covering >= 0.8% of the image."""
    if change_type == "none":
        return True
    m = np.asarray(mask)
    return m.sum() / m.size >= MIN_AREA_RATIO


def _value_noise(rng, size, channels, coarse=5, lo=0.2, hi=0.5):
    grid = rng.uniform(lo, hi, size=(coarse, coarse, channels))
    t = np.linspace(0, coarse - 1, size)
    i0 = np.clip(np.floor(t).astype(int), 0, coarse - 2)
    f = t - i0
    rows = grid[i0] * (1 - f)[:, None, None] + grid[i0 + 1] * f[:, None, None]
    out = rows[:, i0] * (1 - f)[None, :, None] + rows[:, i0 + 1] * f[None, :, None]
    return out


def _bright_color(rng, channels):
    """A color at least 0.25 above the background range in some channel."""
    c = rng.uniform(0.0, 1.0, size=channels)
    c[rng.integers(channels)] = rng.uniform(0.75, 1.0)
    return c


def _rect_in_cell(rng, cell, size, min_side, max_side):
    edges = cell_edges(size)
    r, c = divmod(cell, 3)
    y0, y1 = edges[r], edges[r + 1]
    x0, x1 = edges[c], edges[c + 1]
    h = int(rng.integers(min_side, min(max_side, y1 - y0) + 1))
    w = int(rng.integers(min_side, min(max_side, x1 - x0) + 1))
    top = int(rng.integers(y0, y1 - h + 1))
    left = int(rng.integers(x0, x1 - w + 1))
    return top, left, h, w


def generate_pair(seed, change_type, config: SceneConfig | None = None, pair_id="") -> ScenePair:
    """Render one bi-temporal pair; a pure function of (seed, type, config)."""
    cfg = config or SceneConfig()
    if change_type not in CHANGE_TYPES:
        raise ValueError(f"unknown change type {change_type!r}")
    for attempt in range(100):
        rng = np.random.default_rng([int(seed), attempt])
        pair = _render(rng, change_type, cfg, pair_id)
        if area_filter(pair.mask, change_type):
            return pair
        if cfg.reject_small == "error":
            raise AreaFilterError(f"change covers {pair.mask.mean():.4%} of the image")
    raise AreaFilterError("could not render a change above the area threshold")


def _render(rng, change_type, cfg: SceneConfig, pair_id) -> ScenePair:
    S, C = cfg.size, cfg.channels
    bg = _value_noise(rng, S, C)
    cells = rng.permutation(9)
    change_cell = int(cells[0])
    img1 = bg.copy()
    for cell in cells[1:1 + cfg.static_blocks]:
        t, l, h, w = _rect_in_cell(rng, int(cell), S, cfg.min_side, cfg.max_side)
        img1[t:t + h, l:l + w] = _bright_color(rng, C)
    img2 = img1.copy()
    mask = np.zeros((S, S), dtype=np.uint8)
    location = None
    if change_type != "none":
        t, l, h, w = _rect_in_cell(rng, change_cell, S, cfg.min_side, cfg.max_side)
        color = _bright_color(rng, C)
        if change_type == "add_block":
            img2[t:t + h, l:l + w] = color
        elif change_type == "remove_block":
            img1[t:t + h, l:l + w] = color
        else:
            other = _bright_color(rng, C)
            k = int(np.argmax(np.abs(other - color)))
            if abs(other[k] - color[k]) < 0.3:
                other[k] = color[k] - 0.5 if color[k] > 0.5 else color[k] + 0.5
            img1[t:t + h, l:l + w] = color
            img2[t:t + h, l:l + w] = other
        mask[t:t + h, l:l + w] = 1
        location = mask_centroid_cell(mask)
    if cfg.noise > 0:
        img1 = img1 + rng.normal(0, cfg.noise, img1.shape)
        img2 = img2 + rng.normal(0, cfg.noise, img2.shape)
    img1 = np.clip(img1, 0.0, 1.0).astype(np.float32)
    img2 = np.clip(img2, 0.0, 1.0).astype(np.float32)
    pair = ScenePair(img1, img2, mask, change_type, location, pair_id=pair_id)
    pair.captions = [render_caption(pair, s) for s in range(5)]
    return pair


def render_caption(pair: ScenePair, style: int) -> str:
    if not 0 <= style < 5:
        raise ValueError("caption style must be in 0..4")
    return captions_for(pair.change_type, pair.location)[style]


def captions_for(change_type: str, location: str | None) -> list[str]:
    """The five reference captions of a (change type, cell) combination."""
    if change_type == "none":
        return list(NO_CHANGE_SENTENCES)
    if location not in CELL_NAMES:
        raise ValueError(f"unknown cell {location!r}")
    return [tpl.format(cell=location) for tpl in CHANGE_TEMPLATES[change_type]]


AUGMENTATIONS = ("dihedral", "swap")
_SWAPPED = {"none": "none", "add_block": "remove_block", "remove_block": "add_block",
            "recolor_region": "recolor_region"}


def augment_sample(img1, img2, mask, change_type, rng, ops=AUGMENTATIONS):
    """Label-preserving random transform of one pair.

    ``dihedral`` applies one of the 8 square symmetries to both images and
    the mask; ``swap`` exchanges the phases (an added block becomes a removed
    one).  Returns (img1, img2, mask, change_type, captions) with captions
    re-rendered for the transformed location and type.
    """
    unknown = set(ops) - set(AUGMENTATIONS)
    if unknown:
        raise ValueError(f"unknown augmentation(s) {sorted(unknown)}")
    if "dihedral" in ops:
        k, flip = int(rng.integers(4)), bool(rng.integers(2))

        def tf(a):
            a = np.rot90(a, k, axes=(0, 1))
            return a[:, ::-1] if flip else a
        img1, img2, mask = tf(img1), tf(img2), tf(mask)
    if "swap" in ops and rng.integers(2):
        img1, img2 = img2, img1
        change_type = _SWAPPED[change_type]
    location = mask_centroid_cell(mask) if change_type != "none" else None
    return (np.ascontiguousarray(img1), np.ascontiguousarray(img2), np.ascontiguousarray(mask),
            change_type, captions_for(change_type, location))


def caption_vocabulary() -> list[str]:
    words = set()
    for s in NO_CHANGE_SENTENCES:
        words.update(s.split())
    for templates in CHANGE_TEMPLATES.values():
        for tpl in templates:
            for cell in CELL_NAMES:
                words.update(tpl.format(cell=cell).split())
    return sorted(words)


def change_type_of_caption(words) -> str | None:
    """Change type named by a caption, or None if absent or ambiguous."""
    words = set(words.split() if isinstance(words, str) else words)
    hits = [t for t, kw in TYPE_KEYWORDS.items() if words & kw]
    return hits[0] if len(hits) == 1 else None


# -- dataset on disk --------------------------------------------------------------

def type_counts(n, unchanged_fraction=UNCHANGED_FRACTION, mix=None):
    """Deterministic per-type counts summing to n."""
    if mix is None:
        n_none = int(round(n * unchanged_fraction))
        rest = n - n_none
        base, extra = divmod(rest, 3)
        return {"none": n_none, "add_block": base + (extra > 0),
                "remove_block": base + (extra > 1), "recolor_region": base}
    total = sum(mix.values())
    raw = {t: n * mix.get(t, 0.0) / total for t in CHANGE_TYPES}
    counts = {t: int(np.floor(v)) for t, v in raw.items()}
    order = sorted(CHANGE_TYPES, key=lambda t: (-(raw[t] - counts[t]), CHANGE_TYPES.index(t)))
    for t in order[: n - sum(counts.values())]:
        counts[t] += 1
    return counts


def split_sizes(n):
    n_train = int(round(n * SPLIT_RATIOS[0]))
    n_val = int(round(n * SPLIT_RATIOS[1]))
    return n_train, n_val, n - n_train - n_val


def build_dataset(out_dir, n_pairs, seed=0, mix=None, config: SceneConfig | None = None) -> dict:
    """Generate pairs, write them under ``out_dir`` and return the manifest."""
    if n_pairs < 10:
        raise ValueError("need at least 10 pairs")
    cfg = config or SceneConfig()
    counts = type_counts(n_pairs, mix=mix)
    rng = np.random.default_rng(seed)
    types = [t for t in CHANGE_TYPES for _ in range(counts[t])]
    types = [types[i] for i in rng.permutation(n_pairs)]
    n_train, n_val, _ = split_sizes(n_pairs)
    split_of = ["train"] * n_train + ["val"] * n_val + ["test"] * (n_pairs - n_train - n_val)
    split_of = [split_of[i] for i in rng.permutation(n_pairs)]
    pair_seeds = np.random.SeedSequence(seed).generate_state(n_pairs, dtype=np.uint64)

    os.makedirs(os.path.join(out_dir, "pairs"), exist_ok=True)
    index = []
    width = max(4, len(str(n_pairs - 1)))
    for i, ctype in enumerate(types):
        pid = f"{i:0{width}d}"
        pair = generate_pair(int(pair_seeds[i]), ctype, cfg, pid)
        d = os.path.join(out_dir, "pairs", pid)
        os.makedirs(d, exist_ok=True)
        write_container(os.path.join(d, "t1.ptn"), pair.image1)
        write_container(os.path.join(d, "t2.ptn"), pair.image2)
        write_pgm(os.path.join(d, "mask.pgm"), pair.mask)
        with open(os.path.join(d, "captions.txt"), "w", encoding="utf-8") as fh:
            fh.write("\n".join(pair.captions) + "\n")
        index.append({"id": pid, "split": split_of[i], "change_type": ctype,
                      "location": pair.location, "dir": f"pairs/{pid}"})
    manifest = {
        "generator_version": GENERATOR_VERSION,
        "seed": seed,
        "n_pairs": n_pairs,
        "config": vars(cfg),
        "mix": mix,
        "split_sizes": {s: split_of.count(s) for s in ("train", "val", "test")},
        "type_counts": counts,
        "pairs": index,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return manifest


def manifest_hash(data_dir) -> str:
    with open(os.path.join(data_dir, "manifest.json"), "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


@dataclass
class Dataset:
    ids: list
    images1: np.ndarray   # [S, H, W, C] float32
    images2: np.ndarray
    masks: np.ndarray     # [S, H, W] uint8
    captions: list        # S lists of reference strings
    change_types: list
    locations: list
    splits: list

    def __len__(self):
        return len(self.ids)

    def subset(self, idx) -> "Dataset":
        idx = list(idx)
        return Dataset([self.ids[i] for i in idx], self.images1[idx], self.images2[idx],
                       self.masks[idx], [self.captions[i] for i in idx],
                       [self.change_types[i] for i in idx], [self.locations[i] for i in idx],
                       [self.splits[i] for i in idx])

    def split(self, name) -> "Dataset":
        if name not in ("train", "val", "test", "all"):
            raise ValueError(f"unknown split {name!r}")
        if name == "all":
            return self
        return self.subset(i for i, s in enumerate(self.splits) if s == name)


def load_dataset(data_dir) -> Dataset:
    path = os.path.join(data_dir, "manifest.json")
    with open(path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    ids, im1, im2, masks, caps, types, locs, splits = [], [], [], [], [], [], [], []
    for rec in manifest["pairs"]:
        d = os.path.join(data_dir, rec["dir"])
        im1.append(read_container(os.path.join(d, "t1.ptn")))
        im2.append(read_container(os.path.join(d, "t2.ptn")))
        masks.append(read_pgm(os.path.join(d, "mask.pgm")))
        with open(os.path.join(d, "captions.txt"), encoding="utf-8") as fh:
            caps.append([ln.strip() for ln in fh if ln.strip()])
        ids.append(rec["id"])
        types.append(rec["change_type"])
        locs.append(rec["location"])
        splits.append(rec["split"])
    return Dataset(ids, np.stack(im1), np.stack(im2), np.stack(masks), caps, types, locs, splits)


def dataset_from_pairs(pairs, split="train") -> Dataset:
    """In-memory dataset, for tests and quick experiments."""
    return Dataset([p.pair_id for p in pairs], np.stack([p.image1 for p in pairs]),
                   np.stack([p.image2 for p in pairs]), np.stack([p.mask for p in pairs]),
                   [list(p.captions) for p in pairs], [p.change_type for p in pairs],
                   [p.location for p in pairs], [split] * len(pairs))

"""Desk-scale parts-annotated data.

The synthetic generator draws each class as a signature pair of part glyphs
(disc, ring, cross, ...) placed at random non-overlapping positions over a
textured background, plus distractor glyphs shared by every class.  All
glyphs share one near-gray intensity family and have comparable pixel mass,
so classification genuinely requires localizing shapes rather than reading a
color or brightness histogram.  Per-pixel part masks ground-truth which glyph
covers each pixel (0 = background), which is what makes the consistency and
stability metrics measurable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .tensor import load_tensors, save_tensors

GLYPH_FRACTION = 0.30          # glyph box side as a fraction of image side
MAX_CLASSES = 8                # one signature glyph renderer per class, ring-paired
N_DISTRACTOR_TYPES = 2


@dataclass
class PartsDataset:
    images: np.ndarray            # [N, C, H, W] float64 in [0, 1]
    labels: np.ndarray            # [N] int
    part_masks: np.ndarray        # [N, H, W] int, 0 = background
    splits: dict                  # {"train": [...], "val": [...], "test": [...]}
    manifest: dict

    @property
    def num_classes(self) -> int:
        return int(self.manifest["num_classes"])

    @property
    def image_hw(self) -> tuple:
        return self.images.shape[2:]

    def subset(self, split: str):
        idx = np.asarray(self.splits[split], dtype=int)
        return self.images[idx], self.labels[idx], self.part_masks[idx]


# ---------------------------------------------------------------------------
# glyph renderers: binary masks on a g x g box
# ---------------------------------------------------------------------------

def _grid(g):
    return np.meshgrid(np.arange(g), np.arange(g), indexing="ij")


def _disc(g):
    i, j = _grid(g)
    c = (g - 1) / 2
    return (i - c) ** 2 + (j - c) ** 2 <= (0.46 * g) ** 2


def _ring(g):
    i, j = _grid(g)
    c = (g - 1) / 2
    r2 = (i - c) ** 2 + (j - c) ** 2
    return (r2 <= (0.5 * g) ** 2) & (r2 >= (0.3 * g) ** 2)


def _cross(g):
    i, j = _grid(g)
    c = (g - 1) / 2
    t = 0.17 * g
    return (np.abs(i - c) <= t) | (np.abs(j - c) <= t)


def _diag(g):
    i, j = _grid(g)
    t = 0.16 * g
    return (np.abs(i - j) <= t) | (np.abs(i + j - (g - 1)) <= t)


def _frame(g):
    i, j = _grid(g)
    edge = np.minimum(np.minimum(i, j), np.minimum(g - 1 - i, g - 1 - j))
    return edge <= 0.18 * g


def _tri(g):
    i, j = _grid(g)
    c = (g - 1) / 2
    return i >= 2.0 * np.abs(j - c) - 1


def _checker(g):
    i, j = _grid(g)
    h = max(g // 2, 1)
    return ((i // h) + (j // h)) % 2 == 0


def _hbar(g):
    i, j = _grid(g)
    t = 0.18 * g
    c = (g - 1) / 2
    return (j <= 2 * t) | (j >= g - 1 - 2 * t) | (np.abs(i - c) <= t)


def _stripes(g):
    i, _ = _grid(g)
    period = max(int(0.34 * g), 2)
    return (i % period) < max(int(0.17 * g), 1)


def _dots(g):
    i, j = _grid(g)
    out = np.zeros((g, g), dtype=bool)
    r2 = (0.16 * g) ** 2
    for ci, cj in [(0.27, 0.27), (0.27, 0.73), (0.73, 0.27), (0.73, 0.73)]:
        out |= (i - ci * (g - 1)) ** 2 + (j - cj * (g - 1)) ** 2 <= r2
    return out


GLYPH_RENDERERS = [_disc, _ring, _cross, _diag, _frame, _tri, _checker, _hbar,
                   _stripes, _dots]


def signature_pairs(num_classes: int) -> list:
    """Class -> (glyph a, glyph b), ring-shared so single-part detection is
    never sufficient (0-based glyph type ids)."""
    s = max(num_classes, 3)
    return [(c % s, (c + 1) % s) for c in range(num_classes)]


def _textured_background(rng, c, h, w):
    base = rng.uniform(0.0, 1.0, size=(h, w))
    for _ in range(2):  # cheap box blur for smooth blotches
        base = (base + np.roll(base, 1, 0) + np.roll(base, -1, 0)
                + np.roll(base, 1, 1) + np.roll(base, -1, 1)) / 5.0
    lo = rng.uniform(0.18, 0.28)
    hi = lo + rng.uniform(0.12, 0.2)
    base = lo + (base - base.min()) / max(np.ptp(base), 1e-9) * (hi - lo)
    return np.repeat(base[None], c, axis=0)


def _place_glyphs(rng, glyph_types, g, h, w):
    """Non-overlapping top-left corners for each requested glyph, margin 1px."""
    placed = []
    for gt in glyph_types:
        for _ in range(200):
            y = int(rng.integers(1, h - g - 1))
            x = int(rng.integers(1, w - g - 1))
            if all(abs(y - py) >= g + 1 or abs(x - px) >= g + 1 for py, px, _ in placed):
                placed.append((y, x, gt))
                break
        else:
            return None
    return placed


def _render_image(rng, label, pairs, s, c, h, w, glyph_fraction=GLYPH_FRACTION):
    g = max(int(round(glyph_fraction * h)), 5)
    img = _textured_background(rng, c, h, w)
    mask = np.zeros((h, w), dtype=np.int64)

    n_distract = int(rng.integers(1, N_DISTRACTOR_TYPES + 1))
    distract = [s + int(rng.integers(0, N_DISTRACTOR_TYPES)) for _ in range(n_distract)]
    glyph_types = list(pairs[label]) + distract

    placed = None
    while placed is None:
        placed = _place_glyphs(rng, glyph_types, g, h, w)
        if placed is None and len(glyph_types) > 2:
            glyph_types = glyph_types[:-1]   # drop a distractor if the layout is too tight

    for y, x, gt in placed:
        shape = GLYPH_RENDERERS[gt](g)
        level = rng.uniform(0.72, 0.95)
        tint = level * rng.uniform(0.92, 1.0, size=c)
        img[:, y:y + g, x:x + g][:, shape] = tint[:, None]
        mask[y:y + g, x:x + g][shape] = gt + 1   # part ids are 1-based
    return np.clip(img, 0.0, 1.0), mask


def split_train_val(indices, labels, fraction: float = 0.9, seed: int = 0):
    """Stratified 90/10 partition of a training pool, deterministic per seed."""
    indices = np.asarray(indices)
    labels = np.asarray(labels)
    rng = np.random.default_rng([seed, 0x5117])
    train, val = [], []
    for c in np.unique(labels[indices]):
        pool = indices[labels[indices] == c]
        pool = pool[rng.permutation(len(pool))]
        n_val = max(1, int(round(len(pool) * (1.0 - fraction))))
        val.extend(pool[:n_val].tolist())
        train.extend(pool[n_val:].tolist())
    return sorted(train), sorted(val)


def generate_synthetic(num_classes: int, n_per_class: int, image_size: int = 64,
                       seed: int = 0, test_per_class: int | None = None,
                       channels: int = 3, glyph_fraction: float = GLYPH_FRACTION) -> PartsDataset:
    """Synthetic parts dataset with a train pool (split 90/10 into train/val)
    plus a disjoint test split."""
    if num_classes < 2:
        raise ConfigError(f"need at least 2 classes, got {num_classes}")
    if num_classes > MAX_CLASSES:
        raise ConfigError(f"synthetic generator supports at most {MAX_CLASSES} classes")
    if n_per_class < 2:
        raise ConfigError("need at least 2 pool images per class")
    if test_per_class is None:
        test_per_class = max(1, n_per_class // 4)

    pairs = signature_pairs(num_classes)
    s = max(num_classes, 3)
    n_pool = num_classes * n_per_class
    n_test = num_classes * test_per_class
    n_total = n_pool + n_test

    labels = np.concatenate([np.repeat(np.arange(num_classes), n_per_class),
                             np.repeat(np.arange(num_classes), test_per_class)])
    images = np.zeros((n_total, channels, image_size, image_size))
    masks = np.zeros((n_total, image_size, image_size), dtype=np.int64)
    for i in range(n_total):
        rng = np.random.default_rng([seed, 0x10A6E, i])
        images[i], masks[i] = _render_image(rng, int(labels[i]), pairs, s,
                                            channels, image_size, image_size,
                                            glyph_fraction=glyph_fraction)

    pool_idx = np.arange(n_pool)
    train_idx, val_idx = split_train_val(pool_idx, labels, fraction=0.9, seed=seed)
    splits = {"train": train_idx, "val": val_idx,
              "test": list(range(n_pool, n_total))}
    manifest = {
        "num_classes": num_classes,
        "n_per_class": n_per_class,
        "test_per_class": test_per_class,
        "image_size": image_size,
        "channels": channels,
        "glyph_fraction": glyph_fraction,
        "seed": seed,
        "part_names": [GLYPH_RENDERERS[i].__name__.lstrip("_") for i in range(s + N_DISTRACTOR_TYPES)],
        "signature_pairs": [[a + 1, b + 1] for a, b in pairs],   # 1-based part ids
        "num_parts": s + N_DISTRACTOR_TYPES,
    }
    return PartsDataset(images=images, labels=labels, part_masks=masks,
                        splits=splits, manifest=manifest)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save(ds: PartsDataset, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    save_tensors(path / "images.ppxt", [ds.images])
    save_tensors(path / "masks.ppxt", [ds.part_masks.astype(np.float64)])
    save_tensors(path / "labels.ppxt", [ds.labels.astype(np.float64)])
    (path / "splits.json").write_text(json.dumps(ds.splits, sort_keys=True))
    (path / "manifest.json").write_text(json.dumps(ds.manifest, sort_keys=True, indent=1))


def load(path) -> PartsDataset:
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"no dataset manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    images = load_tensors(path / "images.ppxt", expected=1)[0]
    masks = load_tensors(path / "masks.ppxt", expected=1)[0].astype(np.int64)
    labels = load_tensors(path / "labels.ppxt", expected=1)[0].astype(np.int64)
    splits = json.loads((path / "splits.json").read_text())
    if images.shape[0] != masks.shape[0] or images.shape[0] != labels.shape[0]:
        raise DataError(f"record counts disagree: {images.shape[0]} images, "
                        f"{masks.shape[0]} masks, {labels.shape[0]} labels")
    if images.shape[2:] != masks.shape[1:]:
        raise DataError(f"image spatial size {images.shape[2:]} != mask size {masks.shape[1:]}")
    return PartsDataset(images=images, labels=labels, part_masks=masks,
                        splits=splits, manifest=manifest)

"""Prototype layer: per-location similarity between learned prototypes and
feature maps, in three variants (rigid L2, rigid cosine, deformable cosine),
plus projection of prototypes onto their most similar training patches.

Cosine variants keep every prototype part vector at 2-norm 1/sqrt(Hp*Wp), so
the similarity of a prototype to a group of equally-normalized latent vectors
is just the sum of partwise dot products and lands in [-1, 1].
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, ProjectionError
from .tensor import (Tensor, add, bilinear_sample, concat, conv2d, log, matmul, mean_, no_grad,
                     relu, renormalize, reshape, stack, topk, transpose)

L2_EPSILON = 1e-4


class Metric(enum.Enum):
    L2 = "l2"
    COSINE = "cosine"
    DEFORMABLE_COSINE = "deformable_cosine"


@dataclass
class ProjectionRecord:
    """Where a prototype came from after projection."""
    prototype_index: int
    image_index: int                 # position within the scanned training set
    latent_location: list            # per part: (h, w); fractional for deformable
    pixel_bbox: tuple                # (y0, x0, y1, x1) in input pixels, end-exclusive
    similarity_at_projection: float
    patch_embedding: np.ndarray      # exactly what got written into the bank

    def to_json(self) -> dict:
        return {
            "prototype_index": self.prototype_index,
            "image_index": self.image_index,
            "latent_location": [list(map(float, loc)) for loc in self.latent_location],
            "pixel_bbox": list(map(int, self.pixel_bbox)),
            "similarity_at_projection": self.similarity_at_projection,
            "patch_embedding": self.patch_embedding.reshape(-1).tolist(),
            "patch_shape": list(self.patch_embedding.shape),
        }

    @classmethod
    def from_json(cls, d: dict) -> "ProjectionRecord":
        return cls(
            prototype_index=d["prototype_index"],
            image_index=d["image_index"],
            latent_location=[tuple(loc) for loc in d["latent_location"]],
            pixel_bbox=tuple(d["pixel_bbox"]),
            similarity_at_projection=d["similarity_at_projection"],
            patch_embedding=np.array(d["patch_embedding"], dtype=np.float64).reshape(d["patch_shape"]),
        )


@dataclass
class PrototypeBank:
    protos: Tensor                   # [P, D, Hp, Wp]
    class_of: np.ndarray             # [P] class id per prototype
    metric: Metric
    k_for_topk: int = 1
    offset_weight: Tensor = None     # [2*Hp*Wp, D, 3, 3], deformable only
    offset_bias: Tensor = None
    sources: list = field(default_factory=list)   # ProjectionRecord or None per prototype

    @property
    def num_prototypes(self) -> int:
        return self.protos.data.shape[0]

    @property
    def part_hw(self) -> tuple:
        return self.protos.data.shape[2:]

    @property
    def part_norm(self) -> float:
        hp, wp = self.part_hw
        return 1.0 / np.sqrt(hp * wp)

    @property
    def num_classes(self) -> int:
        return int(self.class_of.max()) + 1

    def prototypes_of_class(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.class_of == c)


@dataclass
class SimilarityMap:
    values: Tensor                   # [B, P, H'', W'']
    pooled: Tensor                   # [B, P], mean of the k largest per (b, p)


def build_bank(num_classes: int, per_class: int, latent_dim: int, metric: Metric,
               part_hw: tuple = (1, 1), k_for_topk: int = 1, seed: int = 0) -> PrototypeBank:
    """Fresh bank with per-class prototype assignment and variant-legal init."""
    metric = Metric(metric)
    hp, wp = part_hw
    if metric is Metric.L2 and (hp, wp) != (1, 1):
        raise ConfigError(f"L2 prototypes must be 1x1, got {hp}x{wp}")
    if per_class < 1:
        raise ConfigError(f"need at least one prototype per class, got {per_class}")
    p = num_classes * per_class
    rng = np.random.default_rng([seed, 0x9807])
    protos = rng.uniform(0.0, 1.0, size=(p, latent_dim, hp, wp))
    class_of = np.repeat(np.arange(num_classes), per_class)
    bank = PrototypeBank(
        protos=Tensor(protos, requires_grad=True),
        class_of=class_of,
        metric=metric,
        k_for_topk=int(k_for_topk),
        sources=[None] * p,
    )
    if metric is not Metric.L2:
        renorm_bank_(bank)
    if metric is Metric.DEFORMABLE_COSINE:
        # zero-initialized offsets: training starts at the rigid reduction
        bank.offset_weight = Tensor(np.zeros((2 * hp * wp, latent_dim, 3, 3)), requires_grad=True)
        bank.offset_bias = Tensor(np.zeros(2 * hp * wp), requires_grad=True)
    return bank


def renorm_bank_(bank: PrototypeBank) -> None:
    """Snap every prototype part vector back onto its norm sphere (no tape)."""
    if bank.metric is Metric.L2:
        return
    p, d, hp, wp = bank.protos.data.shape
    flat = bank.protos.data.transpose(0, 2, 3, 1).reshape(-1, d)
    norms = np.linalg.norm(flat, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    flat = flat * (bank.part_norm / norms)
    bank.protos.data = flat.reshape(p, hp, wp, d).transpose(0, 3, 1, 2).copy()


def parameter_groups(bank: PrototypeBank) -> dict:
    groups = {"prototypes": [bank.protos], "offsets": []}
    if bank.offset_weight is not None:
        groups["offsets"] = [bank.offset_weight, bank.offset_bias]
    return groups


def _normalize_featmap(feat: Tensor, target: float):
    """Renormalize every latent vector of [B,D,H,W] to ``target`` norm."""
    b, d, h, w = feat.data.shape
    rows = reshape(transpose(feat, (0, 2, 3, 1)), (b * h * w, d))
    normed, flags = renormalize(rows, target)
    back = transpose(reshape(normed, (b, h, w, d)), (0, 3, 1, 2))
    return back, flags.reshape(b, h, w)


def similarity_rigid_l2(feat: Tensor, bank: PrototypeBank) -> Tensor:
    """log((d^2 + 1) / (d^2 + eps)) against 1x1 prototypes, per location."""
    if bank.metric is not Metric.L2:
        raise ConfigError(f"bank metric is {bank.metric}, expected L2")
    _check_dim(feat, bank)
    f2 = (feat * feat).sum(axis=1, keepdims=True)            # [B,1,H,W]
    fp = conv2d(feat, bank.protos)                           # [B,P,H,W]
    p2 = (bank.protos * bank.protos).sum(axis=(1, 2, 3))     # [P]
    d2 = relu(add(f2 - fp * 2.0, reshape(p2, (1, p2.data.shape[0], 1, 1))))
    return log(d2 + 1.0) - log(d2 + L2_EPSILON)


def similarity_rigid_cosine(feat: Tensor, bank: PrototypeBank) -> Tensor:
    """Sum of partwise dot products of equally-normalized vectors.

    Equal to the cosine of the concatenated part vectors; valid-convolution
    extent, so the output grid is (H'-Hp+1) x (W'-Wp+1).
    """
    if bank.metric is not Metric.COSINE:
        raise ConfigError(f"bank metric is {bank.metric}, expected COSINE")
    _check_dim(feat, bank)
    zhat, _ = _normalize_featmap(feat, bank.part_norm)
    return conv2d(zhat, bank.protos)


def similarity_deformable(feat: Tensor, bank: PrototypeBank) -> Tensor:
    """Cosine similarity against bilinearly-sampled, offset-deformed patches.

    Offsets come from a 3x3 convolution of the feature map (2 channels per
    prototype part, (dy, dx) order), are shared by all prototypes, and are
    read at the top-left-aligned center location.  Deformed coordinates clamp
    at the feature-map border.
    """
    if bank.metric is not Metric.DEFORMABLE_COSINE:
        raise ConfigError(f"bank metric is {bank.metric}, expected DEFORMABLE_COSINE")
    _check_dim(feat, bank)
    bsz, d, h, w = feat.data.shape
    hp, wp = bank.part_hw
    hh, ww = h - hp + 1, w - wp + 1
    offsets = add(conv2d(feat, bank.offset_weight, padding=1),
                  reshape(bank.offset_bias, (1, 2 * hp * wp, 1, 1)))
    offsets = offsets[:, :, :hh, :ww]

    base_y, base_x = np.meshgrid(np.arange(hh, dtype=np.float64),
                                 np.arange(ww, dtype=np.float64), indexing="ij")
    pmat = reshape(transpose(reshape(bank.protos, (bank.num_prototypes, d, hp * wp)),
                             (0, 2, 1)), (bank.num_prototypes, hp * wp * d))

    per_image = []
    for b in range(bsz):
        ys, xs = [], []
        for i in range(hp):
            for j in range(wp):
                m = i * wp + j
                ys.append(reshape(add(offsets[b, 2 * m], base_y + float(i)), (hh * ww,)))
                xs.append(reshape(add(offsets[b, 2 * m + 1], base_x + float(j)), (hh * ww,)))
        coords = stack([concat(ys, axis=0), concat(xs, axis=0)], axis=1)  # [Hp*Wp*L, 2]
        sampled = bilinear_sample(feat[b], coords)
        zhat, _ = renormalize(sampled, bank.part_norm)
        zmat = reshape(transpose(reshape(zhat, (hp * wp, hh * ww, d)), (0, 2, 1)),
                       (hp * wp * d, hh * ww))
        per_image.append(reshape(matmul(pmat, zmat), (1, bank.num_prototypes, hh, ww)))
    return concat(per_image, axis=0)


def similarity_values(feat: Tensor, bank: PrototypeBank) -> Tensor:
    if bank.metric is Metric.L2:
        return similarity_rigid_l2(feat, bank)
    if bank.metric is Metric.COSINE:
        return similarity_rigid_cosine(feat, bank)
    return similarity_deformable(feat, bank)


def topk_pool(values: Tensor, k: int) -> Tensor:
    """Mean of the k largest entries of each [H'',W''] map; k=1 is global max."""
    b, p, hh, ww = values.data.shape
    if not 1 <= k <= hh * ww:
        raise ConfigError(f"k_for_topk={k} out of range for a {hh}x{ww} similarity map")
    flat = reshape(values, (b, p, hh * ww))
    vals, _ = topk(flat, k)
    return mean_(vals, axis=-1)


def similarity_map(feat: Tensor, bank: PrototypeBank) -> SimilarityMap:
    values = similarity_values(feat, bank)
    return SimilarityMap(values=values, pooled=topk_pool(values, bank.k_for_topk))


def _check_dim(feat: Tensor, bank: PrototypeBank) -> None:
    if feat.data.ndim != 4:
        raise DimensionError(f"similarity expects [B,D,H,W] features, got {feat.data.shape}")
    if feat.data.shape[1] != bank.protos.data.shape[1]:
        raise DimensionError(
            f"feature dim {feat.data.shape} does not match prototype dim {bank.protos.data.shape}")


# ---------------------------------------------------------------------------
# projection
# ---------------------------------------------------------------------------

def latent_cell_bbox(h: int, w: int, part_hw: tuple, latent_hw: tuple, image_hw: tuple) -> tuple:
    """Map a latent-cell box to input pixels by pure upsampling."""
    hp, wp = part_hw
    hl, wl = latent_hw
    hi, wi = image_hw
    return (int(h) * hi // hl, int(w) * wi // wl,
            int(h + hp) * hi // hl, int(w + wp) * wi // wl)


def project(bank: PrototypeBank, images: np.ndarray, labels: np.ndarray, embed_fn,
            image_hw: tuple = None, batch_size: int = 32) -> list:
    """Replace each prototype with its most similar same-class training patch.

    ``embed_fn`` maps an image batch to latent features.  The scan is
    deterministic: ties break toward the lowest (image_index, h, w).  Returns
    the new ProjectionRecords (also stored on the bank).
    """
    n = len(images)
    if n == 0:
        raise ProjectionError("cannot project onto an empty training set")
    labels = np.asarray(labels)
    for c in np.unique(bank.class_of):
        if not np.any(labels == c):
            raise ProjectionError(f"class {c} has no training images to project onto")
    if image_hw is None:
        image_hw = images.shape[2:]

    p = bank.num_prototypes
    hp, wp = bank.part_hw
    best_val = np.full(p, -np.inf)
    best_img = np.full(p, -1, dtype=int)
    best_loc = np.zeros((p, 2), dtype=int)

    with no_grad():
        feats = []
        for start in range(0, n, batch_size):
            feats.append(embed_fn(images[start:start + batch_size]).data)
        feats = np.concatenate(feats, axis=0)

        for start in range(0, n, batch_size):
            vals_b = similarity_values(Tensor(feats[start:start + batch_size]), bank).data
            for bi in range(vals_b.shape[0]):
                idx = start + bi
                vals = vals_b[bi]                           # [P, H'', W'']
                for pi in np.flatnonzero(bank.class_of == labels[idx]):
                    flat = vals[pi].reshape(-1)
                    loc = int(np.argmax(flat))              # first max: lowest (h, w)
                    if flat[loc] > best_val[pi]:            # strict: earliest image wins ties
                        best_val[pi] = flat[loc]
                        best_img[pi] = idx
                        best_loc[pi] = divmod(loc, vals[pi].shape[1])

        latent_hw = feats.shape[2:]
        records = []
        new_protos = bank.protos.data.copy()
        for pi in range(p):
            h, w = (int(v) for v in best_loc[pi])
            patch, part_locs = _extract_patch(bank, feats[best_img[pi]], h, w)
            new_protos[pi] = patch
            rec = ProjectionRecord(
                prototype_index=pi,
                image_index=int(best_img[pi]),
                latent_location=part_locs,
                pixel_bbox=latent_cell_bbox(h, w, (hp, wp), latent_hw, image_hw),
                similarity_at_projection=float(best_val[pi]),
                patch_embedding=patch.copy(),
            )
            records.append(rec)

    bank.protos.data = new_protos
    bank.sources = records
    return records


def _extract_patch(bank: PrototypeBank, feat: np.ndarray, h: int, w: int):
    """The latent patch a prototype becomes when projected at center (h, w)."""
    hp, wp = bank.part_hw
    d = feat.shape[0]
    if bank.metric is Metric.L2:
        return feat[:, h:h + hp, w:w + wp].copy(), [(h, w)]
    if bank.metric is Metric.COSINE:
        patch = feat[:, h:h + hp, w:w + wp].transpose(1, 2, 0).reshape(-1, d)
        normed, _ = renormalize(Tensor(patch), bank.part_norm)
        locs = [(int(h + i), int(w + j)) for i in range(hp) for j in range(wp)]
        return normed.data.reshape(hp, wp, d).transpose(2, 0, 1).copy(), locs
    # deformable: sample at the offset-deformed fractional positions
    feat_t = Tensor(feat[None])
    offsets = (conv2d(feat_t, bank.offset_weight, padding=1)
               + reshape(bank.offset_bias, (1, -1, 1, 1))).data[0]
    coords, locs = [], []
    for i in range(hp):
        for j in range(wp):
            m = i * wp + j
            y = float(h + i + offsets[2 * m, h, w])
            x = float(w + j + offsets[2 * m + 1, h, w])
            coords.append((y, x))
            locs.append((y, x))
    sampled = bilinear_sample(Tensor(feat), coords)
    normed, _ = renormalize(sampled, bank.part_norm)
    return normed.data.reshape(hp, wp, d).transpose(2, 0, 1).copy(), locs


def prototype_metadata(bank: PrototypeBank) -> list:
    """One row per prototype; source fields are None before first projection."""
    rows = []
    for pi in range(bank.num_prototypes):
        rec = bank.sources[pi] if bank.sources else None
        rows.append({
            "prototype_index": pi,
            "class": int(bank.class_of[pi]),
            "source_image": rec.image_index if rec else None,
            "pixel_bbox": list(rec.pixel_bbox) if rec else None,
            "similarity_at_projection": rec.similarity_at_projection if rec else None,
        })
    return rows

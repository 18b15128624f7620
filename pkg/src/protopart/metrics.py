"""Interpretability metrics and sweep objectives.

Sparsity is closed-form in the model's prototype geometry.  Stability and
consistency are operational: both map a prototype's argmax latent cell to the
center pixel of its upsampled box and look up the ground-truth part mask
there (background counts as a part, so the lookup is total).  Stability asks
whether that part assignment survives Gaussian input noise; consistency asks
whether one prototype keeps hitting the same part across its class's images.

Every metric lands in [0, 1].  Noise draws are keyed by (seed, image index),
so evaluation order and thread count cannot change any result.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .prototypes import latent_cell_bbox, similarity_values
from .tensor import no_grad

STABILITY_SIGMA = 0.05
CONSISTENCY_TAU = 0.8


@dataclass
class MetricsReport:
    v_acc: float
    v_sparse: float
    v_stab: float
    v_consist: float
    proto_score: float
    obj_acc: float
    obj_aps: float
    epoch: int = -1
    split: str = "val"

    def to_json(self) -> dict:
        return {"v_acc": self.v_acc, "v_sparse": self.v_sparse, "v_stab": self.v_stab,
                "v_consist": self.v_consist, "proto_score": self.proto_score,
                "obj_acc": self.obj_acc, "obj_aps": self.obj_aps,
                "epoch": self.epoch, "split": self.split}


def sparsity(num_classes: int, latent_h: int, latent_w: int,
             num_prototypes: int, part_h: int, part_w: int) -> float:
    """(K + K/(H'W')) / (P + P*Hp*Wp/(H'W')): 1.0 for one 1x1 prototype per class."""
    if min(num_classes, latent_h, latent_w, num_prototypes, part_h, part_w) < 1:
        raise ContractError("sparsity arguments must all be >= 1")
    if num_prototypes < num_classes:
        raise ContractError(
            f"a model has at least one prototype per class ({num_prototypes} < {num_classes})")
    hw = latent_h * latent_w
    return (num_classes + num_classes / hw) / (
        num_prototypes + num_prototypes * part_h * part_w / hw)


def proto_score(v_sparse: float, v_consist: float, v_stab: float) -> float:
    return (v_sparse + v_consist + v_stab) / 3.0


def objective(kind: str, v_acc: float, score: float) -> float:
    if kind == "acc":
        return v_acc
    if kind == "aps":
        return v_acc * score
    raise ContractError(f"unknown objective kind {kind!r}; expected 'acc' or 'aps'")


def accuracy(model, images: np.ndarray, labels: np.ndarray, batch_size: int = 64) -> float:
    if len(images) == 0:
        raise ContractError("cannot compute accuracy on an empty split")
    labels = np.asarray(labels)
    hits = 0
    with no_grad():
        for start in range(0, len(images), batch_size):
            logits = model.forward(images[start:start + batch_size]).logits.data
            hits += int(np.sum(np.argmax(logits, axis=1) == labels[start:start + batch_size]))
    return hits / len(images)


def _parallel_map(fn, items, n_threads: int):
    if n_threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n_threads) as ex:
        return list(ex.map(fn, items))


def _argmax_parts(model, image: np.ndarray, mask: np.ndarray, proto_indices) -> dict:
    """Part id under the argmax cell of each requested prototype's map."""
    latent_hw = model.embedding.cfg.target_latent_hw
    image_hw = image.shape[1:]
    part_hw = model.bank.part_hw
    with no_grad():
        feat = model.embed(image[None])
        vals = similarity_values(feat, model.bank).data[0]
    out = {}
    for pi in proto_indices:
        flat = int(np.argmax(vals[pi]))           # first max: lowest (h, w)
        h, w = divmod(flat, vals[pi].shape[1])
        y0, x0, y1, x1 = latent_cell_bbox(h, w, part_hw, latent_hw, image_hw)
        out[pi] = int(mask[(y0 + y1) // 2, (x0 + x1) // 2])
    return out


def stability(model, ds, split: str = "val", noise_sigma: float = STABILITY_SIGMA,
              seed: int = 0, n_draws: int = 1, n_threads: int = 1) -> float:
    """Fraction of (image, same-class prototype) pairs whose argmax part
    assignment survives pixel-wise Gaussian noise (majority vote over draws)."""
    idx = list(ds.splits[split])
    if not idx:
        raise ContractError(f"split {split!r} is empty")

    def per_image(img_idx: int):
        image = ds.images[img_idx]
        mask = ds.part_masks[img_idx]
        protos = model.bank.prototypes_of_class(int(ds.labels[img_idx]))
        if len(protos) == 0:
            return 0, 0
        clean = _argmax_parts(model, image, mask, protos)
        votes = {pi: 0 for pi in protos}
        for draw in range(n_draws):
            rng = np.random.default_rng([seed, 0x57AB, img_idx, draw])
            noisy = image + rng.normal(0.0, noise_sigma, size=image.shape)
            got = _argmax_parts(model, noisy, mask, protos)
            for pi in protos:
                votes[pi] += int(got[pi] == clean[pi])
        stable = sum(1 for pi in protos if votes[pi] * 2 > n_draws)
        return stable, len(protos)

    counts = _parallel_map(per_image, idx, n_threads)
    stable = sum(c[0] for c in counts)
    total = sum(c[1] for c in counts)
    return stable / total


def consistency(model, ds, split: str = "val", tau: float = CONSISTENCY_TAU,
                n_threads: int = 1) -> float:
    """Fraction of prototypes whose modal argmax part reaches frequency tau
    across their class's eval images."""
    idx = list(ds.splits[split])
    if not idx:
        raise ContractError(f"split {split!r} is empty")

    def per_image(img_idx: int):
        protos = model.bank.prototypes_of_class(int(ds.labels[img_idx]))
        if len(protos) == 0:
            return {}
        return _argmax_parts(model, ds.images[img_idx], ds.part_masks[img_idx], protos)

    hits_per_proto = {pi: [] for pi in range(model.bank.num_prototypes)}
    for parts in _parallel_map(per_image, idx, n_threads):
        for pi, part in parts.items():
            hits_per_proto[pi].append(part)

    consistent = 0
    counted = 0
    for pi in range(model.bank.num_prototypes):
        hits = hits_per_proto[pi]
        if not hits:
            warnings.warn(f"prototype {pi} (class {model.bank.class_of[pi]}) has no eval "
                          f"images in split {split!r}; excluded from consistency")
            continue
        counted += 1
        _, freq = np.unique(hits, return_counts=True)
        if freq.max() / len(hits) >= tau:
            consistent += 1
    if counted == 0:
        raise ContractError(f"no prototype has eval images in split {split!r}")
    return consistent / counted


def evaluate_model(model, ds, split: str = "val", noise_sigma: float = STABILITY_SIGMA,
                   tau: float = CONSISTENCY_TAU, seed: int = 0, n_draws: int = 1,
                   n_threads: int = 1, epoch: int = -1) -> MetricsReport:
    """Full MetricsReport for one model snapshot on one split."""
    images, labels, _ = ds.subset(split)
    v_acc = accuracy(model, images, labels)
    lat_h, lat_w = model.embedding.cfg.target_latent_hw
    hp, wp = model.bank.part_hw
    v_sparse = sparsity(model.num_classes, lat_h, lat_w, model.bank.num_prototypes, hp, wp)
    v_stab = stability(model, ds, split, noise_sigma=noise_sigma, seed=seed,
                       n_draws=n_draws, n_threads=n_threads)
    v_consist = consistency(model, ds, split, tau=tau, n_threads=n_threads)
    score = proto_score(v_sparse, v_consist, v_stab)
    return MetricsReport(
        v_acc=v_acc, v_sparse=v_sparse, v_stab=v_stab, v_consist=v_consist,
        proto_score=score, obj_acc=objective("acc", v_acc, score),
        obj_aps=objective("aps", v_acc, score), epoch=epoch, split=split,
    )

"""Prototype and prediction visualization artifacts.

Writes plain PNG files (stdlib zlib, no image codecs) plus JSON indexes:
per prototype, the source training image with its patch outlined and a
similarity heat map on a class query image; per query image, a
"this looks like that" sheet listing the top activated prototypes with their
pooled similarities and head-weight contributions.  Every sheet finishes by
reconstructing the logits from (pooled x weight) and asserting the sum
matches the model's output.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import ContractError, NumericError
from .prototypes import latent_cell_bbox, similarity_values
from .tensor import no_grad


def write_png(path, rgb: np.ndarray) -> None:
    """Write an [H,W,3] uint8 array as an 8-bit truecolor PNG."""
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    raw = b"".join(b"\x00" + rgb[i].tobytes() for i in range(h))

    def chunk(tag: bytes, data: bytes) -> bytes:
        return (struct.pack(">I", len(data)) + tag + data
                + struct.pack(">I", zlib.crc32(tag + data) & 0xFFFFFFFF))

    ihdr = struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0)
    payload = (b"\x89PNG\r\n\x1a\n" + chunk(b"IHDR", ihdr)
               + chunk(b"IDAT", zlib.compress(raw, 6)) + chunk(b"IEND", b""))
    Path(path).write_bytes(payload)


def to_uint8(image: np.ndarray) -> np.ndarray:
    """[C,H,W] float in [0,1] -> [H,W,3] uint8 (grayscale replicated if C=1)."""
    img = np.clip(image, 0.0, 1.0)
    if img.shape[0] == 1:
        img = np.repeat(img, 3, axis=0)
    return (img[:3].transpose(1, 2, 0) * 255.0 + 0.5).astype(np.uint8)


def outline_bbox(rgb: np.ndarray, bbox, color=(255, 220, 0), width: int = 1) -> np.ndarray:
    y0, x0, y1, x1 = bbox
    out = rgb.copy()
    h, w, _ = out.shape
    y0, x0 = max(y0, 0), max(x0, 0)
    y1, x1 = min(y1, h), min(x1, w)
    for t in range(width):
        out[min(y0 + t, h - 1), x0:x1] = color
        out[max(y1 - 1 - t, 0), x0:x1] = color
        out[y0:y1, min(x0 + t, w - 1)] = color
        out[y0:y1, max(x1 - 1 - t, 0)] = color
    return out


def heatmap_overlay(rgb: np.ndarray, simmap: np.ndarray, alpha: float = 0.45) -> np.ndarray:
    """Nearest-upsample a similarity map onto the image and blend it red-blue."""
    h, w, _ = rgb.shape
    lo, hi = float(simmap.min()), float(simmap.max())
    norm = (simmap - lo) / (hi - lo) if hi > lo else np.zeros_like(simmap)
    ys = (np.arange(h) * simmap.shape[0] // h).clip(0, simmap.shape[0] - 1)
    xs = (np.arange(w) * simmap.shape[1] // w).clip(0, simmap.shape[1] - 1)
    up = norm[np.ix_(ys, xs)]
    heat = np.stack([up * 255.0, np.zeros_like(up), (1.0 - up) * 255.0], axis=2)
    return ((1 - alpha) * rgb.astype(float) + alpha * heat + 0.5).astype(np.uint8)


def visualize_checkpoint(model, ds, out_dir, n_queries: int = None) -> dict:
    """Write the full artifact tree for a projected checkpoint; returns the index."""
    if not model.bank.sources or model.bank.sources[0] is None:
        raise ContractError("checkpoint has never been projected; run a projection "
                            "(train to at least the first project step) before visualizing")
    out_dir = Path(out_dir)
    (out_dir / "prototypes").mkdir(parents=True, exist_ok=True)
    (out_dir / "queries").mkdir(parents=True, exist_ok=True)

    train_idx = np.asarray(ds.splits["train"], dtype=int)
    latent_hw = model.embedding.cfg.target_latent_hw
    image_hw = ds.image_hw
    part_hw = model.bank.part_hw
    k = model.num_classes

    # one query image per class (first test image), up to n_queries
    queries = []
    for c in range(k):
        for idx in ds.splits["test"]:
            if ds.labels[idx] == c:
                queries.append(int(idx))
                break
    if n_queries is not None:
        queries = queries[:n_queries]

    with no_grad():
        q_feats = model.embed(ds.images[queries])
        q_vals = similarity_values(q_feats, model.bank).data
        from .prototypes import topk_pool
        from .tensor import Tensor
        q_pooled = topk_pool(Tensor(q_vals), model.bank.k_for_topk).data
        q_logits = q_pooled @ model.head.weight.data.T

    index = {"num_prototypes": model.bank.num_prototypes, "classes": {}, "prototypes": []}
    for c in range(k):
        index["classes"][str(c)] = {
            "prototypes": [int(p) for p in model.bank.prototypes_of_class(c)],
        }

    query_of_class = {int(ds.labels[q]): qi for qi, q in enumerate(queries)}
    for pi in range(model.bank.num_prototypes):
        rec = model.bank.sources[pi]
        src_global = int(train_idx[rec.image_index])
        rgb = outline_bbox(to_uint8(ds.images[src_global]), rec.pixel_bbox)
        write_png(out_dir / "prototypes" / f"proto_{pi:03d}_source.png", rgb)

        c = int(model.bank.class_of[pi])
        entry = {
            "prototype_index": pi,
            "class": c,
            "source_train_position": rec.image_index,
            "source_image_index": src_global,
            "pixel_bbox": list(rec.pixel_bbox),
            "similarity_at_projection": rec.similarity_at_projection,
            "head_weights": model.head.weight.data[:, pi].tolist(),
        }
        qi = query_of_class.get(c)
        if qi is not None:
            sm = q_vals[qi, pi]
            overlay = heatmap_overlay(to_uint8(ds.images[queries[qi]]), sm)
            am = int(np.argmax(sm))
            hh, wwid = divmod(am, sm.shape[1])
            bbox = latent_cell_bbox(hh, wwid, part_hw, latent_hw, image_hw)
            overlay = outline_bbox(overlay, bbox, color=(0, 255, 0))
            write_png(out_dir / "prototypes" / f"proto_{pi:03d}_heatmap.png", overlay)
            entry["query_argmax_cell"] = [int(hh), int(wwid)]
            entry["query_image_index"] = int(queries[qi])
        index["prototypes"].append(entry)

    for qi, q in enumerate(queries):
        pooled = q_pooled[qi]
        logits = q_logits[qi]
        pred = int(np.argmax(logits))
        recon = model.head.weight.data @ pooled
        if not np.allclose(recon, logits, atol=1e-9):
            raise NumericError("logit reconstruction from pooled similarities "
                               f"disagrees with the model output: {recon} vs {logits}")
        order = np.argsort(-pooled)[:3]
        rows = []
        for rank, pi in enumerate(order):
            contribution = float(pooled[pi] * model.head.weight.data[pred, pi])
            rows.append({
                "rank": rank,
                "prototype_index": int(pi),
                "prototype_class": int(model.bank.class_of[pi]),
                "pooled_similarity": float(pooled[pi]),
                "weight_to_predicted_class": float(model.head.weight.data[pred, pi]),
                "logit_contribution": contribution,
            })
            sm = q_vals[qi, int(pi)]
            overlay = heatmap_overlay(to_uint8(ds.images[q]), sm)
            write_png(out_dir / "queries" / f"query_{qi:03d}_rank{rank}.png", overlay)
        sheet = {
            "query_image_index": int(q),
            "true_class": int(ds.labels[q]),
            "predicted_class": pred,
            "logits": logits.tolist(),
            "top_prototypes": rows,
            "logit_reconstruction": {
                "sum_pooled_times_weight": recon.tolist(),
                "max_abs_error": float(np.max(np.abs(recon - logits))),
                "ok": True,
            },
        }
        (out_dir / "queries" / f"query_{qi:03d}_sheet.json").write_text(
            json.dumps(sheet, sort_keys=True, indent=1))

    (out_dir / "index.json").write_text(json.dumps(index, sort_keys=True, indent=1))
    return index

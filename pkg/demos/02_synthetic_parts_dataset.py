"""Generate a small parts-annotated dataset and export a few images with
their part masks as PNGs for inspection.

Run:  python demos/02_synthetic_parts_dataset.py  [out_dir]
"""

import sys
from pathlib import Path

import numpy as np

from protopart.dataset import generate_synthetic
from protopart.visualize import to_uint8, write_png

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("demo_out/dataset")
out.mkdir(parents=True, exist_ok=True)

ds = generate_synthetic(num_classes=4, n_per_class=12, image_size=64, seed=7)
print("images:", ds.images.shape)
print("splits:", {k: len(v) for k, v in ds.splits.items()})
print("part vocabulary:", ds.manifest["part_names"])
print("class signatures (1-based part ids):", ds.manifest["signature_pairs"])

palette = np.array([[0, 0, 0], [230, 60, 60], [60, 200, 60], [70, 110, 240],
                    [230, 200, 50], [180, 80, 200], [80, 220, 220],
                    [250, 140, 40], [150, 150, 150], [90, 60, 20], [220, 220, 220]])

for c in range(4):
    idx = next(i for i in ds.splits["train"] if ds.labels[i] == c)
    write_png(out / f"class{c}_image.png", to_uint8(ds.images[idx]))
    write_png(out / f"class{c}_mask.png", palette[ds.part_masks[idx] % len(palette)].astype(np.uint8))
    present = sorted(int(p) for p in np.unique(ds.part_masks[idx]) if p != 0)
    print(f"class {c}: wrote image+mask, parts present: {present}")

print("\nPNGs written to", out)

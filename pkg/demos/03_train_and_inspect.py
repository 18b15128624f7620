"""Train a small prototypical-part model end to end, then walk through what
the engine produced: the phase-structured run log, projection events, the
interpretability metrics, and the prototype visualization artifacts.

Takes a couple of minutes on one CPU core.

Run:  python demos/03_train_and_inspect.py  [out_dir]
"""

import json
import sys
from pathlib import Path

from protopart.config import validate_config
from protopart.dataset import generate_synthetic
from protopart.metrics import accuracy, evaluate_model
from protopart.trainer import checkpoint_load, run_training
from protopart.visualize import visualize_checkpoint

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("demo_out/train")

cfg = validate_config({
    "seed": 1,
    "dataset": {"num_classes": 3, "n_per_class": 80, "test_per_class": 15,
                "image_size": 32, "glyph_fraction": 0.4},
    "embedding": {"blocks": [[16, 2], [32, 2]], "input_hw": [32, 32],
                  "target_latent_hw": [8, 8], "num_addon_layers": 0},
    "prototypes": {"metric": "cosine", "per_class": 4},
    "trainer": {"joint_lr_step_size": 10, "batch_size": 32,
                "augmentation": {"rotation_deg": 10.0, "distortion_scale": 0.15,
                                 "shear_px": 3.0, "hflip_prob": 0.5}},
})
ds = generate_synthetic(3, 80, 32, seed=1, test_per_class=15, glyph_fraction=0.4)

print("training (warm-up -> joint -> projection cycles)...")
result = run_training(cfg, ds, out / "run")
print("status:", result["status"], "| epochs:", result["completed_epochs"],
      "| projections:", result["completed_projections"])

rows = [json.loads(l) for l in open(result["log"])]
print("\nprojection events (accuracy before -> after, patience strikes):")
for r in rows:
    if r["type"] == "project":
        print(f"  projection {r['projection_index']:2d}: "
              f"{r['v_acc_preproj']:.3f} -> {r['v_acc_val']:.3f}   "
              f"strikes={r['early_stop']['strikes']}")

model, *_ = checkpoint_load(result["checkpoint"])
images, labels, _ = ds.subset("test")
print(f"\ntest accuracy: {accuracy(model, images, labels):.3f}")

report = evaluate_model(model, ds, "val", seed=1)
print("interpretability metrics on the validation split:")
for key, value in report.to_json().items():
    if isinstance(value, float):
        print(f"  {key:12s} {value:.4f}")

index = visualize_checkpoint(model, ds, out / "viz")
print(f"\nwrote {index['num_prototypes']} prototype source/heatmap PNGs and "
      f"per-query 'this looks like that' sheets to {out / 'viz'}")
sheet = json.loads(next((out / "viz" / "queries").glob("*_sheet.json")).read_text())
print("sample sheet: predicted class", sheet["predicted_class"],
      "| top prototype contributions:")
for row in sheet["top_prototypes"]:
    print(f"  prototype {row['prototype_index']:2d} (class {row['prototype_class']}): "
          f"similarity {row['pooled_similarity']:+.3f} x weight "
          f"{row['weight_to_predicted_class']:+.2f} = {row['logit_contribution']:+.3f}")

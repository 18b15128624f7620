"""The TPE sweep machinery, demonstrated two ways: first against a cheap
closed-form objective (next to a random-search baseline), then as a real
miniature sweep of full training runs.

The closed-form part takes seconds; the real sweep a few minutes.

Run:  python demos/05_hyperparameter_sweep.py  [out_dir] [--skip-training]
"""

import sys
from pathlib import Path

import numpy as np

from protopart.config import validate_config
from protopart.dataset import generate_synthetic
from protopart.sweep import HyperparamSpace, run_sweep, sample_prior, training_evaluator

out = Path(sys.argv[1]) if len(sys.argv) > 1 and not sys.argv[1].startswith("--") \
    else Path("demo_out/sweep")
out.mkdir(parents=True, exist_ok=True)
space = HyperparamSpace(deformable=False)

print("== closed-form objective: TPE vs random search ==")


def objective(cfg):
    return -((cfg["cluster_coef"] + 0.5) ** 2 + 10 * (cfg["separation_coef"] - 0.05) ** 2)


tpe, rnd = [], []
for seed in range(10):
    best, _ = run_sweep(space, lambda c, i: {"objective": objective(c)}, "acc", 40,
                        out / f"quad_{seed}.json", seed=seed)
    tpe.append(best.objective)
    rng = np.random.default_rng([seed, 1])
    rnd.append(max(objective(sample_prior(space, rng)) for _ in range(40)))
print(f"median best objective over 10 seeds (40 trials each): "
      f"TPE {np.median(tpe):.4f} vs random {np.median(rnd):.4f}")

if "--skip-training" in sys.argv:
    sys.exit(0)

print("\n== miniature real sweep: 6 trials of full training ==")
base = validate_config({
    "seed": 0,
    "dataset": {"num_classes": 3, "n_per_class": 80, "test_per_class": 15,
                "image_size": 32, "glyph_fraction": 0.4},
    "embedding": {"blocks": [[16, 2], [32, 2]], "input_hw": [32, 32],
                  "target_latent_hw": [8, 8], "num_addon_layers": 0},
    "trainer": {"batch_size": 32,
                "augmentation": {"rotation_deg": 10.0, "distortion_scale": 0.15,
                                 "shear_px": 3.0, "hflip_prob": 0.5}},
    "sweep": {"objective": "aps", "n_startup": 4},
})
ds = generate_synthetic(3, 80, 32, seed=1, test_per_class=15, glyph_fraction=0.4)
evaluate = training_evaluator(base, ds, out / "trials", "aps")
best, history = run_sweep(space, evaluate, "aps", 6, out / "sweep.json", seed=0,
                          n_startup=4)
print("trial results (objective = accuracy x prototype score):")
for t in history:
    print(f"  trial {t.trial_id}: obj={t.objective:.3f} acc={t.v_acc:.3f} "
          f"proto_score={t.proto_score:.3f} "
          f"[L={t.config['pre_project_phase_len']}, "
          f"prototypes/class={t.config['num_prototypes_per_class']}] ({t.status})")
print(f"best: trial {best.trial_id} with obj {best.objective:.3f}; "
      f"history persisted at {out / 'sweep.json'}")

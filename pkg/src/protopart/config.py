"""Run configuration: one JSON document with a section per subsystem.

Validation is strict: unknown keys are rejected (typos should fail loudly,
not train silently wrong models), values must match the type of their
default, and a handful of cross-field rules are enforced before any work
starts.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path

from .errors import ConfigError

DEFAULTS = {
    "seed": 0,
    "dataset": {
        "num_classes": 4,
        "n_per_class": 100,
        "test_per_class": 25,
        "image_size": 64,
        "channels": 3,
        "glyph_fraction": 0.3,
    },
    "embedding": {
        "input_channels": 3,
        "blocks": [[32, 2], [64, 2], [64, 2]],
        "num_addon_layers": 0,
        "latent_dim_multiplier_exp": 0,
        "target_latent_hw": [8, 8],
        "input_hw": [64, 64],
    },
    "prototypes": {
        "metric": "cosine",
        "per_class": 4,
        "prototype_dimension": 1,
        "k_for_topk": 1,
    },
    "head": {
        "w_pos": 1.0,
        "w_neg": -0.5,
    },
    "loss": {
        "cluster_coef": -0.8,
        "separation_coef": 0.08,
        "l1_coef": 1e-4,
        "ortho_coef": 0.0,
    },
    "trainer": {
        "pre_project_phase_len": 4,
        "post_project_phases": 10,
        "phase_multiplier": 1,
        "joint_lr_step_size": 10,
        "lr_multiplier": 1.0,
        "num_warm_pre_offset_epochs": 0,
        "batch_size": 32,
        "patience": 3,
        "lr_gamma": 0.5,
        # desk-scale bases: the backbone trains from scratch (not a pretrained
        # finetune), and the bounded cosine logits need the last-only phases
        # to actually fit the head, hence the hot backbone and last rates
        "base_lrs": {
            "warm": 3e-3,
            "joint_backbone": 3e-3,
            "joint_other": 3e-3,
            "last": 3e-2,
        },
        "augmentation": {
            "enabled": True,
            "rotation_deg": 15.0,
            "distortion_scale": 0.2,
            "shear_px": 10.0,
            "hflip_prob": 0.5,
        },
    },
    "metrics": {
        "noise_sigma": 0.05,
        "consistency_tau": 0.8,
        "n_noise_draws": 1,
        "n_threads": 1,
    },
    "sweep": {
        "objective": "acc",
        "deformable": False,
        "max_trials": 8,
        "max_wall_seconds": 0,       # 0 = no wall-clock budget
        "parallelism": 1,
        "quantile_gamma": 0.25,
        "n_startup": 8,
        "n_candidates": 24,
        "compute_proto_metrics": True,
    },
}


def default_config() -> dict:
    return copy.deepcopy(DEFAULTS)


def _merge(defaults, user, path=""):
    if isinstance(defaults, dict):
        if not isinstance(user, dict):
            raise ConfigError(f"config key {path or '<root>'} must be an object, got {type(user).__name__}")
        out = {}
        for key in user:
            if key not in defaults:
                raise ConfigError(f"unknown config key {path + key!r}")
        for key, dval in defaults.items():
            if key in user:
                out[key] = _merge(dval, user[key], path=f"{path}{key}.")
            else:
                out[key] = copy.deepcopy(dval)
        return out
    if isinstance(defaults, bool):
        if not isinstance(user, bool):
            raise ConfigError(f"config key {path[:-1]!r} must be a boolean")
        return user
    if isinstance(defaults, int) and not isinstance(defaults, bool):
        if isinstance(user, bool) or not isinstance(user, int):
            raise ConfigError(f"config key {path[:-1]!r} must be an integer, got {user!r}")
        return user
    if isinstance(defaults, float):
        if isinstance(user, bool) or not isinstance(user, (int, float)):
            raise ConfigError(f"config key {path[:-1]!r} must be a number, got {user!r}")
        return float(user)
    if isinstance(defaults, str):
        if not isinstance(user, str):
            raise ConfigError(f"config key {path[:-1]!r} must be a string, got {user!r}")
        return user
    if isinstance(defaults, list):
        if not isinstance(user, list):
            raise ConfigError(f"config key {path[:-1]!r} must be a list, got {user!r}")
        return copy.deepcopy(user)
    raise ConfigError(f"unhandled config type at {path[:-1]!r}")


def validate_config(user: dict) -> dict:
    """Merge the user document over the defaults and enforce cross-field rules."""
    cfg = _merge(DEFAULTS, user)

    emb = cfg["embedding"]
    if emb["num_addon_layers"] == 0:
        emb["latent_dim_multiplier_exp"] = 0
    proto = cfg["prototypes"]
    if proto["metric"] not in ("l2", "cosine", "deformable_cosine"):
        raise ConfigError(f"prototypes.metric must be l2 | cosine | deformable_cosine, "
                          f"got {proto['metric']!r}")
    if proto["metric"] == "l2" and proto["prototype_dimension"] != 1:
        raise ConfigError("L2 prototypes must have prototype_dimension 1")
    if proto["per_class"] < 1:
        raise ConfigError("prototypes.per_class must be >= 1")
    if proto["k_for_topk"] < 1:
        raise ConfigError("prototypes.k_for_topk must be >= 1")

    tr = cfg["trainer"]
    if tr["lr_multiplier"] <= 0:
        raise ConfigError(f"trainer.lr_multiplier must be positive, got {tr['lr_multiplier']}")
    for key in ("pre_project_phase_len", "phase_multiplier", "joint_lr_step_size", "batch_size"):
        if tr[key] < 1:
            raise ConfigError(f"trainer.{key} must be >= 1, got {tr[key]}")
    if tr["post_project_phases"] < 0:
        raise ConfigError("trainer.post_project_phases must be >= 0")
    if tr["patience"] < 1:
        raise ConfigError("trainer.patience must be >= 1")

    ds = cfg["dataset"]
    if ds["num_classes"] < 2:
        raise ConfigError("dataset.num_classes must be >= 2")

    sw = cfg["sweep"]
    if sw["objective"] not in ("acc", "aps"):
        raise ConfigError(f"sweep.objective must be 'acc' or 'aps', got {sw['objective']!r}")
    if sw["max_trials"] < 1 and sw["max_wall_seconds"] <= 0:
        raise ConfigError("sweep needs max_trials >= 1 or a positive max_wall_seconds")
    return cfg


def load_config(path) -> dict:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}")
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a JSON object")
    return validate_config(doc)

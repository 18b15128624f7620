"""Bayesian hyperparameter search over the training configuration space.

The surrogate is a tree-structured Parzen estimator: completed trials are
split at an objective quantile into good and bad sets, each dimension gets a
pair of densities (smoothed counts for discrete dimensions, kernel mixtures
with a prior component for continuous ones), candidates are drawn from the
good densities, and the candidate with the highest good/bad density ratio is
run next.  The first ``n_startup`` trials sample the prior directly.

Suggestions are keyed by (history, seed, trial index), so a killed sweep
restarted from its history file reproduces the identical suggestion stream.
"""

from __future__ import annotations

import json
import math
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError

N_STARTUP = 8
QUANTILE_GAMMA = 0.25
N_CANDIDATES = 24


@dataclass
class Dim:
    name: str
    kind: str                  # int | fixed | normal | loguniform
    a: float = 0.0             # lo / value / mu / lo
    b: float = 0.0             # hi / -  / sigma / hi
    positive: bool = False     # truncate normals at 0 (resample)


BASE_DIMS = [
    Dim("pre_project_phase_len", "int", 3, 15),
    Dim("post_project_phases", "fixed", 10),
    Dim("phase_multiplier", "fixed", 1),
    Dim("num_addon_layers", "int", 0, 2),
    Dim("latent_dim_multiplier_exp", "int", -4, 1),
    Dim("num_prototypes_per_class", "int", 1, 16),
    Dim("joint_lr_step_size", "int", 2, 10),
    Dim("lr_multiplier", "normal", 1.0, 0.4, positive=True),
    Dim("cluster_coef", "normal", -0.8, 0.5),
    Dim("separation_coef", "normal", 0.08, 0.1),
    Dim("l1_coef", "loguniform", 1e-5, 1e-3),
]

DEFORMABLE_DIMS = [
    Dim("num_warm_pre_offset_epochs", "int", 0, 10),
    Dim("k_for_topk", "int", 1, 10),
    Dim("prototype_dimension", "int", 1, 3),
    Dim("orthogonality_loss", "loguniform", 1e-5, 1e-3),
]


class HyperparamSpace:
    def __init__(self, deformable: bool = False):
        self.deformable = deformable
        self.dims = list(BASE_DIMS) + (list(DEFORMABLE_DIMS) if deformable else [])

    def dim(self, name: str) -> Dim:
        for d in self.dims:
            if d.name == name:
                return d
        raise ContractError(f"unknown hyperparameter {name!r}")

    def contains(self, config: dict) -> bool:
        for d in self.dims:
            v = config.get(d.name)
            if v is None:
                return False
            if d.kind == "int" and not (d.a <= v <= d.b and float(v).is_integer()):
                return False
            if d.kind == "fixed" and v != d.a:
                return False
            if d.kind == "normal" and d.positive and v <= 0:
                return False
            if d.kind == "loguniform" and not (d.a <= v <= d.b):
                return False
        if config.get("num_addon_layers") == 0 and config.get("latent_dim_multiplier_exp") != 0:
            return False
        return True


@dataclass
class TrialRecord:
    trial_id: int
    config: dict
    objective: float | None
    v_acc: float | None = None
    proto_score: float | None = None
    status: str = "completed"          # completed | halted-early | failed
    wall_seconds: float = 0.0
    error: str | None = None

    def to_json(self) -> dict:
        return {"trial_id": self.trial_id, "config": self.config, "objective": self.objective,
                "v_acc": self.v_acc, "proto_score": self.proto_score, "status": self.status,
                "wall_seconds": self.wall_seconds, "error": self.error}

    @classmethod
    def from_json(cls, d: dict) -> "TrialRecord":
        return cls(**d)


def _enforce_constraints(config: dict) -> dict:
    if config.get("num_addon_layers") == 0:
        config["latent_dim_multiplier_exp"] = 0
    return config


def _sample_dim(d: Dim, rng) -> float:
    if d.kind == "fixed":
        return d.a
    if d.kind == "int":
        return int(rng.integers(int(d.a), int(d.b) + 1))
    if d.kind == "normal":
        for _ in range(1000):
            v = rng.normal(d.a, d.b)
            if not d.positive or v > 0:
                return float(v)
        return abs(d.b) * 0.01   # degenerate fallback; practically unreachable
    if d.kind == "loguniform":
        return float(np.exp(rng.uniform(np.log(d.a), np.log(d.b))))
    raise ContractError(f"unknown dim kind {d.kind!r}")


def sample_prior(space: HyperparamSpace, rng) -> dict:
    return _enforce_constraints({d.name: _sample_dim(d, rng) for d in space.dims})


# ---------------------------------------------------------------------------
# TPE densities
# ---------------------------------------------------------------------------

class _IntDensity:
    def __init__(self, d: Dim, values, alpha: float = 1.0):
        support = np.arange(int(d.a), int(d.b) + 1)
        counts = np.array([sum(1 for v in values if int(v) == s) for s in support], dtype=float)
        self.support = support
        self.probs = (counts + alpha) / (counts + alpha).sum()

    def sample(self, rng):
        return int(rng.choice(self.support, p=self.probs))

    def logpdf(self, v):
        return float(np.log(self.probs[self.support == int(v)][0]))


class _NormalMixture:
    """Gaussian kernels at observed points plus the prior as one component."""

    def __init__(self, d: Dim, values):
        self.prior_mu, self.prior_sigma = d.a, d.b
        self.positive = d.positive
        self.points = np.asarray(values, dtype=float)
        n = max(len(self.points), 1)
        spread = self.points.std() if len(self.points) > 1 else d.b
        self.bw = max(spread * n ** (-1.0 / 5.0), d.b / 25.0)

    def _components(self):
        mus = np.concatenate([[self.prior_mu], self.points])
        sigmas = np.concatenate([[self.prior_sigma], np.full(len(self.points), self.bw)])
        return mus, sigmas

    def sample(self, rng):
        mus, sigmas = self._components()
        for _ in range(1000):
            i = int(rng.integers(len(mus)))
            v = rng.normal(mus[i], sigmas[i])
            if not self.positive or v > 0:
                return float(v)
        return abs(self.prior_sigma) * 0.01

    def logpdf(self, v):
        mus, sigmas = self._components()
        z = (v - mus) / sigmas
        comp = np.exp(-0.5 * z * z) / (sigmas * math.sqrt(2 * math.pi))
        return float(np.log(comp.mean() + 1e-300))


class _LogUniformMixture:
    """Kernels in log space with the log-uniform prior as one component."""

    def __init__(self, d: Dim, values):
        self.lo, self.hi = math.log(d.a), math.log(d.b)
        self.points = np.log(np.asarray(values, dtype=float)) if len(values) else np.zeros(0)
        n = max(len(self.points), 1)
        width = self.hi - self.lo
        spread = self.points.std() if len(self.points) > 1 else width / 4
        self.bw = max(spread * n ** (-1.0 / 5.0), width / 25.0)

    def sample(self, rng):
        n_comp = len(self.points) + 1
        for _ in range(1000):
            i = int(rng.integers(n_comp))
            t = rng.uniform(self.lo, self.hi) if i == 0 else rng.normal(self.points[i - 1], self.bw)
            if self.lo <= t <= self.hi:
                return float(np.exp(t))
        return float(np.exp((self.lo + self.hi) / 2))

    def logpdf(self, v):
        t = math.log(v)
        dens = [1.0 / (self.hi - self.lo)]
        for p in self.points:
            z = (t - p) / self.bw
            dens.append(math.exp(-0.5 * z * z) / (self.bw * math.sqrt(2 * math.pi)))
        return float(np.log(np.mean(dens) + 1e-300))


def _density(d: Dim, values):
    if d.kind == "int":
        return _IntDensity(d, values)
    if d.kind == "normal":
        return _NormalMixture(d, values)
    if d.kind == "loguniform":
        return _LogUniformMixture(d, values)
    return None  # fixed


def suggest(history, space: HyperparamSpace, rng, gamma: float = QUANTILE_GAMMA,
            n_startup: int = N_STARTUP, n_candidates: int = N_CANDIDATES) -> dict:
    """Next configuration to try, given completed history."""
    scored = [t for t in history if t.objective is not None]
    if len(scored) < n_startup:
        return sample_prior(space, rng)

    scored = sorted(scored, key=lambda t: t.objective, reverse=True)
    n_good = max(1, math.ceil(gamma * len(scored)))
    good, bad = scored[:n_good], scored[n_good:]
    if not bad:
        return sample_prior(space, rng)

    densities = {}
    for d in space.dims:
        if d.kind == "fixed":
            continue
        densities[d.name] = (
            _density(d, [t.config[d.name] for t in good]),
            _density(d, [t.config[d.name] for t in bad]),
        )

    best_score, best_cfg = -np.inf, None
    for _ in range(n_candidates):
        cand = {}
        score = 0.0
        for d in space.dims:
            if d.kind == "fixed":
                cand[d.name] = d.a
                continue
            g, b = densities[d.name]
            v = g.sample(rng)
            cand[d.name] = v
            score += g.logpdf(v) - b.logpdf(v)
        cand = _enforce_constraints(cand)
        if score > best_score:
            best_score, best_cfg = score, cand
    return best_cfg


# ---------------------------------------------------------------------------
# sweep controller
# ---------------------------------------------------------------------------

def _persist(path: Path, space: HyperparamSpace, seed: int, objective_kind: str,
             history) -> None:
    doc = {
        "seed": seed,
        "objective": objective_kind,
        "deformable": space.deformable,
        "trials": [t.to_json() for t in sorted(history, key=lambda t: t.trial_id)],
    }
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(doc, sort_keys=True, indent=1))
    tmp.replace(path)


def load_history(path) -> list:
    doc = json.loads(Path(path).read_text())
    return [TrialRecord.from_json(t) for t in doc["trials"]]


def run_sweep(space: HyperparamSpace, evaluate, objective_kind: str, max_trials: int,
              state_path, seed: int = 0, parallelism: int = 1,
              max_wall_seconds: float = 0.0,
              gamma: float = QUANTILE_GAMMA, n_startup: int = N_STARTUP,
              n_candidates: int = N_CANDIDATES):
    """Drive trials until the budget is spent; returns (best, history).

    ``evaluate(config, trial_id)`` runs one full training and returns a dict
    with objective / v_acc / proto_score / status.  A crashed trial is
    recorded as failed and the sweep continues.  The state file makes the
    sweep resumable: existing trials are loaded and never re-run.
    """
    if objective_kind not in ("acc", "aps"):
        raise ConfigError(f"objective must be 'acc' or 'aps', got {objective_kind!r}")
    state_path = Path(state_path)
    state_path.parent.mkdir(parents=True, exist_ok=True)
    history = load_history(state_path) if state_path.exists() else []
    lock = threading.Lock()
    started = time.monotonic()

    def out_of_budget():
        return max_wall_seconds > 0 and (time.monotonic() - started) > max_wall_seconds

    def launch(trial_id: int, snapshot):
        rng = np.random.default_rng([seed, 1000 + trial_id])
        cfg = suggest(snapshot, space, rng, gamma=gamma, n_startup=n_startup,
                      n_candidates=n_candidates)
        t0 = time.monotonic()
        try:
            result = evaluate(cfg, trial_id)
            record = TrialRecord(
                trial_id=trial_id, config=cfg,
                objective=result["objective"], v_acc=result.get("v_acc"),
                proto_score=result.get("proto_score"),
                status=result.get("status", "completed"),
                wall_seconds=time.monotonic() - t0)
        except Exception as exc:   # noqa: BLE001 - a trial crash must not kill the sweep
            record = TrialRecord(trial_id=trial_id, config=cfg, objective=None,
                                 status="failed", wall_seconds=time.monotonic() - t0,
                                 error=repr(exc))
        with lock:
            history.append(record)
            _persist(state_path, space, seed, objective_kind, history)
        return record

    next_id = len(history)
    if parallelism <= 1:
        while next_id < max_trials and not out_of_budget():
            launch(next_id, list(history))
            next_id += 1
    else:
        with ThreadPoolExecutor(max_workers=parallelism) as ex:
            futures = []
            while next_id < max_trials and not out_of_budget():
                with lock:
                    snapshot = list(history)
                futures.append(ex.submit(launch, next_id, snapshot))
                next_id += 1
                while sum(1 for f in futures if not f.done()) >= parallelism:
                    time.sleep(0.05)
            for f in futures:
                f.result()

    completed = [t for t in history if t.objective is not None]
    best = max(completed, key=lambda t: t.objective) if completed else None
    return best, history


# ---------------------------------------------------------------------------
# bridge: sampled hyperparameters -> full run config -> training evaluation
# ---------------------------------------------------------------------------

def apply_hyperparams(base_cfg: dict, sampled: dict, deformable: bool) -> dict:
    """Overlay one sweep sample onto a validated run configuration."""
    import copy as _copy
    cfg = _copy.deepcopy(base_cfg)
    tr, emb, proto, loss = cfg["trainer"], cfg["embedding"], cfg["prototypes"], cfg["loss"]
    tr["pre_project_phase_len"] = int(sampled["pre_project_phase_len"])
    tr["post_project_phases"] = int(sampled["post_project_phases"])
    tr["phase_multiplier"] = int(sampled["phase_multiplier"])
    tr["joint_lr_step_size"] = int(sampled["joint_lr_step_size"])
    tr["lr_multiplier"] = float(sampled["lr_multiplier"])
    emb["num_addon_layers"] = int(sampled["num_addon_layers"])
    emb["latent_dim_multiplier_exp"] = int(sampled["latent_dim_multiplier_exp"])
    proto["per_class"] = int(sampled["num_prototypes_per_class"])
    loss["cluster_coef"] = float(sampled["cluster_coef"])
    loss["separation_coef"] = float(sampled["separation_coef"])
    loss["l1_coef"] = float(sampled["l1_coef"])
    if deformable:
        proto["metric"] = "deformable_cosine"
        proto["prototype_dimension"] = int(sampled["prototype_dimension"])
        proto["k_for_topk"] = int(sampled["k_for_topk"])
        tr["num_warm_pre_offset_epochs"] = int(sampled["num_warm_pre_offset_epochs"])
        loss["ortho_coef"] = float(sampled["orthogonality_loss"])
    return cfg


def training_evaluator(base_cfg: dict, ds, trials_dir, objective_kind: str,
                       compute_proto_metrics: bool = True):
    """Evaluator closure for ``run_sweep``: one trial = one full training run
    plus validation metrics."""
    from .metrics import accuracy
    from .trainer import checkpoint_load, run_training

    trials_dir = Path(trials_dir)
    deformable = base_cfg["sweep"]["deformable"]

    def evaluate(sampled: dict, trial_id: int) -> dict:
        cfg = apply_hyperparams(base_cfg, sampled, deformable)
        cfg["seed"] = int(np.random.default_rng([base_cfg["seed"], 77, trial_id]).integers(1 << 31))
        out = run_training(cfg, ds, trials_dir / f"trial_{trial_id:03d}")
        if compute_proto_metrics or objective_kind == "aps":
            # run_training already evaluated the final checkpoint on the
            # validation split with this trial's seed and metric settings
            report = out["final_metrics"]
            v_acc, score = report["v_acc"], report["proto_score"]
            objective = report["obj_aps"] if objective_kind == "aps" else report["obj_acc"]
        else:
            model, *_ = checkpoint_load(out["checkpoint"])
            images, labels, _ = ds.subset("val")
            v_acc, score = accuracy(model, images, labels), None
            objective = v_acc
        return {"objective": objective, "v_acc": v_acc, "proto_score": score,
                "status": "halted-early" if out["status"] == "halted" else "completed"}

    return evaluate

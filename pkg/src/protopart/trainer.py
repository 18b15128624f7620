"""Phase-structured training with interleaved prototype projection.

The schedule is warm-up, joint, then repeated (project, last-only, joint)
cycles with a final projection, so the shipped prototypes are always tied to
concrete training patches.  Early stopping is projection-aware: a patience
strike requires no improvement at BOTH the projection epoch and the epoch
just before it, each judged against the best value from strictly earlier
cycles, so recovery at either point resets patience.

Everything stochastic (batch order, augmentation, init) is keyed by
(seed, role, epoch, item), never by generator call order.  That makes runs
bit-reproducible and lets a resumed run replay the exact log an uninterrupted
run would have produced.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dataset as D
from .embedding import EmbeddingConfig, build_embedding
from .errors import ConfigError, ContractError, DataError, NumericError
from .head import LinearHead, predict
from .loss import LossWeights, overall_loss
from .metrics import accuracy
from .model import ProtoPartModel
from .prototypes import Metric, build_bank, project, renorm_bank_, similarity_map
from .tensor import Tensor, backward, load_tensors, no_grad, renormalize, save_tensors

WARM, JOINT, LAST, PROJECT = "warm", "joint", "last", "project"


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------

@dataclass
class PhaseSchedule:
    pre_project_phase_len: int = 3
    post_project_phases: int = 10
    phase_multiplier: int = 1
    joint_lr_step_size: int = 5
    lr_multiplier: float = 1.0
    num_warm_pre_offset_epochs: int = 0

    @property
    def last_phase_len(self) -> int:
        # the paper never states the last-only length; tying it to the same
        # knob keeps the schedule one-dimensional
        return self.pre_project_phase_len

    def plan(self) -> list:
        """Full step sequence: ('epoch', phase) entries and ('project',) markers."""
        m = self.phase_multiplier
        steps = []
        steps += [("epoch", WARM)] * (self.pre_project_phase_len * m)
        steps += [("epoch", JOINT)] * (self.pre_project_phase_len * m)
        for _ in range(self.post_project_phases):
            steps.append(("project",))
            steps += [("epoch", LAST)] * (self.last_phase_len * m)
            steps += [("epoch", JOINT)] * (self.pre_project_phase_len * m)
        steps.append(("project",))
        return steps


@dataclass
class EarlyStopState:
    patience: int = 3
    best_proj_acc: float = -math.inf
    best_preproj_acc: float = -math.inf
    strikes: int = 0
    halted: bool = False

    def to_json(self) -> dict:
        return {"patience": self.patience, "best_proj_acc": self.best_proj_acc,
                "best_preproj_acc": self.best_preproj_acc, "strikes": self.strikes,
                "halted": self.halted}

    @classmethod
    def from_json(cls, d: dict) -> "EarlyStopState":
        return cls(**d)


def early_stop_update(state: EarlyStopState, v_acc_proj: float,
                      v_acc_preproj: float) -> EarlyStopState:
    """One projection's worth of patience accounting.

    The maxima are over strictly prior projections (updated after the
    comparison); the first call can therefore never strike.
    """
    if state.halted:
        raise ContractError("early_stop_update called after training already halted")
    if v_acc_proj <= state.best_proj_acc and v_acc_preproj <= state.best_preproj_acc:
        state.strikes += 1
    else:
        state.strikes = 0
    state.best_proj_acc = max(state.best_proj_acc, v_acc_proj)
    state.best_preproj_acc = max(state.best_preproj_acc, v_acc_preproj)
    if state.strikes >= state.patience:
        state.halted = True
    return state


def lr_schedule(phase: str, joint_epochs_done: int, sched: PhaseSchedule,
                base_lrs: dict, gamma: float = 0.5, offsets_active: bool = True) -> dict:
    """Per-group learning rates for the coming epoch (0 = frozen group)."""
    mult = sched.lr_multiplier
    if phase == WARM:
        lr = base_lrs["warm"] * mult
        rates = {"backbone": 0.0, "addon": lr, "prototypes": lr,
                 "offsets": lr if offsets_active else 0.0, "head": 0.0}
    elif phase == JOINT:
        step = sched.joint_lr_step_size * sched.phase_multiplier
        decay = gamma ** (joint_epochs_done // step)
        other = base_lrs["joint_other"] * decay * mult
        rates = {"backbone": base_lrs["joint_backbone"] * decay * mult,
                 "addon": other, "prototypes": other, "offsets": other, "head": other}
    elif phase == LAST:
        rates = {"backbone": 0.0, "addon": 0.0, "prototypes": 0.0, "offsets": 0.0,
                 "head": base_lrs["last"] * mult}
    else:
        raise ContractError(f"no learning rates for phase {phase!r}")
    return rates


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

@dataclass
class AugmentationConfig:
    enabled: bool = True
    rotation_deg: float = 15.0
    distortion_scale: float = 0.2
    shear_px: float = 10.0
    hflip_prob: float = 0.5


def _homography_from_corners(src, dst) -> np.ndarray:
    """3x3 projective transform mapping 4 source corners onto 4 targets."""
    a = np.zeros((8, 8))
    b = np.zeros(8)
    for i, ((x, y), (u, v)) in enumerate(zip(src, dst)):
        a[2 * i] = [x, y, 1, 0, 0, 0, -u * x, -u * y]
        b[2 * i] = u
        a[2 * i + 1] = [0, 0, 0, x, y, 1, -v * x, -v * y]
        b[2 * i + 1] = v
    h = np.linalg.solve(a, b)
    return np.array([[h[0], h[1], h[2]], [h[3], h[4], h[5]], [h[6], h[7], 1.0]])


def draw_augmentation(cfg: AugmentationConfig, rng, hw: tuple) -> np.ndarray:
    """Sample one transform (a 3x3 matrix on (x, y, 1) pixel coordinates).

    Draw order is fixed: rotation, perspective corners, shear, flip.
    """
    h, w = hw
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    theta = math.radians(rng.uniform(-cfg.rotation_deg, cfg.rotation_deg))
    corner_jitter = rng.uniform(-cfg.distortion_scale / 2.0, cfg.distortion_scale / 2.0,
                                size=(4, 2)) * np.array([w, h])
    shear = rng.uniform(-cfg.shear_px, cfg.shear_px)
    flip = rng.random() < cfg.hflip_prob

    def about_center(m2x2, tx=0.0, ty=0.0):
        m = np.eye(3)
        m[:2, :2] = m2x2
        m[0, 2] = cx - m2x2[0, 0] * cx - m2x2[0, 1] * cy + tx
        m[1, 2] = cy - m2x2[1, 0] * cx - m2x2[1, 1] * cy + ty
        return m

    rot = about_center(np.array([[math.cos(theta), -math.sin(theta)],
                                 [math.sin(theta), math.cos(theta)]]))
    shear_m = about_center(np.array([[1.0, shear / max(cy, 1.0) / 2.0], [0.0, 1.0]]))
    flip_m = about_center(np.array([[-1.0, 0.0], [0.0, 1.0]])) if flip else np.eye(3)
    corners = np.array([[0, 0], [w - 1.0, 0], [0, h - 1.0], [w - 1.0, h - 1.0]])
    persp = _homography_from_corners(corners, corners + corner_jitter)
    return persp @ shear_m @ rot @ flip_m


def apply_transform_batch(images: np.ndarray, matrices: np.ndarray) -> np.ndarray:
    """Warp a [B,C,H,W] batch, one forward 3x3 matrix per image (bilinear,
    0-filled outside the frame).  One vectorized gather for the whole batch."""
    b, c, h, w = images.shape
    inv = np.linalg.inv(matrices)
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    denom = inv[:, 2, 0, None, None] * xs + inv[:, 2, 1, None, None] * ys + inv[:, 2, 2, None, None]
    sx = (inv[:, 0, 0, None, None] * xs + inv[:, 0, 1, None, None] * ys
          + inv[:, 0, 2, None, None]) / denom
    sy = (inv[:, 1, 0, None, None] * xs + inv[:, 1, 1, None, None] * ys
          + inv[:, 1, 2, None, None]) / denom
    inside = (sx >= 0) & (sx <= w - 1) & (sy >= 0) & (sy <= h - 1)
    x0 = np.clip(np.floor(sx), 0, w - 2).astype(np.int64)
    y0 = np.clip(np.floor(sy), 0, h - 2).astype(np.int64)
    fx = (np.clip(sx, 0, w - 1) - x0)[:, None]
    fy = (np.clip(sy, 0, h - 1) - y0)[:, None]

    flat = images.reshape(b, c, h * w)
    def gather(yy, xx):
        idx = (yy * w + xx).reshape(b, 1, h * w)
        return np.take_along_axis(flat, idx, axis=2).reshape(b, c, h, w)

    out = ((1 - fy) * (1 - fx) * gather(y0, x0) + (1 - fy) * fx * gather(y0, x0 + 1)
           + fy * (1 - fx) * gather(y0 + 1, x0) + fy * fx * gather(y0 + 1, x0 + 1))
    out *= inside[:, None]
    return out


def apply_transform(image: np.ndarray, matrix: np.ndarray, mask: np.ndarray = None):
    """Warp [C,H,W] image (bilinear) and optional [H,W] mask (nearest) by the
    forward matrix; pixels pulled from outside the frame become 0."""
    c, h, w = image.shape
    if np.array_equal(matrix, np.eye(3)):
        return image.copy(), (None if mask is None else mask.copy())
    inv = np.linalg.inv(matrix)
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    denom = inv[2, 0] * xs + inv[2, 1] * ys + inv[2, 2]
    sx = (inv[0, 0] * xs + inv[0, 1] * ys + inv[0, 2]) / denom
    sy = (inv[1, 0] * xs + inv[1, 1] * ys + inv[1, 2]) / denom

    inside = (sx >= 0) & (sx <= w - 1) & (sy >= 0) & (sy <= h - 1)
    x0 = np.clip(np.floor(sx), 0, w - 2).astype(int)
    y0 = np.clip(np.floor(sy), 0, h - 2).astype(int)
    fx = np.clip(sx, 0, w - 1) - x0
    fy = np.clip(sy, 0, h - 1) - y0
    w00 = (1 - fy) * (1 - fx)
    w01 = (1 - fy) * fx
    w10 = fy * (1 - fx)
    w11 = fy * fx
    out = (image[:, y0, x0] * w00 + image[:, y0, x0 + 1] * w01
           + image[:, y0 + 1, x0] * w10 + image[:, y0 + 1, x0 + 1] * w11)
    out *= inside
    exact = inside & (fx == 0) & (fy == 0)
    if exact.any():
        out[:, exact] = image[:, y0[exact], x0[exact]]

    warped_mask = None
    if mask is not None:
        nx = np.clip(np.round(sx), 0, w - 1).astype(int)
        ny = np.clip(np.round(sy), 0, h - 1).astype(int)
        warped_mask = np.where(inside, mask[ny, nx], 0)
    return out, warped_mask


def augment(image: np.ndarray, cfg: AugmentationConfig, rng, mask: np.ndarray = None):
    """Online training-split augmentation; the mask, when given, is moved by
    the identical transform (nearest-neighbor)."""
    if not cfg.enabled:
        return image.copy(), (None if mask is None else mask.copy())
    matrix = draw_augmentation(cfg, rng, image.shape[1:])
    return apply_transform(image, matrix, mask)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class Adam:
    """Adam with per-call learning rates and named, serializable state."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {}
        self.v = {}
        self.t = {}

    def step(self, named_params: dict, lrs: dict) -> None:
        for name, (param, group) in named_params.items():
            lr = lrs.get(group, 0.0)
            if lr == 0.0 or param.grad is None:
                continue
            g = param.grad
            if name not in self.m:
                self.m[name] = np.zeros_like(param.data)
                self.v[name] = np.zeros_like(param.data)
                self.t[name] = 0
            self.t[name] += 1
            t = self.t[name]
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            mhat = self.m[name] / (1 - self.beta1 ** t)
            vhat = self.v[name] / (1 - self.beta2 ** t)
            param.data = param.data - lr * mhat / (np.sqrt(vhat) + self.eps)


# ---------------------------------------------------------------------------
# model assembly from config
# ---------------------------------------------------------------------------

def named_parameters(model: ProtoPartModel) -> dict:
    """name -> (tensor, group), in a stable serialization order."""
    out = {}
    for i, (w, b) in enumerate(zip(model.embedding.backbone_weights,
                                   model.embedding.backbone_biases)):
        out[f"backbone.conv{i}.weight"] = (w, "backbone")
        out[f"backbone.conv{i}.bias"] = (b, "backbone")
    for i, (w, b) in enumerate(zip(model.embedding.addon_weights,
                                   model.embedding.addon_biases)):
        out[f"addon.conv{i}.weight"] = (w, "addon")
        out[f"addon.conv{i}.bias"] = (b, "addon")
    out["prototypes"] = (model.bank.protos, "prototypes")
    if model.bank.offset_weight is not None:
        out["offsets.weight"] = (model.bank.offset_weight, "offsets")
        out["offsets.bias"] = (model.bank.offset_bias, "offsets")
    out["head.weight"] = (model.head.weight, "head")
    return out


def model_from_config(cfg: dict) -> ProtoPartModel:
    emb = cfg["embedding"]
    proto = cfg["prototypes"]
    ecfg = EmbeddingConfig(
        input_channels=emb["input_channels"],
        blocks=[tuple(b) for b in emb["blocks"]],
        num_addon_layers=emb["num_addon_layers"],
        latent_dim_multiplier_exp=emb["latent_dim_multiplier_exp"],
        target_latent_hw=tuple(emb["target_latent_hw"]),
        input_hw=tuple(emb["input_hw"]),
    )
    net = build_embedding(ecfg, seed=cfg["seed"])
    dim = proto["prototype_dimension"]
    bank = build_bank(cfg["dataset"]["num_classes"], proto["per_class"], net.output_dim,
                      Metric(proto["metric"]), part_hw=(dim, dim),
                      k_for_topk=proto["k_for_topk"], seed=cfg["seed"])
    head = LinearHead(bank.class_of, cfg["dataset"]["num_classes"],
                      w_pos=cfg["head"]["w_pos"], w_neg=cfg["head"]["w_neg"])
    return ProtoPartModel(net, bank, head)


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------

def checkpoint_save(path, model: ProtoPartModel, optimizer: Adam, cfg: dict,
                    cursor: dict, early_stop: EarlyStopState) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    named = named_parameters(model)
    tensor_names = list(named.keys())
    arrays = [named[n][0].data for n in tensor_names]
    adam_names = [n for n in tensor_names if n in optimizer.m]
    for n in adam_names:
        arrays.append(optimizer.m[n])
        arrays.append(optimizer.v[n])
    state = {
        "format_version": 1,
        "config": cfg,
        "cursor": cursor,
        "early_stop": early_stop.to_json(),
        "tensors": tensor_names,
        "adam": {"tensors": adam_names, "t": {n: optimizer.t[n] for n in adam_names},
                 "beta1": optimizer.beta1, "beta2": optimizer.beta2, "eps": optimizer.eps},
        "bank": {
            "class_of": model.bank.class_of.tolist(),
            "metric": model.bank.metric.value,
            "k_for_topk": model.bank.k_for_topk,
            "sources": ([r.to_json() for r in model.bank.sources]
                        if model.bank.sources and model.bank.sources[0] is not None else None),
        },
    }
    (path / "state.json").write_text(json.dumps(state, sort_keys=True, indent=1))
    save_tensors(path / "model.ppxt", arrays)


def checkpoint_load(path):
    """Rebuild (model, optimizer, cfg, cursor, early_stop) from a checkpoint."""
    path = Path(path)
    state_path = path / "state.json"
    if not state_path.exists():
        raise DataError(f"no checkpoint state at {state_path}")
    state = json.loads(state_path.read_text())
    cfg = state["config"]
    model = model_from_config(cfg)
    named = named_parameters(model)
    if list(named.keys()) != state["tensors"]:
        raise DataError(f"checkpoint tensor list {state['tensors']} does not match "
                        f"the model built from its config")
    arrays = load_tensors(path / "model.ppxt")
    n_params = len(state["tensors"])
    for name, arr in zip(state["tensors"], arrays[:n_params]):
        param = named[name][0]
        if param.data.shape != arr.shape:
            raise DataError(f"checkpoint tensor {name} has shape {arr.shape}, "
                            f"model expects {param.data.shape}")
        param.data = arr

    optimizer = Adam(state["adam"]["beta1"], state["adam"]["beta2"], state["adam"]["eps"])
    moment_arrays = arrays[n_params:]
    for i, name in enumerate(state["adam"]["tensors"]):
        optimizer.m[name] = moment_arrays[2 * i]
        optimizer.v[name] = moment_arrays[2 * i + 1]
        optimizer.t[name] = state["adam"]["t"][name]

    bank_meta = state["bank"]
    model.bank.class_of = np.array(bank_meta["class_of"], dtype=int)
    model.bank.k_for_topk = bank_meta["k_for_topk"]
    if bank_meta["sources"] is not None:
        from .prototypes import ProjectionRecord
        model.bank.sources = [ProjectionRecord.from_json(r) for r in bank_meta["sources"]]
    early_stop = EarlyStopState.from_json(state["early_stop"])
    return model, optimizer, cfg, state["cursor"], early_stop


# ---------------------------------------------------------------------------
# the training loop
# ---------------------------------------------------------------------------

def salience_init_bank(model: ProtoPartModel, images: np.ndarray, labels: np.ndarray,
                       seed: int, batch_size: int = 32) -> None:
    """Start each prototype at the highest-norm latent patch of a random
    same-class training image.

    Fresh prototypes drawn blind have no reason to activate on anything in
    particular, which starves the argmax-pooled similarity of learning signal
    at desk scale (no pretrained backbone to lean on).  Seeding them with the
    most activated patch of a real class image gives every prototype concrete
    evidence to refine, and projection keeps the same semantics later on.
    """
    bank = model.bank
    hp, wp = bank.part_hw
    with no_grad():
        feats = np.concatenate([model.embed(images[s:s + batch_size]).data
                                for s in range(0, len(images), batch_size)])
    lat_h, lat_w = feats.shape[2:]
    new = bank.protos.data.copy()
    for pi in range(bank.num_prototypes):
        rng = np.random.default_rng([seed, 0x5A11, pi])
        pool = np.flatnonzero(labels == bank.class_of[pi])
        img = int(pool[rng.integers(len(pool))])
        norms = np.linalg.norm(feats[img], axis=0)
        # restrict to centers where the full part grid fits
        valid = norms[:lat_h - hp + 1, :lat_w - wp + 1]
        h, w = np.unravel_index(int(np.argmax(valid)), valid.shape)
        patch = feats[img][:, h:h + hp, w:w + wp]
        if bank.metric is Metric.L2:
            new[pi] = patch
        else:
            flat = patch.transpose(1, 2, 0).reshape(hp * wp, -1)
            normed, _ = renormalize(Tensor(flat), bank.part_norm)
            new[pi] = normed.data.reshape(hp, wp, -1).transpose(2, 0, 1)
    bank.protos.data = new


def _active_groups(phase: str, warm_epochs_done: int, sched: PhaseSchedule,
                   deformable: bool) -> set:
    if phase == WARM:
        active = {"addon", "prototypes"}
        if deformable and warm_epochs_done >= sched.num_warm_pre_offset_epochs:
            active.add("offsets")
        return active
    if phase == JOINT:
        return {"backbone", "addon", "prototypes", "offsets", "head"}
    if phase == LAST:
        return {"head"}
    raise ContractError(f"no trainable groups for phase {phase!r}")


def _set_trainable(named: dict, active: set) -> None:
    for _, (param, group) in named.items():
        param.requires_grad = group in active
        param.grad = None


def _epoch_breakdown(sums: dict, n_batches: int, weights: LossWeights) -> dict:
    parts = {k: sums[k] / n_batches for k in ("ce", "cluster", "separation", "l1", "ortho")}
    parts["total"] = (parts["ce"] + weights.cluster_coef * parts["cluster"]
                      + weights.separation_coef * parts["separation"]
                      + weights.l1_coef * parts["l1"] + weights.ortho_coef * parts["ortho"])
    return parts


def run_training(cfg: dict, ds: D.PartsDataset, out_dir, stop_after_epoch: int = None,
                 resume: bool = False) -> dict:
    """Execute the full phase schedule; returns a summary dict.

    ``stop_after_epoch`` ends the process cleanly after that many epochs have
    ever completed (for resume testing); ``resume=True`` picks up from the
    checkpoint inside ``out_dir``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_dir = out_dir / "checkpoint"
    log_path = out_dir / "run_log.jsonl"

    tr_cfg = cfg["trainer"]
    sched = PhaseSchedule(
        pre_project_phase_len=tr_cfg["pre_project_phase_len"],
        post_project_phases=tr_cfg["post_project_phases"],
        phase_multiplier=tr_cfg["phase_multiplier"],
        joint_lr_step_size=tr_cfg["joint_lr_step_size"],
        lr_multiplier=tr_cfg["lr_multiplier"],
        num_warm_pre_offset_epochs=tr_cfg["num_warm_pre_offset_epochs"],
    )
    weights = LossWeights(cfg["loss"]["cluster_coef"], cfg["loss"]["separation_coef"],
                          cfg["loss"]["l1_coef"], cfg["loss"]["ortho_coef"])
    aug_cfg = AugmentationConfig(**tr_cfg["augmentation"])
    seed = cfg["seed"]
    plan = sched.plan()

    if resume:
        model, optimizer, saved_cfg, cursor, early = checkpoint_load(ckpt_dir)
        if saved_cfg != cfg:
            raise ConfigError("resume config differs from the checkpointed config")
    else:
        model = model_from_config(cfg)
        optimizer = Adam()
        cursor = {"completed_epochs": 0, "completed_projections": 0,
                  "last_val_acc": None, "pre_halt_steps": 0}
        early = EarlyStopState(patience=tr_cfg["patience"])
        if log_path.exists():
            log_path.unlink()
        train_idx0 = np.asarray(ds.splits["train"], dtype=int)
        salience_init_bank(model, ds.images[train_idx0], ds.labels[train_idx0],
                           seed=seed, batch_size=tr_cfg["batch_size"])

    named = named_parameters(model)
    deformable = model.bank.metric is Metric.DEFORMABLE_COSINE
    train_idx = np.asarray(ds.splits["train"], dtype=int)
    train_images = ds.images[train_idx]
    train_labels = ds.labels[train_idx]
    val_images, val_labels, _ = ds.subset("val")
    batch_size = tr_cfg["batch_size"]

    log_f = open(log_path, "a")

    def log_row(row):
        log_f.write(json.dumps(row, sort_keys=True) + "\n")
        log_f.flush()

    def run_epoch(epoch_number: int, phase: str, counters: dict) -> dict:
        active = _active_groups(phase, counters["warm_done"], sched, deformable)
        lrs = lr_schedule(phase, counters["joint_done"], sched, tr_cfg["base_lrs"],
                          gamma=tr_cfg["lr_gamma"],
                          offsets_active=deformable and "offsets" in active)
        _set_trainable(named, active)
        order_rng = np.random.default_rng([seed, 0x0DE6, epoch_number])
        order = order_rng.permutation(len(train_idx))
        sums = {k: 0.0 for k in ("ce", "cluster", "separation", "l1", "ortho")}
        n_batches = 0
        for start in range(0, len(order), batch_size):
            chosen = order[start:start + batch_size]
            if aug_cfg.enabled:
                matrices = np.stack([
                    draw_augmentation(
                        aug_cfg,
                        np.random.default_rng([seed, 0xA46, epoch_number, int(train_idx[i])]),
                        train_images.shape[2:])
                    for i in chosen])
                batch = apply_transform_batch(train_images[chosen], matrices)
            else:
                batch = train_images[chosen]
            labels = train_labels[chosen]

            if phase == LAST:
                with no_grad():
                    sim = similarity_map(model.embed(batch), model.bank)
                pooled = Tensor(sim.pooled.data)
            else:
                sim = similarity_map(model.embed(batch), model.bank)
                pooled = sim.pooled
            logits = predict(model.head, pooled)
            total, breakdown = overall_loss(logits, pooled, labels, model.bank,
                                            model.head, weights)
            if not math.isfinite(breakdown.total):
                raise NumericError(f"non-finite loss at epoch {epoch_number}: "
                                   f"{breakdown.to_json()}")
            for _, (p, _g) in named.items():
                p.grad = None
            backward(total)
            optimizer.step(named, lrs)
            if model.bank.metric is not Metric.L2:
                renorm_bank_(model.bank)
            for k in sums:
                sums[k] += getattr(breakdown, k)
            n_batches += 1
        _set_trainable(named, {"backbone", "addon", "prototypes", "offsets", "head"})
        return {"lrs": lrs, "loss": _epoch_breakdown(sums, n_batches, weights)}

    # walk the plan from the cursor
    counters = {"warm_done": 0, "joint_done": 0}
    position = 0
    epoch_number = 0
    did_work = False
    summary_halted = early.halted
    for step in plan:
        position += 1
        completed = cursor["completed_epochs"] + cursor["completed_projections"]
        if step[0] == "epoch":
            epoch_number += 1
            is_done = position <= completed
            if not is_done and early.halted:
                continue   # no optimizer steps after the halt
            if step[1] == WARM:
                counters_key = "warm_done"
            elif step[1] == JOINT:
                counters_key = "joint_done"
            else:
                counters_key = None
            if is_done:
                if counters_key:
                    counters[counters_key] += 1
                continue
            info = run_epoch(epoch_number, step[1], counters)
            did_work = True
            if counters_key:
                counters[counters_key] += 1
            v_acc = accuracy(model, val_images, val_labels)
            cursor["completed_epochs"] += 1
            cursor["last_val_acc"] = v_acc
            log_row({"type": "epoch", "epoch": epoch_number, "phase": step[1],
                     "lr": info["lrs"], "loss": info["loss"], "v_acc_val": v_acc,
                     "early_stop": early.to_json()})
            checkpoint_save(ckpt_dir, model, optimizer, cfg, cursor, early)
            if stop_after_epoch is not None and cursor["completed_epochs"] >= stop_after_epoch:
                log_f.close()
                return {"status": "stopped", "completed_epochs": cursor["completed_epochs"],
                        "checkpoint": str(ckpt_dir), "log": str(log_path)}
        else:
            if position <= completed:
                continue
            if early.halted:
                continue
            proj_index = cursor["completed_projections"] + 1
            did_work = True
            project(model.bank, train_images, train_labels, model.embed,
                    image_hw=ds.image_hw, batch_size=batch_size)
            v_acc = accuracy(model, val_images, val_labels)
            preproj = cursor["last_val_acc"]
            early_stop_update(early, v_acc, preproj if preproj is not None else -math.inf)
            cursor["completed_projections"] += 1
            cursor["last_val_acc"] = v_acc
            log_row({"type": "project", "projection_index": proj_index,
                     "after_epoch": epoch_number, "v_acc_val": v_acc,
                     "v_acc_preproj": preproj, "early_stop": early.to_json()})
            checkpoint_save(ckpt_dir, model, optimizer, cfg, cursor, early)
            if early.halted:
                summary_halted = True

    from .metrics import evaluate_model
    mcfg = cfg["metrics"]
    report = evaluate_model(model, ds, "val", noise_sigma=mcfg["noise_sigma"],
                            tau=mcfg["consistency_tau"], seed=seed,
                            n_draws=mcfg["n_noise_draws"],
                            epoch=cursor["completed_epochs"])
    if did_work:   # a no-op resume must not append a duplicate report
        log_row({"type": "metrics", **report.to_json()})
    log_f.close()
    return {
        "status": "halted" if summary_halted else "completed",
        "completed_epochs": cursor["completed_epochs"],
        "completed_projections": cursor["completed_projections"],
        "final_val_acc": cursor["last_val_acc"],
        "final_metrics": report.to_json(),
        "checkpoint": str(ckpt_dir),
        "log": str(log_path),
    }

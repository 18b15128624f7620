"""Trainer: schedule arithmetic, early stopping, lr decay, augmentation,
checkpoint round-trips, determinism, phase freezing, resume replay."""

import copy
import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from protopart import dataset as D
from protopart.config import validate_config
from protopart.errors import ConfigError, ContractError, NumericError
from protopart.tensor import load_tensors
from protopart.trainer import (Adam, AugmentationConfig, EarlyStopState, PhaseSchedule,
                               apply_transform, augment, checkpoint_load, checkpoint_save,
                               draw_augmentation, early_stop_update, lr_schedule, run_training)

BASE_LRS = {"warm": 3e-3, "joint_backbone": 3e-3, "joint_other": 3e-3, "last": 3e-2}


def micro_config(**over):
    user = {
        "seed": 1,
        "dataset": {"num_classes": 3, "n_per_class": 6, "test_per_class": 2, "image_size": 16},
        "embedding": {"blocks": [[6, 2], [8, 2]], "input_hw": [16, 16],
                      "target_latent_hw": [4, 4], "num_addon_layers": 0},
        "prototypes": {"per_class": 1},
        "trainer": {"pre_project_phase_len": 1, "post_project_phases": 2, "batch_size": 8},
    }
    for key, val in over.items():
        section = user.setdefault(key, {})
        if isinstance(val, dict):
            section.update(val)
        else:
            user[key] = val
    return validate_config(user)


@pytest.fixture(scope="module")
def micro_ds():
    return D.generate_synthetic(3, 6, image_size=16, seed=3, test_per_class=2)


class TestPhaseSchedule:
    def test_first_projection_after_twice_phase_len(self):
        plan = PhaseSchedule(pre_project_phase_len=3).plan()
        assert plan[:6] == [("epoch", "warm")] * 3 + [("epoch", "joint")] * 3
        assert plan[6] == ("project",)

    def test_eleven_projections_for_ten_post_phases(self):
        plan = PhaseSchedule(pre_project_phase_len=3, post_project_phases=10).plan()
        assert sum(1 for s in plan if s[0] == "project") == 11
        assert plan[-1] == ("project",)

    def test_cycle_structure(self):
        plan = PhaseSchedule(pre_project_phase_len=2, post_project_phases=1).plan()
        assert plan == ([("epoch", "warm")] * 2 + [("epoch", "joint")] * 2
                        + [("project",)] + [("epoch", "last")] * 2 + [("epoch", "joint")] * 2
                        + [("project",)])

    def test_phase_multiplier_scales_epochs(self):
        plan = PhaseSchedule(pre_project_phase_len=2, post_project_phases=0,
                             phase_multiplier=3).plan()
        assert sum(1 for s in plan if s[0] == "epoch") == 12


class TestEarlyStop:
    def test_monotone_improvement_never_strikes(self):
        s = EarlyStopState(patience=3)
        for acc in (0.5, 0.6, 0.7):
            early_stop_update(s, acc, acc)
            assert s.strikes == 0
        assert not s.halted

    def test_halts_after_exactly_patience_strikes(self):
        s = EarlyStopState(patience=3)
        early_stop_update(s, 0.7, 0.7)
        for _ in range(3):
            assert not s.halted
            early_stop_update(s, 0.6, 0.6)
        assert s.halted and s.strikes == 3

    def test_conjunction_requires_both_declines(self):
        s = EarlyStopState(patience=3)
        early_stop_update(s, 0.7, 0.5)
        # projection accuracy declines but preprojection keeps improving
        for pre in (0.6, 0.7, 0.8):
            early_stop_update(s, 0.6, pre)
            assert s.strikes == 0

    def test_first_call_cannot_strike(self):
        s = EarlyStopState(patience=1)
        early_stop_update(s, 0.0, 0.0)
        assert s.strikes == 0 and not s.halted

    def test_improvement_resets_strikes(self):
        s = EarlyStopState(patience=3)
        early_stop_update(s, 0.7, 0.7)
        early_stop_update(s, 0.6, 0.6)
        assert s.strikes == 1
        early_stop_update(s, 0.8, 0.6)
        assert s.strikes == 0

    def test_update_after_halt_rejected(self):
        s = EarlyStopState(patience=1)
        early_stop_update(s, 0.5, 0.5)
        early_stop_update(s, 0.4, 0.4)
        assert s.halted
        with pytest.raises(ContractError):
            early_stop_update(s, 0.9, 0.9)


class TestLrSchedule:
    def sched(self, **kw):
        return PhaseSchedule(joint_lr_step_size=kw.pop("step", 2),
                             lr_multiplier=kw.pop("mult", 1.0))

    def test_epoch_zero_unchanged(self):
        rates = lr_schedule("joint", 0, self.sched(), BASE_LRS)
        assert rates["backbone"] == BASE_LRS["joint_backbone"]
        assert rates["head"] == BASE_LRS["joint_other"]

    def test_step_decay_arithmetic(self):
        base = dict(BASE_LRS, joint_other=1e-3)
        for done, expect in [(0, 1e-3), (1, 1e-3), (2, 5e-4), (3, 5e-4), (4, 2.5e-4)]:
            rates = lr_schedule("joint", done, self.sched(step=2), base, gamma=0.5)
            assert rates["addon"] == pytest.approx(expect, rel=1e-12)

    def test_multiplier_scales_every_group(self):
        a = lr_schedule("joint", 3, self.sched(mult=1.0), BASE_LRS)
        b = lr_schedule("joint", 3, self.sched(mult=2.0), BASE_LRS)
        for group in a:
            assert b[group] == pytest.approx(2.0 * a[group], rel=1e-12)

    def test_warm_and_last_freeze_the_right_groups(self):
        warm = lr_schedule("warm", 0, self.sched(), BASE_LRS)
        assert warm["backbone"] == 0.0 and warm["head"] == 0.0 and warm["prototypes"] > 0
        last = lr_schedule("last", 0, self.sched(), BASE_LRS)
        assert last["head"] > 0
        assert all(v == 0.0 for g, v in last.items() if g != "head")


class TestAugmentation:
    def test_identity_params_leave_image_unchanged(self):
        rng = np.random.default_rng(0)
        img = rng.uniform(size=(3, 16, 16))
        mask = rng.integers(0, 3, size=(16, 16))
        cfg = AugmentationConfig(rotation_deg=0, distortion_scale=0, shear_px=0, hflip_prob=0)
        out, m = augment(img, cfg, np.random.default_rng(1), mask)
        assert np.array_equal(out, img)
        assert np.array_equal(m, mask)

    def test_disabled_is_identity(self):
        img = np.random.default_rng(2).uniform(size=(3, 8, 8))
        out, _ = augment(img, AugmentationConfig(enabled=False), np.random.default_rng(0))
        assert np.array_equal(out, img)

    def test_forced_flip_is_column_reversal_and_involution(self):
        rng = np.random.default_rng(3)
        img = rng.uniform(size=(1, 8, 8))
        cfg = AugmentationConfig(rotation_deg=0, distortion_scale=0, shear_px=0, hflip_prob=1.0)
        once, _ = augment(img, cfg, np.random.default_rng(5))
        assert np.allclose(once, img[:, :, ::-1], atol=1e-12)
        twice, _ = augment(once, cfg, np.random.default_rng(5))
        assert np.allclose(twice, img, atol=1e-12)

    def test_mask_moves_with_image(self):
        # a planted bright square's centroid must follow the same mapping in
        # both the image and the mask, within a pixel
        img = np.zeros((1, 32, 32))
        mask = np.zeros((32, 32), dtype=int)
        img[0, 6:10, 20:24] = 1.0
        mask[6:10, 20:24] = 2
        cfg = AugmentationConfig()
        for seed in range(5):
            matrix = draw_augmentation(cfg, np.random.default_rng([9, seed]), (32, 32))
            w_img, w_mask = apply_transform(img, matrix, mask)
            if w_img.sum() < 1.0:
                continue  # square left the frame
            iy, ix = np.where(w_img[0] > 0.5)
            my, mx = np.where(w_mask == 2)
            assert len(my) > 0
            assert abs(iy.mean() - my.mean()) <= 1.0
            assert abs(ix.mean() - mx.mean()) <= 1.0

    def test_expected_centroid_under_forward_matrix(self):
        img = np.zeros((1, 32, 32))
        img[0, 8:12, 8:12] = 1.0
        matrix = draw_augmentation(AugmentationConfig(), np.random.default_rng(11), (32, 32))
        warped, _ = apply_transform(img, matrix)
        src = np.array([9.5, 9.5, 1.0])   # (x, y, 1) centroid of the square
        dst = matrix @ np.array([src[0], src[1], 1.0])
        ex, ey = dst[0] / dst[2], dst[1] / dst[2]
        iy, ix = np.where(warped[0] > 0.4)
        assert abs(ix.mean() - ex) <= 1.0
        assert abs(iy.mean() - ey) <= 1.0

    def test_deterministic_per_rng_seed(self):
        img = np.random.default_rng(4).uniform(size=(3, 16, 16))
        cfg = AugmentationConfig()
        a, _ = augment(img, cfg, np.random.default_rng(77))
        b, _ = augment(img, cfg, np.random.default_rng(77))
        assert np.array_equal(a, b)


class TestAdam:
    def test_minimizes_quadratic(self):
        from protopart.tensor import Tensor, backward, sum_
        x = Tensor(np.array([5.0, -3.0]), requires_grad=True)
        opt = Adam()
        named = {"x": (x, "g")}
        for _ in range(400):
            x.grad = None
            loss = sum_(x * x)
            backward(loss)
            opt.step(named, {"g": 0.05})
        assert np.all(np.abs(x.data) < 1e-2)

    def test_zero_lr_group_untouched(self):
        from protopart.tensor import Tensor, backward, sum_
        x = Tensor(np.array([1.0]), requires_grad=True)
        before = x.data.copy()
        opt = Adam()
        loss = sum_(x * x)
        backward(loss)
        opt.step({"x": (x, "g")}, {"g": 0.0})
        assert np.array_equal(x.data, before)


class TestRunTraining:
    def test_schedule_counts_in_log(self, micro_ds, tmp_path):
        cfg = micro_config()
        res = run_training(cfg, micro_ds, tmp_path / "run")
        rows = [json.loads(l) for l in open(res["log"])]
        epochs = [r for r in rows if r["type"] == "epoch"]
        projects = [r for r in rows if r["type"] == "project"]
        # L=1, 2 post phases: warm 1 + joint 1 + 2*(last 1 + joint 1) = 6 epochs,
        # 3 projections (2 scheduled + final)
        assert len(epochs) == 6
        assert len(projects) == 3
        assert [r["phase"] for r in epochs] == ["warm", "joint", "last", "joint", "last", "joint"]
        assert res["status"] in ("completed", "halted")

    def test_logged_loss_breakdowns_resum(self, micro_ds, tmp_path):
        cfg = micro_config()
        res = run_training(cfg, micro_ds, tmp_path / "run")
        lw = cfg["loss"]
        for row in (json.loads(l) for l in open(res["log"])):
            if row["type"] != "epoch":
                continue
            b = row["loss"]
            manual = (b["ce"] + lw["cluster_coef"] * b["cluster"]
                      + lw["separation_coef"] * b["separation"]
                      + lw["l1_coef"] * b["l1"] + lw["ortho_coef"] * b["ortho"])
            assert abs(b["total"] - manual) <= 1e-12

    def test_final_metrics_row_logged(self, micro_ds, tmp_path):
        cfg = micro_config()
        res = run_training(cfg, micro_ds, tmp_path / "run")
        rows = [json.loads(l) for l in open(res["log"])]
        metrics_rows = [r for r in rows if r["type"] == "metrics"]
        assert len(metrics_rows) == 1
        assert metrics_rows[0]["v_acc"] == res["final_metrics"]["v_acc"]
        assert rows[-1]["type"] == "metrics"

    def test_projection_rows_carry_preproj_accuracy(self, micro_ds, tmp_path):
        cfg = micro_config()
        res = run_training(cfg, micro_ds, tmp_path / "run")
        rows = [json.loads(l) for l in open(res["log"])]
        by_epoch = {r["epoch"]: r for r in rows if r["type"] == "epoch"}
        for r in rows:
            if r["type"] == "project":
                assert r["v_acc_preproj"] == by_epoch[r["after_epoch"]]["v_acc_val"]

    def test_bit_identical_reruns(self, micro_ds, tmp_path):
        cfg = micro_config()
        a = run_training(cfg, micro_ds, tmp_path / "a")
        b = run_training(cfg, micro_ds, tmp_path / "b")
        assert Path(a["log"]).read_bytes() == Path(b["log"]).read_bytes()
        assert (Path(a["checkpoint"]) / "model.ppxt").read_bytes() == \
               (Path(b["checkpoint"]) / "model.ppxt").read_bytes()

    def test_resume_replays_identical_log(self, micro_ds, tmp_path):
        cfg = micro_config()
        full = run_training(cfg, micro_ds, tmp_path / "full")
        part = run_training(cfg, micro_ds, tmp_path / "part", stop_after_epoch=3)
        assert part["status"] == "stopped"
        resumed = run_training(cfg, micro_ds, tmp_path / "part", resume=True)
        assert Path(full["log"]).read_bytes() == Path(resumed["log"]).read_bytes()
        assert (Path(full["checkpoint"]) / "model.ppxt").read_bytes() == \
               (Path(resumed["checkpoint"]) / "model.ppxt").read_bytes()

    def test_resume_with_changed_config_rejected(self, micro_ds, tmp_path):
        cfg = micro_config()
        run_training(cfg, micro_ds, tmp_path / "run", stop_after_epoch=2)
        other = micro_config(trainer={"batch_size": 4})
        with pytest.raises(ConfigError):
            run_training(other, micro_ds, tmp_path / "run", resume=True)

    def test_last_phase_freezes_embedding_and_prototypes(self, micro_ds, tmp_path):
        cfg = micro_config()
        # stop right after the first last-only epoch (epoch 3) and compare with
        # the state right after the projection that precedes it
        run_training(cfg, micro_ds, tmp_path / "upto2", stop_after_epoch=2)
        state2 = json.loads((tmp_path / "upto2/checkpoint/state.json").read_text())
        # after epoch 2 the next plan step is the projection, then last
        shutil.copytree(tmp_path / "upto2", tmp_path / "upto3")
        run_training(cfg, micro_ds, tmp_path / "upto3", stop_after_epoch=3, resume=True)
        names2 = state2["tensors"]
        arrays2 = load_tensors(tmp_path / "upto2/checkpoint/model.ppxt")
        arrays3 = load_tensors(tmp_path / "upto3/checkpoint/model.ppxt")
        state3 = json.loads((tmp_path / "upto3/checkpoint/state.json").read_text())
        assert state3["cursor"]["completed_projections"] == 1
        by2 = dict(zip(names2, arrays2))
        by3 = dict(zip(state3["tensors"], arrays3))
        for name in by2:
            if name.startswith(("backbone.", "addon.")):
                assert np.array_equal(by2[name], by3[name]), name   # frozen in last phase
        assert not np.array_equal(by2["head.weight"], by3["head.weight"])

    def test_prototypes_bit_equal_sources_after_final_projection(self, micro_ds, tmp_path):
        cfg = micro_config()
        res = run_training(cfg, micro_ds, tmp_path / "run")
        model, _, _, _, _ = checkpoint_load(res["checkpoint"])
        assert model.bank.sources[0] is not None
        for rec in model.bank.sources:
            assert np.array_equal(model.bank.protos.data[rec.prototype_index],
                                  rec.patch_embedding)

    def test_non_finite_loss_aborts_with_breakdown(self, micro_ds, tmp_path):
        cfg = micro_config()
        bad = copy.deepcopy(micro_ds)
        bad.images = bad.images.copy()
        bad.images[bad.splits["train"][0]] = np.nan
        with pytest.raises(NumericError, match="ce"):
            run_training(cfg, bad, tmp_path / "run")

    def test_halts_only_after_patience_projections(self, micro_ds, tmp_path):
        cfg = micro_config(trainer={"post_project_phases": 6, "patience": 2,
                                    "lr_multiplier": 1e-6})
        # a frozen-in-place model cannot improve, so patience must exhaust
        res = run_training(cfg, micro_ds, tmp_path / "run")
        rows = [json.loads(l) for l in open(res["log"])]
        projects = [r for r in rows if r["type"] == "project"]
        assert res["status"] == "halted"
        assert projects[-1]["early_stop"]["halted"]
        # halting stops optimizer steps: no epoch rows after the halting projection
        halt_idx = rows.index(projects[-1])
        assert all(r["type"] != "epoch" for r in rows[halt_idx:])


class TestCheckpointRoundTrip:
    def test_save_load_save_byte_identical(self, micro_ds, tmp_path):
        cfg = micro_config()
        res = run_training(cfg, micro_ds, tmp_path / "run")
        ck = Path(res["checkpoint"])
        model, opt, cfg2, cursor, early = checkpoint_load(ck)
        checkpoint_save(tmp_path / "again", model, opt, cfg2, cursor, early)
        assert (ck / "state.json").read_bytes() == (tmp_path / "again/state.json").read_bytes()
        assert (ck / "model.ppxt").read_bytes() == (tmp_path / "again/model.ppxt").read_bytes()

    def test_loaded_model_reproduces_validation_accuracy(self, micro_ds, tmp_path):
        from protopart.metrics import accuracy
        cfg = micro_config()
        res = run_training(cfg, micro_ds, tmp_path / "run")
        rows = [json.loads(l) for l in open(res["log"])]
        last_acc = [r for r in rows if r["type"] == "project"][-1]["v_acc_val"]
        model, *_ = checkpoint_load(res["checkpoint"])
        images, labels, _ = micro_ds.subset("val")
        assert accuracy(model, images, labels) == last_acc

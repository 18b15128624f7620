"""CLI: command wiring, exit codes, idempotence, visualization artifacts."""

import json
from pathlib import Path

import numpy as np
import pytest

from protopart.cli import main
from protopart import dataset as D


def write_config(path, doc):
    Path(path).write_text(json.dumps(doc))
    return str(path)


@pytest.fixture(scope="module")
def tiny_cfg_doc():
    return {
        "seed": 5,
        "dataset": {"num_classes": 3, "n_per_class": 6, "test_per_class": 2, "image_size": 16},
        "embedding": {"blocks": [[6, 2], [8, 2]], "input_hw": [16, 16],
                      "target_latent_hw": [4, 4], "num_addon_layers": 0},
        "prototypes": {"per_class": 1},
        "trainer": {"pre_project_phase_len": 1, "post_project_phases": 1, "batch_size": 8},
        "sweep": {"max_trials": 2, "n_startup": 1},
    }


@pytest.fixture(scope="module")
def workspace(tmp_path_factory, tiny_cfg_doc):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root / "cfg.json", tiny_cfg_doc)
    assert main(["gen-data", "--config", cfg, "--out", str(root / "data")]) == 0
    assert main(["train", "--config", cfg, "--data", str(root / "data"),
                 "--out", str(root / "run")]) == 0
    return root, cfg


class TestGenData:
    def test_writes_expected_files(self, workspace):
        root, _ = workspace
        for name in ("manifest.json", "images.ppxt", "masks.ppxt", "labels.ppxt", "splits.json"):
            assert (root / "data" / name).exists()

    def test_rerun_identical_bytes(self, workspace, tmp_path):
        root, cfg = workspace
        assert main(["gen-data", "--config", cfg, "--out", str(tmp_path / "data2")]) == 0
        for name in ("images.ppxt", "masks.ppxt", "labels.ppxt", "splits.json"):
            assert (root / "data" / name).read_bytes() == (tmp_path / "data2" / name).read_bytes()

    def test_bad_class_count_exit_2(self, tmp_path, tiny_cfg_doc):
        doc = json.loads(json.dumps(tiny_cfg_doc))
        doc["dataset"]["num_classes"] = 1
        cfg = write_config(tmp_path / "bad.json", doc)
        assert main(["gen-data", "--config", cfg, "--out", str(tmp_path / "d")]) == 2

    def test_unknown_key_exit_2(self, tmp_path):
        cfg = write_config(tmp_path / "bad.json", {"datasett": {}})
        assert main(["gen-data", "--config", cfg, "--out", str(tmp_path / "d")]) == 2

    def test_missing_config_exit_2(self, tmp_path):
        assert main(["gen-data", "--config", str(tmp_path / "nope.json"),
                     "--out", str(tmp_path / "d")]) == 2


class TestTrain:
    def test_writes_checkpoint_and_log(self, workspace):
        root, _ = workspace
        assert (root / "run" / "checkpoint" / "model.ppxt").exists()
        assert (root / "run" / "checkpoint" / "state.json").exists()
        rows = [json.loads(l) for l in open(root / "run" / "run_log.jsonl")]
        assert any(r["type"] == "project" for r in rows)

    def test_nan_dataset_exit_3(self, workspace, tmp_path):
        root, cfg = workspace
        ds = D.load(root / "data")
        ds.images = ds.images.copy()
        ds.images[ds.splits["train"][0]] = np.nan
        D.save(ds, tmp_path / "nan_data")
        assert main(["train", "--config", cfg, "--data", str(tmp_path / "nan_data"),
                     "--out", str(tmp_path / "run")]) == 3

    def test_missing_data_exit_4(self, workspace, tmp_path):
        _, cfg = workspace
        assert main(["train", "--config", cfg, "--data", str(tmp_path / "missing"),
                     "--out", str(tmp_path / "run")]) == 4


class TestEval:
    def test_report_fields_and_determinism(self, workspace, capsys):
        root, _ = workspace
        args = ["eval", "--checkpoint", str(root / "run" / "checkpoint"),
                "--data", str(root / "data"), "--split", "val"]
        assert main(args) == 0
        first = capsys.readouterr().out
        assert main(args) == 0
        second = capsys.readouterr().out
        assert first == second
        report = json.loads(first)
        for key in ("v_acc", "v_sparse", "v_stab", "v_consist", "proto_score",
                    "obj_acc", "obj_aps"):
            assert 0.0 <= report[key] <= 1.0

    def test_mismatched_dataset_exit_2(self, workspace, tmp_path, tiny_cfg_doc):
        root, _ = workspace
        doc = json.loads(json.dumps(tiny_cfg_doc))
        doc["dataset"]["num_classes"] = 4
        cfg = write_config(tmp_path / "k4.json", doc)
        assert main(["gen-data", "--config", cfg, "--out", str(tmp_path / "d4")]) == 0
        assert main(["eval", "--checkpoint", str(root / "run" / "checkpoint"),
                     "--data", str(tmp_path / "d4")]) == 2

    def test_missing_checkpoint_exit_4(self, workspace, tmp_path):
        root, _ = workspace
        assert main(["eval", "--checkpoint", str(tmp_path / "none"),
                     "--data", str(root / "data")]) == 4


class TestSweepCommand:
    def test_two_trials_with_state_file(self, workspace, tmp_path, capsys):
        root, cfg = workspace
        assert main(["sweep", "--config", cfg, "--data", str(root / "data"),
                     "--out", str(tmp_path / "sw"), "--objective", "aps",
                     "--max-trials", "2"]) == 0
        out = json.loads(capsys.readouterr().out)
        assert out["trials"] == 2
        doc = json.loads((tmp_path / "sw" / "sweep.json").read_text())
        assert len(doc["trials"]) == 2
        assert all(t["proto_score"] is not None for t in doc["trials"]
                   if t["status"] != "failed")
        assert (tmp_path / "sw" / "trial_000").exists()

    def test_resume_continues_from_state(self, workspace, tmp_path, capsys):
        root, cfg = workspace
        args = ["sweep", "--config", cfg, "--data", str(root / "data"),
                "--out", str(tmp_path / "sw2"), "--max-trials"]
        assert main(args + ["1"]) == 0
        capsys.readouterr()
        assert main(args + ["2"]) == 0
        out = json.loads(capsys.readouterr().out)
        assert out["trials"] == 2


class TestThreadCap:
    def test_env_caps_requested_threads(self, monkeypatch):
        from protopart.cli import _thread_cap
        monkeypatch.delenv("PPX_THREADS", raising=False)
        assert _thread_cap(4) == 4
        monkeypatch.setenv("PPX_THREADS", "2")
        assert _thread_cap(4) == 2
        assert _thread_cap(1) == 1
        monkeypatch.setenv("PPX_THREADS", "zero?")
        from protopart.errors import ConfigError
        with pytest.raises(ConfigError):
            _thread_cap(4)


class TestVisualize:
    def test_artifacts_written(self, workspace, tmp_path):
        root, _ = workspace
        out = tmp_path / "viz"
        assert main(["visualize", "--checkpoint", str(root / "run" / "checkpoint"),
                     "--data", str(root / "data"), "--out", str(out)]) == 0
        index = json.loads((out / "index.json").read_text())
        n = index["num_prototypes"]
        sources = list((out / "prototypes").glob("proto_*_source.png"))
        assert len(sources) == n == 3
        assert len(index["prototypes"]) == n
        sheets = list((out / "queries").glob("query_*_sheet.json"))
        assert len(sheets) == 3   # one query per class
        for sheet_path in sheets:
            sheet = json.loads(sheet_path.read_text())
            assert sheet["logit_reconstruction"]["ok"]
            assert sheet["logit_reconstruction"]["max_abs_error"] <= 1e-9
            assert len(sheet["top_prototypes"]) == 3

    def test_png_files_are_valid_png(self, workspace, tmp_path):
        root, _ = workspace
        out = tmp_path / "viz2"
        main(["visualize", "--checkpoint", str(root / "run" / "checkpoint"),
              "--data", str(root / "data"), "--out", str(out)])
        for png in (out / "prototypes").glob("*.png"):
            assert png.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"

    def test_unprojected_checkpoint_rejected(self, workspace, tmp_path, tiny_cfg_doc):
        root, _ = workspace
        # a run stopped before the first projection has no sources
        doc = json.loads(json.dumps(tiny_cfg_doc))
        cfg = write_config(tmp_path / "c.json", doc)
        from protopart.config import load_config
        from protopart.trainer import run_training
        ds = D.load(root / "data")
        run_training(load_config(cfg), ds, tmp_path / "short", stop_after_epoch=1)
        code = main(["visualize", "--checkpoint", str(tmp_path / "short" / "checkpoint"),
                     "--data", str(root / "data"), "--out", str(tmp_path / "viz3")])
        assert code == 2

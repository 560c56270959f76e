import filecmp
import json
import re

import numpy as np
import pytest

from segrefine.cli import main
from segrefine.data import read_dataset

TINY = {
    "data": {"n_samples": 24, "n_strong": 4, "n_validation": 4, "size": 32},
    "model": {"widths": [4, 8], "blocks_per_stage": 1},
    "train": {
        "phase1_epochs": 2,
        "phase2_epochs": 4,
        "batch_size": 4,
        "strong_batch_size": 2,
        "replacement_start_epoch": 2,
        "replacement_period": 2,
        "snapshot_epochs": [0, 2],
        "checkpoint_every": 1,
    },
    "losses": {"rampup_epochs": 2},
}


def _write_config(path, doc=TINY, **train):
    doc = json.loads(json.dumps(doc))
    doc["train"].update(train)
    path.write_text(json.dumps(doc))
    return str(path)


def _same_tree(a, b):
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only:
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    return not mismatch and not errors and all(_same_tree(a / d, b / d) for d in cmp.common_dirs)


@pytest.fixture
def dataset(tmp_path):
    cfg = _write_config(tmp_path / "tiny.json")
    assert main(["gen-data", "--out", str(tmp_path / "data"), "--config", cfg]) == 0
    return tmp_path / "data", cfg


@pytest.fixture
def run_dir(dataset, tmp_path):
    data, cfg = dataset
    out = tmp_path / "run"
    assert main(["train", "--data", str(data), "--out", str(out), "--config", cfg]) == 0
    return out


# ---------------------------------------------------------------------------
# gen-data


def test_gen_data_default_corpus(tmp_path, capsys):
    assert main(["gen-data", "--out", str(tmp_path / "d")]) == 0
    text = capsys.readouterr().out
    assert "pools: strong-train=20 weak-train=200 validation=40" in text
    assert "wrote 260 samples" in text
    assert re.search(r"calibration: .*\(band \[0\.60, 0\.85\]: ok\)", text)
    assert len(read_dataset(tmp_path / "d").samples) == 260


def test_gen_data_same_seed_byte_identical(tmp_path):
    cfg = _write_config(tmp_path / "c.json")
    for name in ("a", "b"):
        assert main(["gen-data", "--out", str(tmp_path / name), "--config", cfg, "--seed", "7"]) == 0
    assert _same_tree(tmp_path / "a", tmp_path / "b")
    assert main(["gen-data", "--out", str(tmp_path / "c"), "--config", cfg, "--seed", "8"]) == 0
    assert not _same_tree(tmp_path / "a", tmp_path / "c")


def test_unknown_config_key_exits_1(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"epochs": 5}}))
    assert main(["gen-data", "--out", str(tmp_path / "d"), "--config", str(bad)]) == 1
    assert "unknown key" in capsys.readouterr().err


def test_paths_section_supplies_directories(tmp_path):
    doc = json.loads(json.dumps(TINY))
    doc["paths"] = {"out": str(tmp_path / "from-config")}
    (tmp_path / "c.json").write_text(json.dumps(doc))
    assert main(["gen-data", "--config", str(tmp_path / "c.json")]) == 0
    assert (tmp_path / "from-config" / "manifest.json").exists()
    assert main(["gen-data"]) == 1


# ---------------------------------------------------------------------------
# train


def test_train_writes_artifacts(run_dir):
    hist = json.loads((run_dir / "history.json").read_text())
    assert [e["epoch"] for e in hist["epochs"]] == [1, 2, 3, 4, 5, 6]
    assert [r["epoch"] for r in hist["replacements"]] == [4, 6]
    assert (run_dir / "checkpoints" / "final.dbck").exists()
    assert (run_dir / "labels" / "overlay.json").exists()
    assert sorted(p.name for p in (run_dir / "snapshots").iterdir()) == ["transfer_epoch0000.png", "transfer_epoch0002.png"]


def test_snapshot_png_is_paletted(run_dir):
    from PIL import Image

    img = Image.open(run_dir / "snapshots" / "transfer_epoch0002.png")
    assert img.mode == "P"
    pal = img.getpalette()[:12]
    assert pal == [0, 0, 0, 255, 105, 180, 255, 215, 0, 30, 144, 255]


def test_transfer_schedule_echo(tmp_path):
    # default 100-epoch pretext, shortened fine-tuning, on a tiny net
    cfg = _write_config(tmp_path / "c.json", phase1_epochs=100, phase2_epochs=10, replacement_start_epoch=5, replacement_period=5, batch_size=8, checkpoint_every=50)
    assert main(["gen-data", "--out", str(tmp_path / "d"), "--config", cfg]) == 0
    assert main(["train", "--data", str(tmp_path / "d"), "--out", str(tmp_path / "r"), "--config", cfg]) == 0
    hist = json.loads((tmp_path / "r" / "history.json").read_text())
    freeze = [e for e in hist["events"] if e["event"] == "freeze-encoder"]
    assert [e["epoch"] for e in freeze] == [100]
    assert [r["epoch"] for r in hist["replacements"]] == [105, 110]
    assert hist["epochs"][99]["phase"] == "pretext" and hist["epochs"][100]["phase"] == "finetune"


def test_baseline_has_no_freeze_events(dataset, tmp_path):
    data, cfg = dataset
    assert main(["train", "--data", str(data), "--out", str(tmp_path / "b"), "--config", cfg, "--variant", "baseline"]) == 0
    hist = json.loads((tmp_path / "b" / "history.json").read_text())
    assert hist["variant"] == "baseline"
    assert not [e for e in hist["events"] if e["event"] == "freeze-encoder"]
    assert [r["epoch"] for r in hist["replacements"]] == [4, 6]


def test_interrupt_and_resume_reproduce_run(dataset, run_dir, tmp_path, capsys):
    data, cfg = dataset
    part = tmp_path / "part"
    assert main(["train", "--data", str(data), "--out", str(part), "--config", cfg, "--stop-after", "3"]) == 0
    assert "resume with --resume" in capsys.readouterr().out
    ck = part / "checkpoints" / "last.dbck"
    assert main(["train", "--data", str(data), "--out", str(part), "--config", cfg, "--resume", str(ck)]) == 0
    for name in ("history.json", "checkpoints/final.dbck", "metrics.json"):
        assert (part / name).read_bytes() == (run_dir / name).read_bytes(), name


def test_resume_under_other_config_exits_1(dataset, tmp_path):
    data, cfg = dataset
    part = tmp_path / "part"
    assert main(["train", "--data", str(data), "--out", str(part), "--config", cfg, "--stop-after", "1"]) == 0
    other = _write_config(tmp_path / "other.json", lr=5e-4)
    assert main(["train", "--data", str(data), "--out", str(part), "--config", other, "--resume", str(part / "checkpoints" / "last.dbck")]) == 1


def test_divergence_exits_2(dataset, tmp_path, capsys):
    data, _ = dataset
    cfg = _write_config(tmp_path / "nan.json", lr=1e30)
    with np.errstate(all="ignore"):
        code = main(["train", "--data", str(data), "--out", str(tmp_path / "r"), "--config", cfg])
    assert code == 2
    assert "non-finite" in capsys.readouterr().err


def test_missing_dataset_exits_1(tmp_path):
    assert main(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "r")]) == 1


# ---------------------------------------------------------------------------
# evaluate


def test_evaluate_ground_truth_is_perfect(dataset, tmp_path):
    data, _ = dataset
    out = tmp_path / "gt.json"
    assert main(["evaluate", "--data", str(data), "--labels", "gt", "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    for per in doc["samples"].values():
        assert all(m["dsc"] == 1.0 and m["iou"] == 1.0 for m in per.values())


def test_evaluate_initial_matches_calibration_line(tmp_path, capsys):
    cfg = _write_config(tmp_path / "c.json")
    assert main(["gen-data", "--out", str(tmp_path / "d"), "--config", cfg]) == 0
    calib = dict(re.findall(r"(\w+)=([0-9.]+)", capsys.readouterr().out.split("calibration:")[1]))
    out = tmp_path / "init.json"
    assert main(["evaluate", "--data", str(tmp_path / "d"), "--labels", "initial", "--out", str(out)]) == 0
    summary = json.loads(out.read_text())["summary"]
    names = {"1": "muscle", "2": "subcutaneous", "3": "visceral"}
    for c, name in names.items():
        assert f"{summary[c]['dsc']:.3f}" == calib[name]


def test_evaluate_output_schema(run_dir, dataset, tmp_path):
    data, _ = dataset
    out = tmp_path / "m.json"
    assert main(["evaluate", "--data", str(data), "--labels", str(run_dir / "labels"), "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert set(doc) == {"schema_version", "variant", "pool", "num_classes", "samples", "summary"}
    assert doc["schema_version"] == 1 and doc["variant"] == "transfer" and doc["pool"] == "weak-train"
    assert len(doc["samples"]) == 16
    for per in doc["samples"].values():
        assert set(per) == {"1", "2", "3"}
        for m in per.values():
            assert set(m) == {"dsc", "iou", "rvd"}
            assert 0.0 <= m["dsc"] <= 1.0 and 0.0 <= m["iou"] <= 1.0
            assert m["rvd"] is None or m["rvd"] >= 0.0
    # the same numbers the training run stored
    assert doc == json.loads((run_dir / "metrics.json").read_text())


def test_evaluate_missing_ids_exits_1(run_dir, dataset, tmp_path, capsys):
    data, _ = dataset
    overlay = json.loads((run_dir / "labels" / "overlay.json").read_text())
    dropped = overlay["labels"].pop(0)["id"]
    (run_dir / "labels" / "overlay.json").write_text(json.dumps(overlay))
    assert main(["evaluate", "--data", str(data), "--labels", str(run_dir / "labels"), "--out", str(tmp_path / "x.json")]) == 1
    assert dropped in capsys.readouterr().err


# ---------------------------------------------------------------------------
# report


def test_report_single_run_has_no_pvalues(run_dir, tmp_path, capsys):
    out = tmp_path / "rep.txt"
    assert main(["report", "--runs", str(run_dir), "--out", str(out)]) == 0
    text = out.read_text()
    assert "Dual Branches with transfer learning" in text
    assert "Wilcoxon" not in text and "Initial Weak labels" not in text
    doc = json.loads(out.with_suffix(".json").read_text())
    assert doc["pvalues"] == {} and doc["runs"] == {"transfer": 1}


def test_report_three_variants(dataset, run_dir, tmp_path):
    data, cfg = dataset
    assert main(["train", "--data", str(data), "--out", str(tmp_path / "b"), "--config", cfg, "--variant", "baseline"]) == 0
    assert main(["evaluate", "--data", str(data), "--labels", "initial", "--out", str(tmp_path / "init.json")]) == 0
    out = tmp_path / "rep.txt"
    assert main(["report", "--runs", str(tmp_path / "init.json"), str(tmp_path / "b"), str(run_dir), "--out", str(out)]) == 0
    text = out.read_text()
    for row in ("Initial Weak labels", "Dual branches without transfer learning", "Dual Branches with transfer learning"):
        assert row in text


def test_report_unpaired_runs_exit_1(run_dir, tmp_path, capsys):
    other = tmp_path / "other.json"
    doc = json.loads((run_dir / "metrics.json").read_text())
    doc["variant"] = "baseline"
    doc["samples"].pop(sorted(doc["samples"])[0])
    other.write_text(json.dumps(doc))
    assert main(["report", "--runs", str(run_dir), str(other), "--out", str(tmp_path / "r.txt")]) == 1
    assert "not paired" in capsys.readouterr().err

import csv
import json
import logging
import shutil
import xml.etree.ElementTree as ET

import pytest

from f2gan_diag import cli, gan
from f2gan_diag.config import ConfigError, ExperimentConfig, load_config

FAST = {"classifiers": {"svm_epochs": 20, "ann_epochs": 20}}


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def fast_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "fast.json"
    path.write_text(json.dumps(FAST))
    return str(path)


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory, fast_config):
    out = tmp_path_factory.mktemp("run")
    base = ["--out", str(out), "--config", fast_config, "--seed", "3", "--epochs", "2"]
    for cmd in ("gen-data", "train", "attack", "train-classifiers", "detect", "classify", "evaluate"):
        assert cli.main([cmd, *base]) == 0, cmd
    return out, base


def test_gen_data_default_rows_and_bytes(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["gen-data", "--out", str(a), "--seed", "9"]) == 0
    assert cli.main(["gen-data", "--out", str(b), "--seed", "9"]) == 0
    assert len(read_csv(a / "data.csv")) == 1097
    assert (a / "data.csv").read_bytes() == (b / "data.csv").read_bytes()


def test_bad_config_path_exits_2(tmp_path):
    assert cli.main(["gen-data", "--out", str(tmp_path), "--config", str(tmp_path / "nope.json")]) == 2


def test_invalid_config_names_field(tmp_path, caplog):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"fdi": {"intensity": -1.0}}))
    with caplog.at_level(logging.ERROR):
        assert cli.main(["gen-data", "--out", str(tmp_path), "--config", str(bad)]) == 2
    assert "fdi.intensity" in caplog.text
    bad.write_text(json.dumps({"train": {"epochs": 5, "bogus": 1}}))
    with pytest.raises(ConfigError, match="train.bogus"):
        load_config(bad)


def test_usage_error_exit_code(tmp_path):
    assert cli.main(["no-such-command"]) == 2
    assert cli.main(["train", "--out", str(tmp_path / "missing")]) == 2


def test_profiles():
    assert ExperimentConfig().train.epochs == 5000
    assert ExperimentConfig.for_profile("desk").train.epochs == 500
    assert ExperimentConfig.for_profile("paper").train.batch_size == 64
    with pytest.raises(ConfigError, match="profile"):
        ExperimentConfig.for_profile("laptop")


def test_config_hash_tracks_content():
    a, b = ExperimentConfig(), ExperimentConfig()
    assert a.config_hash() == b.config_hash()
    b.lam = 2.0
    assert a.config_hash() != b.config_hash()
    assert ExperimentConfig.from_dict(a.to_dict()).config_hash() == a.config_hash()


def test_train_writes_history_and_both_models(run_dir):
    out, _ = run_dir
    for name in ("cgan", "f2gan"):
        assert len(read_csv(out / "models" / f"{name}_history.csv")) == 2
        sidecar = json.loads((out / "models" / f"{name}.json").read_text())
        assert sidecar["variant"] == name and "config_hash" in sidecar
    assert (out / "models/cgan_discriminator.json").read_bytes() != \
        (out / "models/f2gan_discriminator.json").read_bytes()


def test_train_epochs_flag(tmp_path, run_dir):
    out, base = run_dir
    dest = tmp_path / "r"
    dest.mkdir()
    shutil.copy(out / "data.csv", dest / "data.csv")
    assert cli.main(["train", "--out", str(dest), "--seed", "3", "--epochs", "5", "--variant", "cgan"]) == 0
    assert len(read_csv(dest / "models" / "cgan_history.csv")) == 5
    assert not (dest / "models" / "f2gan.json").exists()


def test_training_failure_exits_1(tmp_path, run_dir, monkeypatch, caplog):
    out, _ = run_dir
    dest = tmp_path / "r"
    dest.mkdir()
    shutil.copy(out / "data.csv", dest / "data.csv")

    def boom(*a, **k):
        raise gan.TrainingError("non-finite L_D at epoch 4, batch 2")

    monkeypatch.setattr(cli.gan, "train_gan", boom)
    with caplog.at_level(logging.ERROR):
        assert cli.main(["train", "--out", str(dest), "--variant", "cgan"]) == 1
    assert "epoch 4" in caplog.text


def test_detect_rows_and_strict_verdicts(run_dir):
    out, _ = run_dir
    rows = read_csv(out / "detections_f2gan.csv")
    assert len(rows) == 438
    assert list(rows[0]) == ["sample_id", "score", "verdict", "truth"]
    for r in rows:
        assert r["verdict"] == (gan.FAULT if float(r["score"]) > 0.5 else gan.ANOMALY)


def test_threshold_override_changes_only_verdicts(tmp_path, run_dir):
    out, base = run_dir
    dest = tmp_path / "r"
    shutil.copytree(out, dest)
    args = ["detect", "--out", str(dest), *base[2:], "--variant", "f2gan"]
    assert cli.main([*args, "--threshold", "0.7"]) == 0
    before, after = read_csv(out / "detections_f2gan.csv"), read_csv(dest / "detections_f2gan.csv")
    for a, b in zip(before, after):
        assert (a["sample_id"], a["score"], a["truth"]) == (b["sample_id"], b["score"], b["truth"])
        assert b["verdict"] == (gan.FAULT if float(b["score"]) > 0.7 else gan.ANOMALY)


def test_classify_only_passed_rows(run_dir):
    out, _ = run_dir
    passed = {r["sample_id"] for r in read_csv(out / "detections_f2gan.csv") if r["verdict"] == gan.FAULT}
    preds = read_csv(out / "predictions.csv")
    assert {r["sample_id"] for r in preds} == passed
    header = (out / "predictions.csv").read_text().splitlines()[0]
    assert header == "sample_id,truth,knn,dt,svm,ann,consensus"


def _rewrite_verdicts(path, verdict):
    rows = read_csv(path)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            r["verdict"] = verdict
            w.writerow(r)
    return len(rows)


def test_classify_all_anomaly_gives_empty_body(tmp_path, run_dir, caplog):
    out, base = run_dir
    dest = tmp_path / "r"
    shutil.copytree(out, dest)
    _rewrite_verdicts(dest / "detections_f2gan.csv", gan.ANOMALY)
    with caplog.at_level(logging.WARNING):
        assert cli.main(["classify", "--out", str(dest), *base[2:]]) == 0
    assert "empty" in caplog.text
    lines = (dest / "predictions.csv").read_text().splitlines()
    assert lines == ["sample_id,truth,knn,dt,svm,ann,consensus"]


def test_classify_all_fault_and_deterministic(tmp_path, run_dir):
    out, base = run_dir
    dest = tmp_path / "r"
    shutil.copytree(out, dest)
    n = _rewrite_verdicts(dest / "detections_f2gan.csv", gan.FAULT)
    assert cli.main(["classify", "--out", str(dest), *base[2:]]) == 0
    first = (dest / "predictions.csv").read_bytes()
    assert len(first.splitlines()) == n + 1
    assert cli.main(["classify", "--out", str(dest), *base[2:]]) == 0
    assert (dest / "predictions.csv").read_bytes() == first


def test_classify_missing_model_names_it(tmp_path, run_dir, caplog):
    out, base = run_dir
    dest = tmp_path / "r"
    shutil.copytree(out, dest)
    (dest / "models" / "stage2_svm.json").unlink()
    with caplog.at_level(logging.ERROR):
        assert cli.main(["classify", "--out", str(dest), *base[2:]]) == 1
    assert "svm" in caplog.text


def test_evaluate_outputs(run_dir):
    out, _ = run_dir
    rep = json.loads((out / "report.json").read_text())
    fields = {"accuracy", "precision", "recall", "f1", "auc", "fault_mean", "fault_std",
              "fdi_mean", "fdi_std", "kl_divergence"}
    assert set(rep["detection"]) == {"cgan", "f2gan"}
    for v in rep["detection"].values():
        assert set(v) == fields
    assert set(rep["classification"]) == {"knn", "dt", "svm", "ann"}
    for v in rep["classification"].values():
        assert set(v) == {"accuracy", "precision", "recall", "f1"}
    md = (out / "report.md").read_text()
    table3 = [l for l in md.splitlines() if l.startswith("| ") and l.split("|")[1].strip() in
              ("KNN", "DT", "SVM", "ANN")]
    assert len(table3) == 4 and all(len(l.strip("|").split("|")) == 5 for l in table3)
    root = ET.fromstring((out / "roc.svg").read_text())
    ids = {el.get("id") for el in root.iter("{http://www.w3.org/2000/svg}polyline")}
    assert ids == {"roc-cgan", "roc-f2gan"}
    summary = read_csv(out / "score_summary.csv")
    assert len(summary) == 4
    manifest = json.loads((out / "manifest.json").read_text())
    assert set(manifest["stages"]) >= {"gen-data", "train", "attack", "detect", "classify", "evaluate"}
    listed = {f for s in manifest["stages"].values() for f in s["files"]}
    assert "report.json" in listed and all(not f.startswith("/") for f in listed)


def test_evaluate_refuses_missing_truth(tmp_path, run_dir):
    out, base = run_dir
    dest = tmp_path / "r"
    shutil.copytree(out, dest)
    for name in ("cgan", "f2gan"):
        rows = read_csv(dest / f"detections_{name}.csv")
        with open(dest / f"detections_{name}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sample_id", "score", "verdict"])
            for r in rows:
                w.writerow([r["sample_id"], r["score"], r["verdict"]])
    assert cli.main(["evaluate", "--out", str(dest), *base[2:]]) == 2


def test_detect_rejects_schema_mismatch(tmp_path, run_dir):
    out, base = run_dir
    dest = tmp_path / "r"
    shutil.copytree(out, dest)
    bad = tmp_path / "bad.csv"
    bad.write_text("a,b,label\n1,2,S1\n")
    assert cli.main(["detect", "--out", str(dest), *base[2:], "--input", str(bad)]) == 2

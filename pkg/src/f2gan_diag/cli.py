"""Command-line pipeline: data, GAN training, attack synthesis, two-stage inference, evaluation.

Every command works inside one run directory (``--out``). Stages hand over
files, so each can be re-run on its own; ``repro`` chains them all.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, classify as cl, dataset as ds, fdi, gan, metrics as mt, report
from .config import VARIANTS, ConfigError, ExperimentConfig, load_config, save_config
from .rng import stream

log = logging.getLogger("f2gan_diag")

DATA_CSV = "data.csv"
SPLIT_JSON = "split.json"
FDI_CSV = "fdi.csv"
DETECTION_CSV = "detection_test.csv"
SCENARIO_JSON = "attack_scenario.json"
MODELS_DIR = "models"
STAGE2_TEST_CSV = "stage2_test_predictions.csv"
PREDICTIONS_CSV = "predictions.csv"
REPORT_JSON = "report.json"
MANIFEST_JSON = "manifest.json"


class UsageError(Exception):
    """Bad invocation or missing inputs the user has to supply; exit code 2."""


# --- run directory helpers ------------------------------------------------------

class Run:
    def __init__(self, out, cfg: ExperimentConfig):
        self.out = Path(out)
        self.cfg = cfg
        self.hash = cfg.config_hash()

    def path(self, name) -> Path:
        return self.out / name

    def require(self, name, hint: str) -> Path:
        p = self.path(name)
        if not p.exists():
            raise UsageError(f"missing {p}; run `{hint}` first")
        return p

    def record(self, stage: str, files, seconds: float) -> None:
        """Merge one stage into the manifest; paths are stored relative to the run directory."""
        mpath = self.path(MANIFEST_JSON)
        manifest = json.loads(mpath.read_text()) if mpath.exists() else {}
        if manifest.get("config_hash") not in (None, self.hash):
            log.warning("config changed since earlier stages (hash %s -> %s)",
                        manifest["config_hash"], self.hash)
            manifest["stages"] = {}
        manifest.update({"version": __version__, "config_hash": self.hash, "seed": self.cfg.seed,
                         "profile": self.cfg.profile})
        rel = sorted(str(Path(f).relative_to(self.out)) for f in files)
        manifest.setdefault("stages", {})[stage] = {"files": rel, "seconds": round(seconds, 3)}
        mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _split(run: Run, data: ds.LabeledDataset):
    return ds.stratified_split(data.labels, run.cfg.split_ratio, stream(run.cfg.seed, "split"))


def _load_data(run: Run) -> ds.LabeledDataset:
    return ds.load_csv(run.require(DATA_CSV, "gen-data"))


def _variants(args) -> list[str]:
    return [args.variant] if args.variant else list(VARIANTS)


# --- stages --------------------------------------------------------------------

def cmd_gen_data(run: Run, args) -> list[Path]:
    run.out.mkdir(parents=True, exist_ok=True)
    data = ds.generate_synthetic_dataset(run.cfg.dataset, stream(run.cfg.seed, "data"))
    ds.save_csv(data, run.path(DATA_CSV))
    save_config(run.cfg, run.path("config.json"))
    log.info("wrote %d rows to %s", len(data), run.path(DATA_CSV))
    return [run.path(DATA_CSV), run.path("config.json")]


def cmd_train(run: Run, args) -> list[Path]:
    data = _load_data(run)
    tr_idx, te_idx = _split(run, data)
    split = {"config_hash": run.hash, "train": tr_idx.tolist(), "test": te_idx.tolist()}
    run.path(SPLIT_JSON).write_text(json.dumps(split))
    train = data.subset(tr_idx)
    norm = ds.fit_normalizer(train)
    x = norm.apply(train.samples)
    files = [run.path(SPLIT_JSON)]
    for name in _variants(args):
        cfg = run.cfg.train_config()
        every = max(1, cfg.epochs // 10)

        def progress(epoch, row, name=name):
            if (epoch + 1) % every == 0:
                log.info("%s epoch %d: L_D %.4f fool %.4f L_FM %.4f D(x) %.3f D(G(z)) %.3f",
                         name, epoch + 1, *row)

        t = time.perf_counter()
        trained = gan.train_gan(x, run.cfg.architecture(name), run.cfg.variant(name), cfg, progress)
        log.info("%s trained in %.1f s", name, time.perf_counter() - t)
        paths = gan.save_gan(trained, run.path(MODELS_DIR), norm.to_dict(), {"config_hash": run.hash})
        files += list(paths.values())
    return files


def cmd_attack(run: Run, args) -> list[Path]:
    cfg = run.cfg
    data = _load_data(run)
    tr_idx, te_idx = _split(run, data)
    stats = fdi.FaultStatistics.fit(data.samples[tr_idx])
    spec = cfg.fdi
    spec.validate()
    fake = fdi.synthesize_fdi_features(stats, spec, stream(cfg.seed, "attack"))
    ds.save_csv(ds.LabeledDataset(fake, np.full(len(fake), -1)), run.path(FDI_CSV))
    det = ds.build_detection_test_set(data.subset(te_idx), fake, stream(cfg.seed, "mix"))
    ds.save_csv(det.as_dataset(), run.path(DETECTION_CSV))

    # stealthiness check on a random measurement system, kept alongside the data
    rng = stream(cfg.seed, "attack", "scenario")
    model = fdi.MeasurementModel.random(20, 8, 0.01, rng)
    z = fdi.measure(model, rng.normal(size=8), rng)
    attack = fdi.craft_stealthy_attack(model, rng.normal(size=8))
    check = fdi.verify_unobservability(model, z, attack)
    fdi.save_scenario(run.path(SCENARIO_JSON), model, attack, cfg.seed)
    scen = json.loads(run.path(SCENARIO_JSON).read_text())
    scen["check"] = {"residual": check.residual, "attacked_residual": check.attacked_residual,
                     "delta": check.delta, "estimate_shift_error": check.estimate_shift_error}
    scen["config_hash"] = run.hash
    run.path(SCENARIO_JSON).write_text(json.dumps(scen, indent=2))
    log.info("wrote %d FDI rows; detection set has %d rows", len(fake), len(det))
    return [run.path(FDI_CSV), run.path(DETECTION_CSV), run.path(SCENARIO_JSON)]


def cmd_train_classifiers(run: Run, args) -> list[Path]:
    data = _load_data(run)
    tr_idx, te_idx = _split(run, data)
    train, test = data.subset(tr_idx), data.subset(te_idx)
    norm = ds.fit_normalizer(train)
    models = cl.train_all(norm.apply(train.samples), train.labels, run.cfg.classifiers, run.cfg.seed)
    paths = cl.save_models(models, run.path(MODELS_DIR), DATA_CSV, tr_idx,
                           {**norm.to_dict(), "config_hash": run.hash})
    preds = models.predict(norm.apply(test.samples))
    _write_predictions(run.path(STAGE2_TEST_CSV), te_idx.tolist(), test.label_names(), preds)
    return list(paths.values()) + [run.path(STAGE2_TEST_CSV)]


def _write_predictions(path, ids, truths, preds: dict) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "truth", *cl.MODEL_NAMES, "consensus"])
        for i, sid in enumerate(ids):
            row = [int(preds[m][i]) for m in cl.MODEL_NAMES]
            agreed = cl.consensus(row)
            w.writerow([sid, truths[i], *(ds.FAULT_CLASSES[v] for v in row),
                        cl.UNDECIDED if agreed is None else ds.FAULT_CLASSES[agreed]])


def _threshold(run: Run, args) -> float:
    """``--threshold`` is a run-time override; it does not alter the config hash."""
    t = run.cfg.threshold if args.threshold is None else args.threshold
    if not 0 <= t <= 1:
        raise UsageError(f"--threshold: must lie in [0, 1], got {t}")
    return t


def _input_set(run: Run, args) -> tuple[Path, ds.LabeledDataset]:
    path = Path(args.input) if args.input else run.require(DETECTION_CSV, "attack")
    return path, ds.load_csv(path, allow_fdi=True)


def cmd_detect(run: Run, args) -> list[Path]:
    threshold = _threshold(run, args)
    _, samples = _input_set(run, args)
    files = []
    for name in _variants(args):
        if not (run.path(MODELS_DIR) / f"{name}.json").exists():
            raise FileNotFoundError(f"model {name!r} is not trained in {run.path(MODELS_DIR)}")
        trained, norm = gan.load_gan(run.path(MODELS_DIR), name)
        x, n_clipped = ds.Normalizer.from_dict(norm).apply_counted(samples.samples)
        if n_clipped:
            log.warning("%d values outside the training range were clamped", n_clipped)
        scores, _ = gan.discriminate_batch(trained, x)
        out = run.path(f"detections_{name}.csv")
        with open(out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sample_id", "score", "verdict", "truth"])
            for i, (s, lab) in enumerate(zip(scores, samples.labels)):
                w.writerow([i, repr(float(s)), gan.verdict(float(s), threshold),
                            gan.FAULT if lab >= 0 else gan.ANOMALY])
        files.append(out)
        log.info("%s: %d of %d samples passed as internal faults", name,
                 int(np.sum(scores > threshold)), len(scores))
    return files


def _read_detections(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        need = {"sample_id", "score", "verdict"}
        missing = need - set(reader.fieldnames or [])
        if missing:
            raise ds.SchemaError(f"{path}: missing column(s) {sorted(missing)}")
        return list(reader)


def cmd_classify(run: Run, args) -> list[Path]:
    variant = args.variant or "f2gan"
    det_rows = _read_detections(run.require(f"detections_{variant}.csv", "detect"))
    _, samples = _input_set(run, args)
    if len(det_rows) != len(samples):
        raise ds.SchemaError(f"detections ({len(det_rows)} rows) and samples ({len(samples)}) differ")
    models = cl.load_models(run.path(MODELS_DIR), base_dir=run.out)
    knn_meta = json.loads((run.path(MODELS_DIR) / "stage2_knn.json").read_text())
    norm = ds.Normalizer.from_dict(knn_meta["normalization"])
    keep = [int(r["sample_id"]) for r in det_rows if r["verdict"] == gan.FAULT]
    refused = len(det_rows) - len(keep)
    if refused:
        log.info("%d anomaly rows refused: no classification", refused)
    if not keep:
        log.warning("no sample was passed as an internal fault; prediction file is empty")
    names = samples.label_names()
    preds = models.predict(norm.apply(samples.samples[keep])) if keep else \
        {m: np.empty(0, dtype=np.int64) for m in cl.MODEL_NAMES}
    out = run.path(PREDICTIONS_CSV)
    _write_predictions(out, keep, [names[i] for i in keep], preds)
    return [out]


def _read_predictions(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return rows


def cmd_evaluate(run: Run, args) -> list[Path]:
    cfg = run.cfg
    threshold = _threshold(run, args)
    detection, curves, summary = {}, {}, []
    files = []
    for name in VARIANTS:
        path = run.path(f"detections_{name}.csv")
        if not path.exists():
            continue
        rows = _read_detections(path)
        if rows and "truth" not in rows[0]:
            raise ds.SchemaError(f"{path}: no truth column; evaluation needs ground truth")
        scores = np.array([float(r["score"]) for r in rows])
        truth = np.array([r["truth"] == gan.FAULT for r in rows])
        detection[name] = mt.detection_report(scores, truth, threshold)
        curves[name] = mt.roc_auc(scores, truth)
        report.write_roc_csv(curves[name], run.path(f"roc_{name}.csv"))
        files.append(run.path(f"roc_{name}.csv"))
        for group, sel in (("internal_fault", truth), ("fdi", ~truth)):
            st = mt.score_stats(scores[sel], group)
            summary.append((name, group, st.mean, st.std, st.count))
    if not detection:
        raise UsageError(f"no detections_*.csv in {run.out}; run `detect` first")

    stage2_rows = _read_predictions(run.require(STAGE2_TEST_CSV, "train-classifiers"))
    truth = [ds.CLASS_INDEX[r["truth"]] for r in stage2_rows]
    classification = {}
    for m in cl.MODEL_NAMES:
        pred = [ds.CLASS_INDEX[r[m]] for r in stage2_rows]
        classification[m] = mt.prf1(mt.confusion(pred, truth, ds.N_CLASSES), "macro")

    meta = {"config_hash": run.hash, "seed": cfg.seed, "profile": cfg.profile,
            "epochs": cfg.train.epochs, "threshold": threshold, "fdi_intensity": cfg.fdi.intensity,
            "detection_samples": len(rows), "stage2_test_samples": len(stage2_rows)}
    pred_path = run.path(PREDICTIONS_CSV)
    if pred_path.exists():
        pipe = _read_predictions(pred_path)
        faults = [r for r in pipe if r["truth"] in ds.CLASS_INDEX]
        meta["pipeline"] = {
            "classified": len(pipe),
            "fdi_passed_stage1": len(pipe) - len(faults),
            "consensus_correct": sum(r["consensus"] == r["truth"] for r in faults),
            "undecided": sum(r["consensus"] == cl.UNDECIDED for r in pipe),
        }
    result = mt.EvaluationReport(detection, classification, meta)
    run.path(REPORT_JSON).write_text(json.dumps(result.to_dict(), indent=2, sort_keys=True) + "\n")
    report.write_text(run.path("report.md"), report.markdown_report(result))
    report.write_text(run.path("roc.svg"), report.roc_svg(curves))
    report.write_score_summary(summary, run.path("score_summary.csv"))
    files += [run.path(n) for n in (REPORT_JSON, "report.md", "roc.svg", "score_summary.csv")]
    return files


def cmd_repro(run: Run, args) -> list[Path]:
    files = []
    args.variant = None
    for stage, fn in STAGES:
        t = time.perf_counter()
        produced = fn(run, args)
        run.record(stage, produced, time.perf_counter() - t)
        files += produced
    return files


STAGES = [
    ("gen-data", cmd_gen_data),
    ("train", cmd_train),
    ("attack", cmd_attack),
    ("train-classifiers", cmd_train_classifiers),
    ("detect", cmd_detect),
    ("classify", cmd_classify),
    ("evaluate", cmd_evaluate),
]
COMMANDS = dict(STAGES, repro=cmd_repro)


# --- entry point ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="f2gan-diag", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config JSON (defaults when omitted)")
    common.add_argument("--seed", type=int, help="root seed; overrides the config")
    common.add_argument("--out", default="run", help="run directory (default: ./run)")
    common.add_argument("--profile", choices=["paper", "desk"], help="epoch profile: paper=5000, desk=500")
    common.add_argument("--epochs", type=int, help="override the GAN epoch count")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")
    helps = {
        "gen-data": "generate the labeled fault dataset",
        "train": "train the conventional GAN and/or F2GAN on the 80%% split",
        "attack": "synthesize FDI samples and the detection test set",
        "train-classifiers": "train the four stage-2 classifiers",
        "detect": "score the detection test set with a trained discriminator",
        "classify": "classify samples that stage 1 passed as internal faults",
        "evaluate": "write report.json, report.md, ROC CSV/SVG and score summary",
        "repro": "run every stage in order under one seed",
    }
    for name, text in helps.items():
        sp = sub.add_parser(name, parents=[common], help=text, description=text)
        if name in ("train", "detect", "classify"):
            sp.add_argument("--variant", choices=list(VARIANTS),
                            help="model variant (train/detect: both when omitted; classify: f2gan)")
        if name in ("detect", "classify"):
            sp.add_argument("--input", help="samples CSV (default: <out>/detection_test.csv)")
        if name in ("detect", "repro", "evaluate"):
            sp.add_argument("--threshold", type=float, help="detection threshold (default 0.5)")
    return p


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.profile:
        cfg.apply_profile(args.profile)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    cfg.validate()
    return cfg


def _setup_logging() -> None:
    level = os.environ.get("F2GAN_DIAG_LOG", "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if not hasattr(args, "variant"):
        args.variant = None
    if not hasattr(args, "input"):
        args.input = None
    if not hasattr(args, "threshold"):
        args.threshold = None
    try:
        cfg = resolve_config(args)
        run = Run(args.out, cfg)
        if args.command != "gen-data" and args.command != "repro" and not run.out.is_dir():
            raise UsageError(f"run directory {run.out} does not exist")
        run.out.mkdir(parents=True, exist_ok=True)
        t = time.perf_counter()
        files = COMMANDS[args.command](run, args)
        if args.command != "repro":
            run.record(args.command, files, time.perf_counter() - t)
    except (ConfigError, UsageError, ds.SchemaError) as exc:
        log.error("%s", exc)
        return 2
    except (gan.TrainingError, FileNotFoundError, ValueError, FloatingPointError, OSError) as exc:
        log.error("%s", exc)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

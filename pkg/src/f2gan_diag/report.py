"""Human-readable outputs: markdown tables, ROC CSV/SVG, score-distribution summary."""
from __future__ import annotations

import csv
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .metrics import DetectionReport, EvaluationReport, RocCurve, Scores

DETECTION_ROWS = (
    ("Accuracy", "accuracy"),
    ("Precision", "precision"),
    ("Recall", "recall"),
    ("F1-score", "f1"),
    ("AUC", "auc"),
    ("Mean score (internal fault)", "fault_mean"),
    ("Std score (internal fault)", "fault_std"),
    ("Mean score (FDI)", "fdi_mean"),
    ("Std score (FDI)", "fdi_std"),
    ("KL divergence", "kl_divergence"),
)
LABELS = {"cgan": "Conventional GAN", "f2gan": "F2GAN"}
STAGE2_LABELS = {"knn": "KNN", "dt": "DT", "svm": "SVM", "ann": "ANN"}
COLORS = {"cgan": "#d62728", "f2gan": "#1f77b4"}


def detection_table(reports: dict[str, DetectionReport]) -> str:
    names = list(reports)
    lines = ["| Metric | " + " | ".join(LABELS.get(n, n) for n in names) + " |",
             "|---|" + "---|" * len(names)]
    for label, key in DETECTION_ROWS:
        lines.append(f"| {label} | " + " | ".join(f"{getattr(reports[n], key):.4f}" for n in names) + " |")
    return "\n".join(lines)


def classification_table(scores: dict[str, Scores]) -> str:
    lines = ["| Model | Accuracy (%) | Precision (%) | Recall (%) | F1-score (%) |",
             "|---|---|---|---|---|"]
    for name, s in scores.items():
        vals = (s.accuracy, s.precision, s.recall, s.f1)
        lines.append(f"| {STAGE2_LABELS.get(name, name)} | " + " | ".join(f"{100 * v:.2f}" for v in vals) + " |")
    return "\n".join(lines)


def markdown_report(report: EvaluationReport) -> str:
    parts = ["# Evaluation report", ""]
    meta = report.meta
    if meta:
        parts += [f"- {k}: {v}" for k, v in sorted(meta.items()) if not isinstance(v, dict)]
        parts.append("")
    parts += ["## Stage 1: internal fault vs FDI detection", "", detection_table(report.detection), ""]
    parts += ["## Stage 2: switch-fault classification", "", classification_table(report.classification), ""]
    return "\n".join(parts)


def write_roc_csv(curve: RocCurve, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "fpr", "tpr"])
        for t, f, p in zip(curve.thresholds, curve.fpr, curve.tpr):
            w.writerow([repr(float(t)), repr(float(f)), repr(float(p))])


def write_score_summary(rows: list[tuple[str, str, float, float, int]], path) -> None:
    """Rows of (variant, group, mean, std, count)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "group", "mean", "std", "count"])
        for variant, group, mean, std, count in rows:
            w.writerow([variant, group, f"{mean:.6f}", f"{std:.6f}", count])


def roc_svg(curves: dict[str, RocCurve], size: int = 400, pad: int = 50) -> str:
    """Both ROC curves as polylines on one unit square, with the chance diagonal."""
    span = size - 2 * pad

    def pt(f, t):
        return f"{pad + f * span:.2f},{pad + (1 - t) * span:.2f}"

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
           f'viewBox="0 0 {size} {size}">',
           f'<rect x="{pad}" y="{pad}" width="{span}" height="{span}" fill="white" stroke="black"/>',
           f'<line x1="{pad}" y1="{pad + span}" x2="{pad + span}" y2="{pad}" '
           'stroke="gray" stroke-dasharray="4,4"/>',
           f'<text x="{size / 2}" y="{size - 12}" text-anchor="middle" font-size="13">False positive rate</text>',
           f'<text x="14" y="{size / 2}" text-anchor="middle" font-size="13" '
           f'transform="rotate(-90 14 {size / 2})">True positive rate</text>']
    for i, (name, c) in enumerate(curves.items()):
        color = COLORS.get(name, "black")
        pts = " ".join(pt(f, t) for f, t in zip(np.asarray(c.fpr), np.asarray(c.tpr)))
        out.append(f'<polyline id="roc-{escape(name)}" fill="none" stroke="{color}" '
                   f'stroke-width="2" points="{pts}"/>')
        label = escape(f"{LABELS.get(name, name)} (AUC = {c.auc:.4f})")
        out.append(f'<text x="{pad + span - 8}" y="{pad + span - 12 - 18 * i}" text-anchor="end" '
                   f'font-size="12" fill="{color}">{label}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_text(path, text: str) -> Path:
    path = Path(path)
    path.write_text(text)
    return path

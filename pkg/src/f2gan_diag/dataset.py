"""Inverter switch-fault dataset: schema, synthetic generator, CSV I/O, scaling, splits.

Schema v1 is 16 named feature columns followed by ``label``. Labels are the
12 fault classes below, or ``FDI`` for injected anomaly rows in a detection
test file.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

FEATURES = (
    "v_rms_a", "v_rms_b", "v_rms_c",
    "i_rms_a", "i_rms_b", "i_rms_c",
    "frequency",
    "v_thd", "i_thd",
    "v_dc_offset", "i_dc_offset",
    "v_unbalance", "i_unbalance",
    "p_active", "q_reactive",
    "mode_flag",
)
N_FEATURES = len(FEATURES)
COL = {name: i for i, name in enumerate(FEATURES)}

# Voltage/current measurement slots an injection can touch.
VI_SLOTS = tuple(COL[n] for n in FEATURES if n.startswith(("v_", "i_")))

FAULT_CLASSES = ("S1", "S2", "S3", "S4", "S5", "S6",
                 "S1S4", "S2S5", "S3S6", "S1S2", "S3S4", "S5S6")
N_CLASSES = len(FAULT_CLASSES)
CLASS_INDEX = {name: i for i, name in enumerate(FAULT_CLASSES)}
FDI_LABEL = "FDI"

# Three-leg bridge numbering: (phase, polarity). An open upper switch loses the
# positive half-cycle of its phase current, so the DC offset goes negative.
SWITCHES = {
    "S1": (0, -1), "S4": (0, +1),
    "S3": (1, -1), "S6": (1, +1),
    "S5": (2, -1), "S2": (2, +1),
}

NOMINAL = {
    "v_rms": 1.0, "i_rms": 1.0, "frequency": 60.0,
    "v_thd": 0.02, "i_thd": 0.03, "v_unbalance": 0.01,
    "q_reactive": 0.10,
}

DEFAULT_NOISE = {
    "v_rms_a": 0.02, "v_rms_b": 0.02, "v_rms_c": 0.02,
    "i_rms_a": 0.075, "i_rms_b": 0.075, "i_rms_c": 0.075,
    "frequency": 0.05,
    "v_thd": 0.01, "i_thd": 0.06,
    "v_dc_offset": 0.01, "i_dc_offset": 0.1,
    "v_unbalance": 0.01, "i_unbalance": 0.075,
    "p_active": 0.075, "q_reactive": 0.04,
    "mode_flag": 0.0,
}


class SchemaError(ValueError):
    pass


def switches_of(label: str) -> list[str]:
    return [label[i:i + 2] for i in range(0, len(label), 2)]


def fault_signature(label: str) -> np.ndarray:
    """Nominal-condition feature means for one fault class (grid-connected, full load)."""
    v = np.full(3, NOMINAL["v_rms"])
    i = np.full(3, NOMINAL["i_rms"])
    v_thd, i_thd = NOMINAL["v_thd"], NOMINAL["i_thd"]
    v_dc = i_dc = 0.0
    q = NOMINAL["q_reactive"]
    for sw in switches_of(label):
        phase, pol = SWITCHES[sw]
        i[phase] *= 0.6 if i[phase] > 0.9 else 0.12
        v[phase] -= 0.03
        i_thd += 0.22
        v_thd += 0.025
        i_dc += 0.32 * pol
        v_dc += (0.02, 0.03, 0.04)[phase] * pol
        q += 0.04
    sig = np.empty(N_FEATURES)
    sig[0:3] = v
    sig[3:6] = i
    sig[COL["frequency"]] = NOMINAL["frequency"]
    sig[COL["v_thd"]] = v_thd
    sig[COL["i_thd"]] = i_thd
    sig[COL["v_dc_offset"]] = v_dc
    sig[COL["i_dc_offset"]] = i_dc
    sig[COL["v_unbalance"]] = NOMINAL["v_unbalance"] + (v.max() - v.min()) / v.mean()
    sig[COL["i_unbalance"]] = (i.max() - i.min()) / i.mean()
    sig[COL["p_active"]] = float(np.mean(v * i))
    sig[COL["q_reactive"]] = q
    sig[COL["mode_flag"]] = 0.0
    return sig


def default_signatures() -> dict[str, list[float]]:
    return {c: fault_signature(c).tolist() for c in FAULT_CLASSES}


@dataclass
class DatasetConfig:
    n_samples: int = 1097
    signatures: dict = field(default_factory=default_signatures)
    noise_std: dict = field(default_factory=lambda: dict(DEFAULT_NOISE))
    noise_scale: float = 1.0
    load_range: tuple = (0.85, 1.0)
    islanded_fraction: float = 0.3
    islanded_freq_shift: float = -0.3
    islanded_voltage_shift: float = -0.02

    def validate(self) -> None:
        if self.n_samples < N_CLASSES:
            raise ValueError(f"n_samples: need at least {N_CLASSES}, got {self.n_samples}")
        missing = [c for c in FAULT_CLASSES if c not in self.signatures]
        if missing:
            raise ValueError(f"signatures: missing classes {missing}")
        unknown = [c for c in self.signatures if c not in CLASS_INDEX]
        if unknown:
            raise ValueError(f"signatures: unknown classes {unknown}")
        for c, sig in self.signatures.items():
            if len(sig) != N_FEATURES:
                raise ValueError(f"signatures.{c}: expected {N_FEATURES} values, got {len(sig)}")
        sigs = self.signature_matrix()
        for a in range(N_CLASSES):
            for b in range(a + 1, N_CLASSES):
                if np.allclose(sigs[a], sigs[b], rtol=0, atol=1e-9):
                    raise ValueError(f"signatures: {FAULT_CLASSES[a]} and {FAULT_CLASSES[b]} collide")
        unknown = [k for k in self.noise_std if k not in COL]
        if unknown:
            raise ValueError(f"noise_std: unknown features {unknown}")
        if self.noise_scale < 0:
            raise ValueError("noise_scale: must be >= 0")
        lo, hi = self.load_range
        if not 0 < lo <= hi:
            raise ValueError("load_range: need 0 < low <= high")
        if not 0 <= self.islanded_fraction <= 1:
            raise ValueError("islanded_fraction: must lie in [0, 1]")

    def signature_matrix(self) -> np.ndarray:
        return np.array([self.signatures[c] for c in FAULT_CLASSES], dtype=np.float64)

    def noise_vector(self) -> np.ndarray:
        return np.array([self.noise_std.get(n, 0.0) for n in FEATURES], dtype=np.float64)

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        known = set(cls.__dataclass_fields__)
        bad = [k for k in d if k not in known]
        if bad:
            raise ValueError(f"dataset: unknown field(s) {bad}")
        d = dict(d)
        if "load_range" in d:
            d["load_range"] = tuple(d["load_range"])
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        d = asdict(self)
        d["load_range"] = list(self.load_range)
        return d


@dataclass
class LabeledDataset:
    samples: np.ndarray
    labels: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1, N_FEATURES)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(self.samples) != len(self.labels):
            raise ValueError(f"{len(self.samples)} samples but {len(self.labels)} labels")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.samples[idx], self.labels[idx], dict(self.provenance))

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=N_CLASSES)

    def label_names(self) -> list[str]:
        return [FDI_LABEL if l < 0 else FAULT_CLASSES[l] for l in self.labels]


def generate_synthetic_dataset(config: DatasetConfig, rng: np.random.Generator) -> LabeledDataset:
    config.validate()
    sigs = config.signature_matrix()
    noise = config.noise_vector() * config.noise_scale
    n = config.n_samples
    base, extra = divmod(n, N_CLASSES)
    counts = [base + (1 if c < extra else 0) for c in range(N_CLASSES)]
    labels = np.repeat(np.arange(N_CLASSES), counts)
    labels = labels[rng.permutation(n)]

    x = sigs[labels].copy()
    lo, hi = config.load_range
    load = rng.uniform(lo, hi, size=n) if hi > lo else np.full(n, lo)
    for name in ("i_rms_a", "i_rms_b", "i_rms_c", "p_active", "q_reactive"):
        x[:, COL[name]] *= load
    islanded = rng.random(n) < config.islanded_fraction
    x[islanded, COL["frequency"]] += config.islanded_freq_shift
    for name in ("v_rms_a", "v_rms_b", "v_rms_c"):
        x[islanded, COL[name]] += config.islanded_voltage_shift
    x[:, COL["mode_flag"]] = islanded.astype(np.float64)
    x += rng.standard_normal(x.shape) * noise
    return LabeledDataset(x, labels, {"kind": "synthetic", "n_samples": n})


def save_csv(dataset: LabeledDataset, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FEATURES + ("label",))
        for row, name in zip(dataset.samples, dataset.label_names()):
            w.writerow([repr(float(v)) for v in row] + [name])


def load_csv(path, allow_fdi: bool = False) -> LabeledDataset:
    """Read a schema-v1 file. FDI rows (label -1) are accepted only with ``allow_fdi``."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file, header required") from None
        expected = list(FEATURES) + ["label"]
        if header != expected:
            missing = [c for c in expected if c not in header]
            extra = [c for c in header if c not in expected]
            detail = []
            if missing:
                detail.append(f"missing column(s) {missing}")
            if extra:
                detail.append(f"unexpected column(s) {extra}")
            if not detail:
                detail.append("columns out of order")
            raise SchemaError(f"{path}: bad header: " + "; ".join(detail))
        rows, labels = [], []
        for r, rec in enumerate(reader, start=2):
            if len(rec) != len(expected):
                raise SchemaError(f"{path}: row {r} has {len(rec)} cells, expected {len(expected)}")
            vals = []
            for c, cell in enumerate(rec[:-1]):
                try:
                    v = float(cell)
                except ValueError:
                    raise SchemaError(
                        f"{path}: row {r}, column {FEATURES[c]!r}: non-numeric value {cell!r}") from None
                if not math.isfinite(v):
                    raise SchemaError(f"{path}: row {r}, column {FEATURES[c]!r}: non-finite value")
                vals.append(v)
            name = rec[-1]
            if name in CLASS_INDEX:
                labels.append(CLASS_INDEX[name])
            elif name == FDI_LABEL and allow_fdi:
                labels.append(-1)
            else:
                raise SchemaError(f"{path}: row {r}, column 'label': unknown class {name!r}")
            rows.append(vals)
    return LabeledDataset(np.array(rows).reshape(-1, N_FEATURES), labels,
                          {"kind": "file", "path": str(path)})


@dataclass
class Normalizer:
    """Per-feature affine map of the training range onto [-1, 1]."""

    min: np.ndarray
    max: np.ndarray
    clip: float = 1.5

    def __post_init__(self):
        self.min = np.asarray(self.min, dtype=np.float64)
        self.max = np.asarray(self.max, dtype=np.float64)
        flat = np.flatnonzero(~(self.max > self.min))
        if flat.size:
            names = [FEATURES[i] if len(self.min) == N_FEATURES else str(i) for i in flat]
            raise ValueError(f"constant feature(s) cannot be scaled: {names}")

    def apply(self, x) -> np.ndarray:
        return self.apply_counted(x)[0]

    def apply_counted(self, x) -> tuple[np.ndarray, int]:
        x = np.asarray(x, dtype=np.float64)
        y = 2.0 * (x - self.min) / (self.max - self.min) - 1.0
        outside = int(np.count_nonzero(np.abs(y) > self.clip))
        if outside:
            log.warning("%d normalized value(s) beyond +/-%.1f were clamped", outside, self.clip)
            y = np.clip(y, -self.clip, self.clip)
        return y, outside

    def invert(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        return (y + 1.0) * 0.5 * (self.max - self.min) + self.min

    def to_dict(self) -> dict:
        return {"min": self.min.tolist(), "max": self.max.tolist(), "clip": self.clip}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(d["min"], d["max"], d.get("clip", 1.5))


def fit_normalizer(train) -> Normalizer:
    x = train.samples if isinstance(train, LabeledDataset) else np.asarray(train, dtype=np.float64)
    return Normalizer(x.min(axis=0), x.max(axis=0))


def stratified_split(labels, ratio: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Index split preserving class proportions.

    Test quotas are allocated by largest remainder so the total test size is
    ``round(n * (1 - ratio))``; ties go to the lower class index.
    """
    if not 0 < ratio < 1:
        raise ValueError(f"ratio must lie in (0, 1), got {ratio}")
    labels = np.asarray(labels)
    classes, counts = np.unique(labels, return_counts=True)
    small = classes[counts < 2]
    if small.size:
        raise ValueError(f"class(es) {small.tolist()} have fewer than 2 members")
    want = counts * (1.0 - ratio)
    quota = np.floor(want).astype(int)
    short = int(round(len(labels) * (1.0 - ratio))) - quota.sum()
    order = sorted(range(len(classes)), key=lambda k: (-(want[k] - quota[k]), k))
    for k in order[:max(short, 0)]:
        quota[k] += 1
    quota = np.clip(quota, 1, counts - 1)
    train_idx, test_idx = [], []
    for cls, q in zip(classes, quota):
        members = np.flatnonzero(labels == cls)
        members = members[rng.permutation(len(members))]
        test_idx.append(members[:q])
        train_idx.append(members[q:])
    return np.sort(np.concatenate(train_idx)), np.sort(np.concatenate(test_idx))


def split(dataset: LabeledDataset, ratio: float, rng: np.random.Generator):
    tr, te = stratified_split(dataset.labels, ratio, rng)
    return dataset.subset(tr), dataset.subset(te)


@dataclass
class DetectionTestSet:
    """Held-out faults mixed with injected anomalies; ``is_fault`` is the ground truth."""

    samples: np.ndarray
    labels: np.ndarray

    @property
    def is_fault(self) -> np.ndarray:
        return self.labels >= 0

    def __len__(self):
        return len(self.labels)

    def as_dataset(self) -> LabeledDataset:
        return LabeledDataset(self.samples, self.labels, {"kind": "detection"})


def build_detection_test_set(fault_test: LabeledDataset, fdi_samples, rng: np.random.Generator
                             ) -> DetectionTestSet:
    fdi = np.asarray(fdi_samples, dtype=np.float64).reshape(-1, N_FEATURES)
    if len(fault_test) == 0 or len(fdi) == 0:
        raise ValueError("detection test set needs both fault and FDI samples")
    x = np.vstack([fault_test.samples, fdi])
    y = np.concatenate([fault_test.labels, np.full(len(fdi), -1)])
    perm = rng.permutation(len(y))
    return DetectionTestSet(x[perm], y[perm])


def save_config(config: DatasetConfig, path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2))

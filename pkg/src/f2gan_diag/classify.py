"""Stage-2 switch-fault classifiers: KNN, Gini decision tree, one-vs-rest linear SVM, softmax ANN.

All models take normalized 16-feature rows and integer class labels 0..11.
Every argmax/vote tie resolves to the smallest class index.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import json
import numpy as np

from . import nn
from .dataset import FAULT_CLASSES, N_CLASSES
from .rng import stream

UNDECIDED = "Undecided"


def _xy(x, y=None):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if y is None:
        return x
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    if len(x) != len(y):
        raise ValueError(f"{len(x)} rows but {len(y)} labels")
    if len(y) == 0:
        raise ValueError("empty training set")
    return x, y


# --- k nearest neighbours ---------------------------------------------------

@dataclass
class KnnModel:
    k: int
    x: np.ndarray
    y: np.ndarray
    n_classes: int = N_CLASSES

    def to_dict(self, dataset_path: str | None = None, indices=None) -> dict:
        """Training rows are stored by reference when a dataset path is given."""
        d = {"model": "knn", "k": self.k, "n_classes": self.n_classes}
        if dataset_path is not None:
            d["dataset"] = str(dataset_path)
            d["indices"] = [int(i) for i in indices]
        else:
            d["x"] = self.x.tolist()
            d["y"] = self.y.tolist()
        return d


def train_knn(x, y, k: int = 5, n_classes: int = N_CLASSES) -> KnnModel:
    x, y = _xy(x, y)
    if not 1 <= k <= len(y):
        raise ValueError(f"k={k} must lie in [1, {len(y)}]")
    return KnnModel(k, x.copy(), y.copy(), n_classes)


def predict_knn(model: KnnModel, s) -> np.ndarray:
    """Majority label among the k nearest rows; equal distances keep training order."""
    q = _xy(s)
    out = np.empty(len(q), dtype=np.int64)
    for i, row in enumerate(q):
        d = np.sum((model.x - row) ** 2, axis=1)
        nearest = np.argsort(d, kind="stable")[:model.k]
        votes = np.bincount(model.y[nearest], minlength=model.n_classes)
        out[i] = int(np.argmax(votes))
    return out


# --- decision tree ---------------------------------------------------------

def gini(counts) -> float:
    counts = np.asarray(counts, dtype=np.float64)
    if np.any(counts < 0):
        raise ValueError("negative class count")
    total = counts.sum()
    if total <= 0:
        raise ValueError("gini of an empty histogram")
    p = counts / total
    return float(np.sum(p * (1.0 - p)))


@dataclass
class DtNode:
    counts: np.ndarray
    feature: int = -1
    threshold: float = 0.0
    left: "DtNode | None" = None
    right: "DtNode | None" = None

    @property
    def is_leaf(self) -> bool:
        return self.left is None

    @property
    def label(self) -> int:
        return int(np.argmax(self.counts))

    def depth(self) -> int:
        return 0 if self.is_leaf else 1 + max(self.left.depth(), self.right.depth())

    def to_dict(self) -> dict:
        if self.is_leaf:
            return {"counts": self.counts.tolist()}
        return {"counts": self.counts.tolist(), "feature": self.feature, "threshold": self.threshold,
                "left": self.left.to_dict(), "right": self.right.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "DtNode":
        node = cls(np.array(d["counts"], dtype=np.int64))
        if "feature" in d:
            node.feature, node.threshold = d["feature"], d["threshold"]
            node.left, node.right = cls.from_dict(d["left"]), cls.from_dict(d["right"])
        return node


def best_split(x, y, n_classes: int, min_leaf: int = 1):
    """Lowest weighted child Gini over all features and midpoint thresholds.

    Returns ``(score, feature, threshold)`` or ``None`` when no split leaves
    ``min_leaf`` rows on both sides. Ties keep the lowest feature, then the
    lowest threshold.
    """
    n = len(y)
    best = None
    onehot = np.eye(n_classes, dtype=np.int64)[y]
    total = onehot.sum(axis=0)
    for f in range(x.shape[1]):
        order = np.argsort(x[:, f], kind="stable")
        xs = x[order, f]
        left = np.cumsum(onehot[order], axis=0)[:-1]        # counts for split after row i
        n_left = np.arange(1, n)
        valid = (xs[1:] > xs[:-1]) & (n_left >= min_leaf) & (n - n_left >= min_leaf)
        if not valid.any():
            continue
        left, n_left = left[valid], n_left[valid]
        right = total - left
        n_right = n - n_left
        g_left = 1.0 - np.sum((left / n_left[:, None]) ** 2, axis=1)
        g_right = 1.0 - np.sum((right / n_right[:, None]) ** 2, axis=1)
        score = (n_left * g_left + n_right * g_right) / n
        j = int(np.argmin(score))
        cut = np.flatnonzero(valid)[j]
        thr = 0.5 * (xs[cut] + xs[cut + 1])
        if best is None or score[j] < best[0] - 1e-15:
            best = (float(score[j]), f, float(thr))
    return best


def train_dt(x, y, max_depth: int = 12, min_leaf: int = 2, n_classes: int = N_CLASSES) -> DtNode:
    x, y = _xy(x, y)

    def grow(idx, depth):
        counts = np.bincount(y[idx], minlength=n_classes)
        node = DtNode(counts)
        if depth >= max_depth or np.count_nonzero(counts) <= 1 or len(idx) < 2 * min_leaf:
            return node
        split = best_split(x[idx], y[idx], n_classes, min_leaf)
        if split is None:
            return node
        _, f, thr = split
        go_left = x[idx, f] <= thr
        node.feature, node.threshold = f, thr
        node.left = grow(idx[go_left], depth + 1)
        node.right = grow(idx[~go_left], depth + 1)
        return node

    return grow(np.arange(len(y)), 0)


def predict_dt(tree: DtNode, s) -> np.ndarray:
    q = _xy(s)
    out = np.empty(len(q), dtype=np.int64)
    for i, row in enumerate(q):
        node = tree
        while not node.is_leaf:
            node = node.left if row[node.feature] <= node.threshold else node.right
        out[i] = node.label
    return out


# --- one-vs-rest linear SVM --------------------------------------------------

@dataclass
class SvmModel:
    w: np.ndarray  # (n_classes, n_features)
    b: np.ndarray  # (n_classes,)
    reg: float
    epochs: int

    def margins(self, s) -> np.ndarray:
        return _xy(s) @ self.w.T + self.b

    def to_dict(self) -> dict:
        return {"model": "svm", "w": self.w.tolist(), "b": self.b.tolist(),
                "reg": self.reg, "epochs": self.epochs}

    @classmethod
    def from_dict(cls, d: dict) -> "SvmModel":
        return cls(np.array(d["w"]), np.array(d["b"]), d["reg"], d["epochs"])


def train_svm(x, y, reg: float = 1e-3, epochs: int = 200, lr: float = 0.05, seed: int = 0,
              batch_size: int = 32, n_classes: int = N_CLASSES) -> SvmModel:
    """Minibatch subgradient descent on ``reg/2 |w|^2 + mean hinge`` for every class vs rest.

    The step size decays as ``lr / sqrt(epoch + 1)``; the bias is not regularized.
    """
    x, y = _xy(x, y)
    rng = stream(seed, "svm")
    n, d = x.shape
    target = np.where(np.arange(n_classes)[None, :] == y[:, None], 1.0, -1.0)  # (n, C)
    w = np.zeros((n_classes, d))
    b = np.zeros(n_classes)
    for epoch in range(epochs):
        step = lr / math.sqrt(epoch + 1)
        perm = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = perm[start:start + batch_size]
            xb, tb = x[idx], target[idx]
            active = (tb * (xb @ w.T + b) < 1.0) * tb      # (m, C): y where margin is violated
            gw = reg * w - active.T @ xb / len(idx)
            gb = -active.sum(axis=0) / len(idx)
            w -= step * gw
            b -= step * gb
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise FloatingPointError(f"SVM weights became non-finite at epoch {epoch + 1}")
    return SvmModel(w, b, reg, epochs)


def predict_svm(model: SvmModel, s) -> np.ndarray:
    return np.argmax(model.margins(s), axis=1)


# --- softmax ANN ---------------------------------------------------------------

@dataclass
class AnnModel:
    net: nn.Mlp
    config: dict = field(default_factory=dict)

    def proba(self, s) -> np.ndarray:
        return self.net(_xy(s))


def train_ann(x, y, hidden=(64, 32), epochs: int = 300, lr: float = 1e-3, seed: int = 0,
              batch_size: int = 32, n_classes: int = N_CLASSES) -> AnnModel:
    x, y = _xy(x, y)
    sizes = [x.shape[1], *hidden, n_classes]
    net = nn.Mlp.build(sizes, [nn.RELU] * len(hidden) + [nn.SOFTMAX], stream(seed, "ann", "init"))
    opt = nn.AdamState.for_mlp(net, lr=lr, beta1=0.9, beta2=0.999)
    rng = stream(seed, "ann", "shuffle")
    onehot = np.eye(n_classes)[y]
    for epoch in range(epochs):
        perm = rng.permutation(len(y))
        for start in range(0, len(y), batch_size):
            idx = perm[start:start + batch_size]
            p, trace = nn.forward(net, x[idx], nn.TRAIN, rng)
            # softmax + cross-entropy: gradient w.r.t. logits is p - onehot
            grads = nn.backward(net, trace, (p - onehot[idx]) / len(idx), pre_activation=True)
            nn.adam_step(net, grads, opt)
        if not all(np.all(np.isfinite(prm)) for prm in net.params()):
            raise FloatingPointError(f"ANN parameters became non-finite at epoch {epoch + 1}")
    cfg = {"hidden": list(hidden), "epochs": epochs, "lr": lr, "seed": seed, "batch_size": batch_size}
    return AnnModel(net, cfg)


def predict_ann(model: AnnModel, s) -> np.ndarray:
    return np.argmax(model.proba(s), axis=1)


# --- the four together -------------------------------------------------------

MODEL_NAMES = ("knn", "dt", "svm", "ann")


@dataclass
class Stage2Models:
    knn: KnnModel
    dt: DtNode
    svm: SvmModel
    ann: AnnModel

    def predict(self, s) -> dict[str, np.ndarray]:
        return {
            "knn": predict_knn(self.knn, s),
            "dt": predict_dt(self.dt, s),
            "svm": predict_svm(self.svm, s),
            "ann": predict_ann(self.ann, s),
        }


@dataclass
class Stage2Config:
    k: int = 5
    max_depth: int = 12
    min_leaf: int = 2
    svm_reg: float = 1e-3
    svm_epochs: int = 200
    svm_lr: float = 0.05
    ann_hidden: tuple = (64, 32)
    ann_epochs: int = 300
    ann_lr: float = 1e-3

    def validate(self) -> None:
        if self.k < 1:
            raise ValueError("classifiers.k: must be >= 1")
        if self.max_depth < 1 or self.min_leaf < 1:
            raise ValueError("classifiers.max_depth/min_leaf: must be >= 1")
        if self.svm_epochs < 1 or self.ann_epochs < 1:
            raise ValueError("classifiers epochs: must be >= 1")


def train_all(x, y, cfg: Stage2Config, seed: int) -> Stage2Models:
    cfg.validate()
    return Stage2Models(
        train_knn(x, y, cfg.k),
        train_dt(x, y, cfg.max_depth, cfg.min_leaf),
        train_svm(x, y, cfg.svm_reg, cfg.svm_epochs, cfg.svm_lr, seed),
        train_ann(x, y, cfg.ann_hidden, cfg.ann_epochs, cfg.ann_lr, seed),
    )


def consensus(labels: list[int]) -> int | None:
    """Class named by at least 3 of the 4 models, else None."""
    votes = np.bincount(np.asarray(labels, dtype=np.int64), minlength=N_CLASSES)
    top = int(np.argmax(votes))
    return top if votes[top] * 2 > len(labels) and votes[top] >= 3 else None


@dataclass
class FaultReport:
    predictions: dict[str, str]
    consensus: str


def classify_fault(models: Stage2Models, s, verdict: str | None = None) -> FaultReport:
    """Stage-2 prediction for one sample that Stage 1 passed as an internal fault."""
    from .gan import ANOMALY
    if verdict == ANOMALY:
        raise ValueError("sample was flagged as an anomaly in stage 1; no classification")
    preds = {name: int(p[0]) for name, p in models.predict(s).items()}
    agreed = consensus(list(preds.values()))
    return FaultReport({k: FAULT_CLASSES[v] for k, v in preds.items()},
                       UNDECIDED if agreed is None else FAULT_CLASSES[agreed])


def save_models(models: Stage2Models, directory, dataset_path, train_indices, normalization: dict) -> dict:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {name: directory / f"stage2_{name}.json" for name in MODEL_NAMES}
    knn = models.knn.to_dict(dataset_path, train_indices)
    knn["normalization"] = normalization
    paths["knn"].write_text(json.dumps(knn))
    paths["dt"].write_text(json.dumps({"model": "dt", "tree": models.dt.to_dict()}))
    paths["svm"].write_text(json.dumps(models.svm.to_dict()))
    ann = {"model": "ann", "config": models.ann.config, "net": nn.to_dict(models.ann.net)}
    paths["ann"].write_text(json.dumps(ann))
    return paths


def load_models(directory, base_dir=None) -> Stage2Models:
    """Load the four models; the KNN dataset path is resolved against ``base_dir``."""
    from .dataset import Normalizer, load_csv
    directory = Path(directory)
    loaded = {}
    for name in MODEL_NAMES:
        path = directory / f"stage2_{name}.json"
        if not path.exists():
            raise FileNotFoundError(f"missing stage-2 model {name!r} ({path})")
        loaded[name] = json.loads(path.read_text())
    k = loaded["knn"]
    if "dataset" in k:
        ds_path = Path(k["dataset"])
        if not ds_path.is_absolute() and base_dir is not None:
            ds_path = Path(base_dir) / ds_path
        data = load_csv(ds_path).subset(k["indices"])
        x = Normalizer.from_dict(k["normalization"]).apply(data.samples)
        knn = KnnModel(k["k"], x, data.labels, k["n_classes"])
    else:
        knn = KnnModel(k["k"], np.array(k["x"]), np.array(k["y"]), k["n_classes"])
    ann = loaded["ann"]
    return Stage2Models(knn, DtNode.from_dict(loaded["dt"]["tree"]), SvmModel.from_dict(loaded["svm"]),
                        AnnModel(nn.from_dict(ann["net"]), ann["config"]))

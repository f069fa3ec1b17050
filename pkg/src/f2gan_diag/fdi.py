"""Linear state estimation and false-data-injection attacks.

The measurement model is ``z = H x + e``. Stealthy attacks ``a = H c`` move the
least-squares estimate by exactly ``c`` and leave the residual untouched;
naive perturbations inflate it. ``synthesize_fdi_features`` carries the same
idea over to the 16-feature detector space.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .dataset import N_FEATURES, VI_SLOTS


class RankError(ValueError):
    pass


class MeasurementModel:
    """Measurement matrix ``H`` (m x n) with i.i.d. Gaussian noise of std ``noise_std``.

    ``H`` must have full column rank. ``redundant=False`` allows m == n, which
    is only useful for toy checks.
    """

    def __init__(self, H, noise_std: float = 0.0, redundant: bool = True, tol: float = 1e-10):
        H = np.array(H, dtype=np.float64, ndmin=2)
        m, n = H.shape
        if redundant and m <= n:
            raise ValueError(f"need more measurements than states, got m={m}, n={n}")
        if m < n:
            raise RankError(f"m={m} < n={n} cannot have full column rank")
        if noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        Q, R, piv = scipy.linalg.qr(H, mode="economic", pivoting=True)
        diag = np.abs(np.diag(R))
        if diag.size == 0 or diag.min() <= tol * max(diag.max(), 1.0):
            raise RankError(f"H is rank deficient (smallest pivot {diag.min() if diag.size else 0:.3g})")
        self.H = H
        self.noise_std = float(noise_std)
        self._q, self._r, self._piv = Q, R, piv

    @property
    def m(self) -> int:
        return self.H.shape[0]

    @property
    def n(self) -> int:
        return self.H.shape[1]

    @classmethod
    def random(cls, m: int, n: int, noise_std: float, rng: np.random.Generator) -> "MeasurementModel":
        while True:
            try:
                return cls(rng.standard_normal((m, n)), noise_std)
            except RankError:
                continue

    def to_dict(self) -> dict:
        return {"H": self.H.tolist(), "noise_std": self.noise_std}


def _vec(x, size: int, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.shape[0] != size:
        raise ValueError(f"{name} has length {x.shape[0]}, expected {size}")
    return x


def measure(model: MeasurementModel, x, rng: np.random.Generator | None = None) -> np.ndarray:
    x = _vec(x, model.n, "state")
    z = model.H @ x
    if model.noise_std > 0:
        if rng is None:
            raise ValueError("noisy measurement needs an rng")
        z = z + rng.normal(0.0, model.noise_std, size=model.m)
    return z


@dataclass
class ResidualReport:
    estimate: np.ndarray
    residual_norm: float


def estimate_state(model: MeasurementModel, z) -> ResidualReport:
    """Least-squares state estimate via the pivoted QR factors of ``H``."""
    z = _vec(z, model.m, "measurement")
    y = scipy.linalg.solve_triangular(model._r, model._q.T @ z)
    x_hat = np.empty(model.n)
    x_hat[model._piv] = y
    return ResidualReport(x_hat, float(np.linalg.norm(z - model.H @ x_hat)))


@dataclass
class AttackVector:
    a: np.ndarray
    kind: str
    c: np.ndarray | None = None
    spec: dict = field(default_factory=dict)

    @property
    def stealthy(self) -> bool:
        return self.kind == "stealthy"

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "a": self.a.tolist()}
        if self.c is not None:
            d["c"] = self.c.tolist()
        if self.spec:
            d["spec"] = self.spec
        return d


def craft_stealthy_attack(model: MeasurementModel, c) -> AttackVector:
    c = _vec(c, model.n, "c")
    return AttackVector(model.H @ c, "stealthy", c)


def craft_naive_attack(model: MeasurementModel, norm: float, rng: np.random.Generator) -> AttackVector:
    """Random direction in measurement space scaled to ``norm``; ignores ``H``."""
    d = rng.standard_normal(model.m)
    return AttackVector(d * (norm / np.linalg.norm(d)), "naive", spec={"norm": norm})


def apply_attack(z, attack: AttackVector) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    a = attack.a if isinstance(attack, AttackVector) else np.asarray(attack, dtype=np.float64)
    if a.shape != z.shape:
        raise ValueError(f"attack length {a.shape[0]} != measurement length {z.shape[0]}")
    return z + a


@dataclass
class UnobservabilityCheck:
    residual: float
    attacked_residual: float
    delta: float
    estimate_shift_error: float


def verify_unobservability(model: MeasurementModel, z, attack: AttackVector) -> UnobservabilityCheck:
    if not attack.stealthy:
        raise ValueError("residual invariance only holds for stealthy attacks a = Hc")
    return residual_change(model, z, attack)


def residual_change(model: MeasurementModel, z, attack: AttackVector) -> UnobservabilityCheck:
    """Residual before/after the attack; no stealth requirement."""
    before = estimate_state(model, z)
    after = estimate_state(model, apply_attack(z, attack))
    shift_err = float("nan")
    if attack.c is not None:
        shift_err = float(np.max(np.abs(after.estimate - before.estimate - attack.c)))
    return UnobservabilityCheck(before.residual_norm, after.residual_norm,
                                abs(before.residual_norm - after.residual_norm), shift_err)


@dataclass
class FaultStatistics:
    """Per-feature statistics of real fault training rows plus the rows themselves."""

    mean: np.ndarray
    std: np.ndarray
    low: np.ndarray
    high: np.ndarray
    rows: np.ndarray

    @classmethod
    def fit(cls, samples) -> "FaultStatistics":
        x = np.asarray(samples, dtype=np.float64).reshape(-1, N_FEATURES)
        return cls(x.mean(axis=0), x.std(axis=0), x.min(axis=0), x.max(axis=0), x)


@dataclass
class FdiSpec:
    count: int = 219
    intensity: float = 2.0
    min_slots: int = 3
    max_slots: int = 8

    def validate(self) -> None:
        if self.intensity <= 0:
            raise ValueError(f"fdi.intensity: must be > 0, got {self.intensity}")
        if self.count < 1:
            raise ValueError("fdi.count: must be >= 1")
        if not 1 <= self.min_slots <= self.max_slots <= len(VI_SLOTS):
            raise ValueError(f"fdi slots: need 1 <= min_slots <= max_slots <= {len(VI_SLOTS)}")


def synthesize_fdi_features(stats: FaultStatistics, spec: FdiSpec, rng: np.random.Generator) -> np.ndarray:
    """Coordinated injections on voltage/current feature slots of real fault rows.

    Each sample starts from a random training fault row. A random subset of
    ``min_slots..max_slots`` V/I slots is shifted by ``intensity * std`` with
    one shared sign, then clipped back into the training range so every
    feature stays inside what the sensors ever reported.
    """
    spec.validate()
    slots = np.array(VI_SLOTS)
    out = np.empty((spec.count, N_FEATURES))
    for k in range(spec.count):
        x = stats.rows[rng.integers(len(stats.rows))].copy()
        n_hit = rng.integers(spec.min_slots, spec.max_slots + 1)
        hit = rng.choice(slots, size=n_hit, replace=False)
        sign = 1.0 if rng.random() < 0.5 else -1.0
        x[hit] += sign * spec.intensity * stats.std[hit]
        out[k] = np.clip(x, stats.low, stats.high)
    return out


def save_scenario(path, model: MeasurementModel, attack: AttackVector, seed: int) -> None:
    with open(path, "w") as fh:
        json.dump({"model": model.to_dict(), "attack": attack.to_dict(), "seed": seed}, fh)


def load_scenario(path) -> tuple[MeasurementModel, AttackVector, int]:
    with open(path) as fh:
        d = json.load(fh)
    model = MeasurementModel(d["model"]["H"], d["model"]["noise_std"])
    a = d["attack"]
    c = np.array(a["c"]) if "c" in a else None
    return model, AttackVector(np.array(a["a"]), a["kind"], c, a.get("spec", {})), d["seed"]

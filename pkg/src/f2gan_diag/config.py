"""Experiment configuration: one JSON document drives every CLI stage."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .classify import Stage2Config
from .dataset import DatasetConfig
from .fdi import FdiSpec
from .gan import GanArchitecture, GanVariant, TrainConfig

PROFILES = {"paper": 5000, "desk": 500}
VARIANTS = ("cgan", "f2gan")


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the offending field."""


def _dataclass_from(cls, d, section: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{section}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"{section}.{unknown[0]}: unknown field")
    try:
        return cls(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from None


@dataclass
class ExperimentConfig:
    seed: int = 0
    profile: str = "paper"
    split_ratio: float = 0.8
    threshold: float = 0.5
    lam: float = 1.0
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    cgan: GanArchitecture = field(default_factory=GanArchitecture.conventional)
    f2gan: GanArchitecture = field(default_factory=GanArchitecture.feature_feedback)
    train: TrainConfig = field(default_factory=TrainConfig)
    fdi: FdiSpec = field(default_factory=FdiSpec)
    classifiers: Stage2Config = field(default_factory=Stage2Config)

    @classmethod
    def for_profile(cls, profile: str = "paper", **overrides) -> "ExperimentConfig":
        cfg = cls(profile=profile, **overrides)
        cfg.apply_profile(profile)
        return cfg

    def apply_profile(self, profile: str) -> None:
        if profile not in PROFILES:
            raise ConfigError(f"profile: must be one of {sorted(PROFILES)}, got {profile!r}")
        self.profile = profile
        self.train.epochs = PROFILES[profile]

    def architecture(self, variant: str) -> GanArchitecture:
        if variant not in VARIANTS:
            raise ConfigError(f"variant: must be 'cgan' or 'f2gan', got {variant!r}")
        return self.cgan if variant == "cgan" else self.f2gan

    def variant(self, variant: str) -> GanVariant:
        self.architecture(variant)
        return GanVariant.conventional() if variant == "cgan" else GanVariant.feature_feedback(self.lam)

    def train_config(self) -> TrainConfig:
        return dataclasses.replace(self.train, seed=self.seed)

    def validate(self) -> None:
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("seed: must be a non-negative integer")
        if self.profile not in PROFILES:
            raise ConfigError(f"profile: must be one of {sorted(PROFILES)}, got {self.profile!r}")
        if not 0 < self.split_ratio < 1:
            raise ConfigError("split_ratio: must lie strictly between 0 and 1")
        if not 0 <= self.threshold <= 1:
            raise ConfigError("threshold: must lie in [0, 1]")
        if self.lam < 0:
            raise ConfigError("lam: must be >= 0")
        for section in ("dataset", "cgan", "f2gan", "train", "fdi", "classifiers"):
            try:
                getattr(self, section).validate()
            except ValueError as exc:
                msg = str(exc)
                raise ConfigError(msg if msg.startswith(section) else f"{section}.{msg}") from None

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["dataset"] = self.dataset.to_dict()
        d["classifiers"]["ann_hidden"] = list(self.classifiers.ann_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config: expected a JSON object")
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigError(f"{unknown[0]}: unknown field")
        kw = {k: d[k] for k in ("seed", "profile", "split_ratio", "threshold", "lam") if k in d}
        if "dataset" in d:
            try:
                kw["dataset"] = DatasetConfig.from_dict(d["dataset"])
            except ValueError as exc:
                msg = str(exc)
                raise ConfigError(msg if msg.startswith("dataset") else f"dataset.{msg}") from None
        for section, typ in (("cgan", GanArchitecture), ("f2gan", GanArchitecture),
                             ("train", TrainConfig), ("fdi", FdiSpec), ("classifiers", Stage2Config)):
            if section in d:
                kw[section] = _dataclass_from(typ, d[section], section)
        if "classifiers" in kw:
            kw["classifiers"].ann_hidden = tuple(kw["classifiers"].ann_hidden)
        cfg = cls(**kw)
        # the profile fixes the epoch count unless the file pins one explicitly
        if "epochs" not in d.get("train", {}):
            cfg.apply_profile(cfg.profile)
        cfg.validate()
        return cfg

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config: no such file {path}")
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: {path} is not valid JSON ({exc.msg} at line {exc.lineno})") from None
    return ExperimentConfig.from_dict(d)


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")

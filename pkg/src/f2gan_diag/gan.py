"""Conventional GAN and feature-feedback GAN (F2GAN) on 16-feature fault vectors.

The discriminator doubles as the Stage-1 detector: a held-out sample whose
score exceeds the threshold is treated as a genuine internal fault, anything
else as an injected anomaly.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .dataset import N_FEATURES
from .rng import stream

log = logging.getLogger(__name__)

FAULT = "InternalFault"
ANOMALY = "Anomaly"
HISTORY_COLUMNS = ("epoch", "L_D", "L_G_fool", "L_FM", "mean_D_real", "mean_D_fake")


class TrainingError(RuntimeError):
    pass


def _activation(name: str) -> nn.Activation:
    return nn.leaky_relu(0.2) if name == "leaky_relu" else nn.Activation(name)


@dataclass
class GanArchitecture:
    latent_dim: int
    generator_hidden: list
    generator_activation: str
    discriminator_hidden: list
    discriminator_activation: str
    discriminator_dropout: float = 0.0
    dropout_layers: list = field(default_factory=list)
    feature_layer: int = -1
    n_features: int = N_FEATURES

    def __post_init__(self):
        if self.feature_layer < 0:
            self.feature_layer += len(self.discriminator_hidden)
        self.validate()

    def validate(self) -> None:
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if not self.generator_hidden or not self.discriminator_hidden:
            raise ValueError("both networks need at least one hidden layer")
        if not 0 <= self.feature_layer < len(self.discriminator_hidden):
            raise ValueError(f"feature_layer {self.feature_layer} is not a discriminator hidden layer")
        if not 0 <= self.discriminator_dropout < 1:
            raise ValueError("discriminator_dropout must lie in [0, 1)")
        bad = [i for i in self.dropout_layers if not 0 <= i < len(self.discriminator_hidden)]
        if bad:
            raise ValueError(f"dropout_layers {bad} are not hidden layers")

    @property
    def feature_width(self) -> int:
        return self.discriminator_hidden[self.feature_layer]

    @classmethod
    def conventional(cls) -> "GanArchitecture":
        return cls(32, [64, 128], "relu", [128, 64], "relu")

    @classmethod
    def feature_feedback(cls) -> "GanArchitecture":
        return cls(64, [256, 512, 1024], "leaky_relu", [1024, 512, 256, 128], "leaky_relu",
                   discriminator_dropout=0.3, dropout_layers=[0, 1])

    def build_generator(self, rng) -> nn.Mlp:
        sizes = [self.latent_dim, *self.generator_hidden, self.n_features]
        acts = [_activation(self.generator_activation)] * len(self.generator_hidden) + [nn.TANH]
        return nn.Mlp.build(sizes, acts, rng)

    def build_discriminator(self, rng) -> nn.Mlp:
        sizes = [self.n_features, *self.discriminator_hidden, 1]
        acts = [_activation(self.discriminator_activation)] * len(self.discriminator_hidden) + [nn.SIGMOID]
        drop = [self.discriminator_dropout if i in self.dropout_layers else 0.0
                for i in range(len(self.discriminator_hidden))] + [0.0]
        return nn.Mlp.build(sizes, acts, rng, drop)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GanArchitecture":
        return cls(**d)


@dataclass(frozen=True)
class GanVariant:
    """``lam is None`` is the conventional GAN; otherwise feature feedback with weight ``lam``."""

    lam: float | None = None

    def __post_init__(self):
        if self.lam is not None and self.lam < 0:
            raise ValueError("feature-feedback weight must be >= 0")

    @property
    def name(self) -> str:
        return "cgan" if self.lam is None else "f2gan"

    @classmethod
    def conventional(cls) -> "GanVariant":
        return cls(None)

    @classmethod
    def feature_feedback(cls, lam: float = 1.0) -> "GanVariant":
        return cls(float(lam))


@dataclass
class TrainConfig:
    epochs: int = 5000
    batch_size: int = 64
    seed: int = 0
    lr_generator: float = 2e-4
    lr_discriminator: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    prior: str = "gaussian"
    clamp: float = 1e-7

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs: must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size: must be >= 2 for batch-mean feature matching")
        if self.prior not in ("gaussian", "uniform"):
            raise ValueError(f"prior: must be 'gaussian' or 'uniform', got {self.prior!r}")
        if not 0 < self.clamp < 0.5:
            raise ValueError("clamp: must lie in (0, 0.5)")
        for name in ("lr_generator", "lr_discriminator"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name}: must be > 0")


@dataclass
class TrainedGan:
    generator: nn.Mlp
    discriminator: nn.Mlp
    architecture: GanArchitecture
    variant: GanVariant
    config: TrainConfig
    history: np.ndarray  # (epochs, 5): L_D, L_G_fool, L_FM, mean D(x), mean D(G(z))


def sample_latent(n: int, latent_dim: int, prior: str, rng: np.random.Generator) -> np.ndarray:
    if prior == "gaussian":
        return rng.standard_normal((n, latent_dim))
    if prior == "uniform":
        return rng.uniform(-1.0, 1.0, size=(n, latent_dim))
    raise ValueError(f"unknown prior {prior!r}")


def _scores(s, clamp):
    s = np.asarray(s, dtype=np.float64).reshape(-1)
    if s.size == 0:
        raise ValueError("empty score batch")
    return np.clip(s, clamp, 1.0 - clamp)


def discriminator_loss(d_real, d_fake, clamp: float = 1e-7) -> float:
    """-E[log D(x)] - E[log(1 - D(G(z)))]."""
    r, f = _scores(d_real, clamp), _scores(d_fake, clamp)
    return float(-np.mean(np.log(r)) - np.mean(np.log1p(-f)))


def generator_fool_loss(d_fake, clamp: float = 1e-7) -> float:
    """E[log(1 - D(G(z)))], minimised by the generator."""
    return float(np.mean(np.log1p(-_scores(d_fake, clamp))))


def feature_matching_loss(f_real, f_fake) -> float:
    f_real = np.asarray(f_real, dtype=np.float64)
    f_fake = np.asarray(f_fake, dtype=np.float64)
    if f_real.ndim != 2 or f_fake.ndim != 2 or f_real.shape[1] != f_fake.shape[1]:
        raise ValueError(f"feature widths differ: {f_real.shape} vs {f_fake.shape}")
    if len(f_real) == 0 or len(f_fake) == 0:
        raise ValueError("empty feature batch")
    d = f_real.mean(axis=0) - f_fake.mean(axis=0)
    return float(d @ d)


def total_generator_loss(fool: float, fm: float, variant: GanVariant) -> float:
    if variant.lam is None:
        return fool
    return fool + variant.lam * fm


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = perm[start:start + batch_size]
        if len(idx) >= 2:
            yield idx


def generator_sample_grad(D: nn.Mlp, tr_fake: nn.ForwardTrace, d_fake, real_mean, feat: int,
                          lam: float | None) -> np.ndarray:
    """d/dx of fool + lam * FM at the generated rows, holding the real feature mean fixed."""
    n = len(d_fake)
    injected = None
    if lam:
        f_fake = tr_fake.post[feat]
        diff = real_mean - f_fake.mean(axis=0)
        injected = {feat: np.broadcast_to(-2.0 * lam * diff / n, f_fake.shape)}
    # d/dlogit of mean log(1 - sigmoid(u)) is -sigmoid(u) / n
    return nn.backward(D, tr_fake, -d_fake / n, injected=injected,
                       param_grads=False, pre_activation=True).input


def discriminator_grads(D: nn.Mlp, trace: nn.ForwardTrace, d_real, d_fake) -> nn.Gradients:
    """Parameter gradients of -mean log D(x) - mean log(1 - D(G(z))).

    ``trace`` covers the real rows followed by the generated rows, so one
    backward pass sums both terms.
    """
    g = np.vstack([-(1.0 - d_real) / len(d_real), d_fake / len(d_fake)])
    return nn.backward(D, trace, g, pre_activation=True)


def train_gan(train_data, arch: GanArchitecture, variant: GanVariant, cfg: TrainConfig,
              progress=None) -> TrainedGan:
    """One discriminator and one generator Adam step per minibatch.

    Each minibatch gets a single forward pass of real and generated rows;
    the discriminator loss, fooling loss and feature-matching loss all come
    from that pass, as do both gradient steps. Both sigmoid/log losses are differentiated in logit space, so saturated
    scores still give exact gradients; the clamp only guards logged values.
    ``progress`` is called as ``progress(epoch, row)`` after every epoch.
    """
    cfg.validate()
    x_all = np.asarray(train_data, dtype=np.float64)
    if x_all.ndim != 2 or x_all.shape[1] != arch.n_features:
        raise ValueError(f"training data must have {arch.n_features} columns")
    if len(x_all) < cfg.batch_size:
        raise ValueError(f"need at least batch_size={cfg.batch_size} rows, got {len(x_all)}")

    init_rng = stream(cfg.seed, "gan", "init")
    shuffle_rng = stream(cfg.seed, "gan", "shuffle")
    latent_rng = stream(cfg.seed, "gan", "latent")
    drop_rng = stream(cfg.seed, "gan", "dropout")
    G = arch.build_generator(init_rng)
    D = arch.build_discriminator(init_rng)
    opt_g = nn.AdamState.for_mlp(G, cfg.lr_generator, cfg.beta1, cfg.beta2, cfg.eps)
    opt_d = nn.AdamState.for_mlp(D, cfg.lr_discriminator, cfg.beta1, cfg.beta2, cfg.eps)
    feat = arch.feature_layer
    history = np.zeros((cfg.epochs, 5))

    for epoch in range(cfg.epochs):
        sums = np.zeros(5)
        n_batches = 0
        for b, idx in enumerate(_batches(len(x_all), cfg.batch_size, shuffle_rng)):
            x = x_all[idx]
            n = len(idx)
            z = sample_latent(n, arch.latent_dim, cfg.prior, latent_rng)
            x_fake, g_trace = nn.forward(G, z, nn.TRAIN, drop_rng)

            # one shared forward pass feeds both losses
            d_all, tr_all = nn.forward(D, np.vstack([x, x_fake]), nn.TRAIN, drop_rng)
            d_real, d_fake = d_all[:n], d_all[n:]
            tr_fake = tr_all.rows(slice(n, None))
            l_d = discriminator_loss(d_real, d_fake, cfg.clamp)
            f_real, f_fake = tr_all.post[feat][:n], tr_fake.post[feat]
            fool = generator_fool_loss(d_fake, cfg.clamp)
            fm = feature_matching_loss(f_real, f_fake)

            # generator gradient w.r.t. its samples, taken before D moves
            g_x = generator_sample_grad(D, tr_fake, d_fake, f_real.mean(axis=0), feat, variant.lam)
            nn.adam_step(D, discriminator_grads(D, tr_all, d_real, d_fake), opt_d)
            nn.adam_step(G, nn.backward(G, g_trace, g_x), opt_g)

            row = (l_d, fool, fm, float(d_real.mean()), float(d_fake.mean()))
            for name, v in zip(HISTORY_COLUMNS[1:4], row):
                if not math.isfinite(v):
                    raise TrainingError(f"non-finite {name} at epoch {epoch + 1}, batch {b + 1}")
            sums += row
            n_batches += 1
        history[epoch] = sums / n_batches
        if progress is not None:
            progress(epoch, history[epoch])
    return TrainedGan(G, D, arch, variant, cfg, history)


def discriminate_batch(gan: TrainedGan, samples) -> tuple[np.ndarray, np.ndarray]:
    """Scores and designated-layer features for a batch, inference mode."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if np.any(np.abs(x) > 1.5):
        log.warning("input beyond +/-1.5: was it normalized with the training scaler?")
    out, trace = nn.forward(gan.discriminator, x, nn.INFER)
    return out[:, 0], trace.post[gan.architecture.feature_layer]


def discriminate(gan: TrainedGan, sample) -> tuple[float, np.ndarray]:
    scores, feats = discriminate_batch(gan, sample)
    return float(scores[0]), feats[0]


def verdict(score: float, threshold: float = 0.5) -> str:
    return FAULT if score > threshold else ANOMALY


@dataclass
class DetectionOutcome:
    score: float
    features: np.ndarray
    verdict: str


def detect(gan: TrainedGan, sample, threshold: float = 0.5) -> DetectionOutcome:
    score, feats = discriminate(gan, sample)
    return DetectionOutcome(score, feats, verdict(score, threshold))


def generate(gan: TrainedGan, n: int, rng: np.random.Generator) -> np.ndarray:
    z = sample_latent(n, gan.architecture.latent_dim, gan.config.prior, rng)
    return gan.generator(z)


def save_history(history: np.ndarray, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for i, row in enumerate(history, start=1):
            w.writerow([i] + [repr(float(v)) for v in row])


def load_history(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if rows[0] != list(HISTORY_COLUMNS):
        raise ValueError(f"{path}: unexpected history header {rows[0]}")
    return np.array([[float(v) for v in r[1:]] for r in rows[1:]]).reshape(-1, 5)


def save_gan(gan: TrainedGan, directory, normalization: dict | None = None,
             extra: dict | None = None) -> dict[str, Path]:
    """Write ``<name>_generator.json``, ``<name>_discriminator.json``, sidecar and history CSV.

    ``extra`` entries (run metadata such as a config hash) are merged into the sidecar.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    name = gan.variant.name
    paths = {
        "generator": directory / f"{name}_generator.json",
        "discriminator": directory / f"{name}_discriminator.json",
        "sidecar": directory / f"{name}.json",
        "history": directory / f"{name}_history.csv",
    }
    nn.save(gan.generator, paths["generator"])
    nn.save(gan.discriminator, paths["discriminator"])
    sidecar = {
        "variant": name,
        "lambda": gan.variant.lam,
        "architecture": gan.architecture.to_dict(),
        "train": asdict(gan.config),
        "seed": gan.config.seed,
        "normalization": normalization,
        **(extra or {}),
    }
    paths["sidecar"].write_text(json.dumps(sidecar, indent=2))
    save_history(gan.history, paths["history"])
    return paths


def load_gan(directory, name: str) -> tuple[TrainedGan, dict | None]:
    directory = Path(directory)
    sidecar_path = directory / f"{name}.json"
    if not sidecar_path.exists():
        raise FileNotFoundError(f"no model sidecar {sidecar_path}")
    meta = json.loads(sidecar_path.read_text())
    gan = TrainedGan(
        nn.load(directory / f"{name}_generator.json"),
        nn.load(directory / f"{name}_discriminator.json"),
        GanArchitecture.from_dict(meta["architecture"]),
        GanVariant(meta["lambda"]),
        TrainConfig(**meta["train"]),
        load_history(directory / f"{name}_history.csv"),
    )
    return gan, meta.get("normalization")

"""Dense feedforward networks with hand-derived gradients, inverted dropout and Adam.

Everything runs in float64 on numpy. Weights are stored ``(out, in)`` so a layer
computes ``x @ W.T + b`` on a row-major batch.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numba
import numpy as np

FORMAT_VERSION = 1

ACTIVATIONS = ("relu", "leaky_relu", "tanh", "sigmoid", "softmax", "identity")

TRAIN = "train"
INFER = "infer"


class ShapeError(ValueError):
    pass


class StaleTraceError(ValueError):
    pass


@dataclass(frozen=True)
class Activation:
    kind: str
    slope: float = 0.2

    def __post_init__(self):
        if self.kind not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.kind!r}")
        if self.kind == "leaky_relu" and not 0.0 < self.slope < 1.0:
            raise ValueError(f"LeakyReLU slope must lie in (0, 1), got {self.slope}")

    @property
    def has_kink(self) -> bool:
        return self.kind in ("relu", "leaky_relu")

    def __call__(self, z: np.ndarray) -> np.ndarray:
        k = self.kind
        if k == "relu":
            return np.maximum(z, 0.0)
        if k == "leaky_relu":
            return np.maximum(z, self.slope * z)
        if k == "tanh":
            return np.tanh(z)
        if k == "sigmoid":
            return _sigmoid(z)
        if k == "softmax":
            e = np.exp(z - z.max(axis=1, keepdims=True))
            return e / e.sum(axis=1, keepdims=True)
        return z.copy()

    def backward(self, z: np.ndarray, a: np.ndarray, grad: np.ndarray) -> np.ndarray:
        """Map a gradient w.r.t. the activation output to one w.r.t. its input."""
        k = self.kind
        if k == "relu":
            return grad * (z > 0)
        if k == "leaky_relu":
            return grad * np.where(z > 0, 1.0, self.slope)
        if k == "tanh":
            return grad * (1.0 - a * a)
        if k == "sigmoid":
            return grad * a * (1.0 - a)
        if k == "softmax":
            return a * (grad - np.sum(grad * a, axis=1, keepdims=True))
        return grad


def _sigmoid(z):
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


RELU = Activation("relu")
TANH = Activation("tanh")
SIGMOID = Activation("sigmoid")
SOFTMAX = Activation("softmax")
IDENTITY = Activation("identity")


def leaky_relu(slope: float = 0.2) -> Activation:
    return Activation("leaky_relu", slope)


@dataclass
class DenseLayer:
    weights: np.ndarray
    bias: np.ndarray
    activation: Activation = IDENTITY
    dropout_rate: float = 0.0

    def __post_init__(self):
        self.weights = np.array(self.weights, dtype=np.float64, ndmin=2)
        self.bias = np.array(self.bias, dtype=np.float64).reshape(-1)
        if self.bias.shape[0] != self.weights.shape[0]:
            raise ShapeError(
                f"bias length {self.bias.shape[0]} != weight rows {self.weights.shape[0]}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")

    @property
    def n_in(self) -> int:
        return self.weights.shape[1]

    @property
    def n_out(self) -> int:
        return self.weights.shape[0]


class Mlp:
    """Ordered stack of dense layers.

    ``version`` is bumped on every parameter update so traces recorded before
    an update can be told apart from fresh ones.
    """

    def __init__(self, layers: Sequence[DenseLayer]):
        layers = list(layers)
        if not layers:
            raise ValueError("an Mlp needs at least one layer")
        for i in range(len(layers) - 1):
            if layers[i].n_out != layers[i + 1].n_in:
                raise ShapeError(
                    f"layer {i} emits {layers[i].n_out} units but layer {i + 1} "
                    f"expects {layers[i + 1].n_in}")
        self.layers = layers
        self.version = 0

    @classmethod
    def build(cls, sizes: Sequence[int], activations: Sequence[Activation],
              rng: np.random.Generator, dropout: Sequence[float] | None = None) -> "Mlp":
        """Glorot-uniform weights, zero biases. ``sizes`` includes the input width."""
        if len(activations) != len(sizes) - 1:
            raise ValueError("need one activation per layer")
        dropout = list(dropout) if dropout is not None else [0.0] * len(activations)
        layers = []
        for n_in, n_out, act, p in zip(sizes[:-1], sizes[1:], activations, dropout):
            limit = np.sqrt(6.0 / (n_in + n_out))
            w = rng.uniform(-limit, limit, size=(n_out, n_in))
            layers.append(DenseLayer(w, np.zeros(n_out), act, p))
        return cls(layers)

    @property
    def n_in(self) -> int:
        return self.layers[0].n_in

    @property
    def n_out(self) -> int:
        return self.layers[-1].n_out

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend((layer.weights, layer.bias))
        return out

    def copy(self) -> "Mlp":
        return Mlp([DenseLayer(l.weights.copy(), l.bias.copy(), l.activation, l.dropout_rate)
                    for l in self.layers])

    def __call__(self, batch):
        return forward(self, batch, INFER)[0]


@dataclass
class ForwardTrace:
    inputs: list[np.ndarray]
    pre: list[np.ndarray]
    activated: list[np.ndarray]
    post: list[np.ndarray]
    masks: list[np.ndarray | None]
    mlp_id: int
    version: int

    def __len__(self):
        return len(self.pre)

    def rows(self, sel) -> "ForwardTrace":
        """The trace restricted to a row slice; arrays are views, not copies."""
        pick = lambda arrs: [a if a is None else a[sel] for a in arrs]
        return ForwardTrace(pick(self.inputs), pick(self.pre), pick(self.activated), pick(self.post),
                            pick(self.masks), self.mlp_id, self.version)


def forward(mlp: Mlp, batch, mode: str = INFER, rng: np.random.Generator | None = None,
            stop_at: int | None = None) -> tuple[np.ndarray, ForwardTrace]:
    """Run ``batch`` through the net.

    In ``TRAIN`` mode layers with a dropout rate draw inverted-dropout masks
    from ``rng``; ``INFER`` is a plain pass. ``stop_at`` ends the pass after
    that layer index.
    """
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != mlp.n_in:
        raise ShapeError(f"batch has {x.shape[-1]} columns, network expects {mlp.n_in}")
    if mode not in (TRAIN, INFER):
        raise ValueError(f"mode must be {TRAIN!r} or {INFER!r}")
    last = len(mlp.layers) - 1 if stop_at is None else stop_at
    trace = ForwardTrace([], [], [], [], [], id(mlp), mlp.version)
    a = x
    for layer in mlp.layers[:last + 1]:
        trace.inputs.append(a)
        z = a @ layer.weights.T + layer.bias
        h = layer.activation(z)
        mask = None
        if mode == TRAIN and layer.dropout_rate > 0:
            if rng is None:
                raise ValueError("dropout in train mode needs an rng")
            keep = 1.0 - layer.dropout_rate
            mask = (rng.random(h.shape) < keep) / keep
            a = h * mask
        else:
            a = h
        trace.pre.append(z)
        trace.activated.append(h)
        trace.post.append(a)
        trace.masks.append(mask)
    return a, trace


@dataclass
class Gradients:
    weights: list[np.ndarray | None]
    bias: list[np.ndarray | None]
    input: np.ndarray

    def flat(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.bias):
            out.extend((w, b))
        return out


def backward(mlp: Mlp, trace: ForwardTrace, output_grad, injected: dict[int, np.ndarray] | None = None,
             param_grads: bool = True, pre_activation: bool = False) -> Gradients:
    """Backpropagate ``output_grad`` (gradient w.r.t. the last traced layer's output).

    ``injected`` maps a layer index to an extra gradient w.r.t. that layer's
    output, which is how losses on intermediate features enter. With
    ``pre_activation`` the incoming gradient is taken w.r.t. the last layer's
    pre-activation instead (fused sigmoid/log losses).
    """
    if trace.mlp_id != id(mlp) or trace.version != mlp.version:
        raise StaleTraceError("trace was recorded on a different or since-updated network")
    depth = len(trace)
    g = np.asarray(output_grad, dtype=np.float64)
    if g.shape != trace.post[-1].shape:
        raise ShapeError(f"output_grad shape {g.shape} != output shape {trace.post[-1].shape}")
    injected = injected or {}
    dws: list[np.ndarray | None] = [None] * len(mlp.layers)
    dbs: list[np.ndarray | None] = [None] * len(mlp.layers)
    for i in range(depth - 1, -1, -1):
        layer = mlp.layers[i]
        if i in injected:
            extra = np.asarray(injected[i], dtype=np.float64)
            if extra.shape != g.shape:
                raise ShapeError(f"injected gradient at layer {i} has shape {extra.shape}, "
                                 f"expected {g.shape}")
            g = g + extra
        if pre_activation and i == depth - 1:
            gz = g
        else:
            if trace.masks[i] is not None:
                g = g * trace.masks[i]
            gz = layer.activation.backward(trace.pre[i], trace.activated[i], g)
        if param_grads:
            dws[i] = gz.T @ trace.inputs[i]
            dbs[i] = gz.sum(axis=0)
        g = gz @ layer.weights
    return Gradients(dws, dbs, g)


@dataclass
class AdamState:
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_mlp(cls, mlp: Mlp, lr=2e-4, beta1=0.5, beta2=0.999, eps=1e-8) -> "AdamState":
        params = mlp.params()
        return cls(lr, beta1, beta2, eps, 0,
                   [np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


@numba.njit(cache=True)
def _adam_kernel(p, g, m, v, b1, b2, step_size, inv_c2, eps):
    for i in range(p.size):
        gi = g[i]
        mi = b1 * m[i] + (1.0 - b1) * gi
        vi = b2 * v[i] + (1.0 - b2) * gi * gi
        m[i] = mi
        v[i] = vi
        p[i] -= step_size * (mi / (np.sqrt(vi) * inv_c2 + eps))


def adam_step(mlp: Mlp, grads: Gradients, state: AdamState) -> None:
    """Bias-corrected Adam update, applied in place.

    ``lr * m_hat / (sqrt(v_hat) + eps)`` is evaluated as
    ``(lr / c1) * m / (sqrt(v) / sqrt(c2) + eps)`` in one fused pass.
    """
    params = mlp.params()
    flat = grads.flat()
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(flat) != len(params):
        raise ShapeError("gradient list does not match network parameters")
    for p, g in zip(params, flat):
        if g is None:
            raise ValueError("missing parameter gradient (backward ran with param_grads=False?)")
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    step_size = state.lr / (1.0 - b1 ** t)
    inv_c2 = 1.0 / np.sqrt(1.0 - b2 ** t)
    for p, g, m, v in zip(params, flat, state.m, state.v):
        _adam_kernel(p.reshape(-1), np.ascontiguousarray(g, dtype=np.float64).reshape(-1),
                     m.reshape(-1), v.reshape(-1), b1, b2, step_size, inv_c2, state.eps)
    mlp.version += 1


# A loss maps network output to (value, d value / d output).
Loss = Callable[[np.ndarray], tuple[float, np.ndarray]]


def squared_error(target) -> Loss:
    target = np.asarray(target, dtype=np.float64)

    def loss(out):
        d = out - target
        return 0.5 * float(np.sum(d * d)), d
    return loss


def softmax_cross_entropy(onehot) -> Loss:
    """Mean cross-entropy for a softmax output layer."""
    onehot = np.asarray(onehot, dtype=np.float64)
    n = onehot.shape[0]

    def loss(probs):
        p = np.clip(probs, 1e-12, 1.0)
        return -float(np.sum(onehot * np.log(p))) / n, -onehot / p / n
    return loss


class GradCheck(NamedTuple):
    max_rel_error: float
    checked: int
    skipped: int


def grad_check(mlp: Mlp, batch, loss: Loss, h: float = 1e-5) -> GradCheck:
    """Compare backprop against central differences for every parameter.

    Entries whose ±h perturbation flips the side of a ReLU/LeakyReLU kink are
    skipped: the derivative there is only a subgradient.
    """
    out, trace = forward(mlp, batch, INFER)
    _, g_out = loss(out)
    analytic = backward(mlp, trace, g_out).flat()

    def kink_pattern():
        _, tr = forward(mlp, batch, INFER)
        return [tr.pre[i] > 0 for i, l in enumerate(mlp.layers) if l.activation.has_kink]

    def value():
        return loss(forward(mlp, batch, INFER)[0])[0]

    base_pattern = kink_pattern()
    worst, checked, skipped = 0.0, 0, 0
    for p, ga in zip(mlp.params(), analytic):
        flat_p, flat_g = p.reshape(-1), ga.reshape(-1)
        for j in range(flat_p.size):
            orig = flat_p[j]
            flat_p[j] = orig + h
            f_plus, pat_plus = value(), kink_pattern() if base_pattern else None
            flat_p[j] = orig - h
            f_minus, pat_minus = value(), kink_pattern() if base_pattern else None
            flat_p[j] = orig
            if base_pattern and not all(np.array_equal(a, b) for a, b in zip(pat_plus, pat_minus)):
                skipped += 1
                continue
            numeric = (f_plus - f_minus) / (2 * h)
            denom = max(abs(flat_g[j]), abs(numeric), 1e-8)
            worst = max(worst, abs(flat_g[j] - numeric) / denom)
            checked += 1
    return GradCheck(worst, checked, skipped)


def to_dict(mlp: Mlp) -> dict:
    return {
        "format": "f2gan_diag.mlp",
        "version": FORMAT_VERSION,
        "layers": [
            {
                "in": l.n_in,
                "out": l.n_out,
                "activation": l.activation.kind,
                "slope": l.activation.slope,
                "dropout": l.dropout_rate,
                "weights": l.weights.reshape(-1).tolist(),
                "bias": l.bias.tolist(),
            }
            for l in mlp.layers
        ],
    }


def from_dict(d: dict) -> Mlp:
    if d.get("format") != "f2gan_diag.mlp" or d.get("version") != FORMAT_VERSION:
        raise ValueError("not a version-1 f2gan_diag network file")
    layers = []
    for spec in d["layers"]:
        w = np.array(spec["weights"], dtype=np.float64)
        if w.size != spec["in"] * spec["out"]:
            raise ShapeError(f"layer weights hold {w.size} values, expected {spec['in'] * spec['out']}")
        layers.append(DenseLayer(w.reshape(spec["out"], spec["in"]), spec["bias"],
                                 Activation(spec["activation"], spec["slope"]), spec["dropout"]))
    return Mlp(layers)


def save(mlp: Mlp, path) -> None:
    Path(path).write_text(json.dumps(to_dict(mlp)))


def load(path) -> Mlp:
    return from_dict(json.loads(Path(path).read_text()))

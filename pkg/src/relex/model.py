"""Softmax classifiers over a flat parameter vector.

Parameter layout (fixed; every gradient-based metric relies on it): layer
by layer from input to output, each layer contributes its weight matrix
of shape ``(out, in)`` in row-major order followed by its bias vector
(omitted when ``use_bias`` is false). An empty ``hidden_layers`` gives
multinomial logistic regression with ``theta = [W.ravel(), b]``.
"""

from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .dataset import Dataset, Instance

ACTIVATIONS = ("relu", "tanh")


class NumericalError(FloatingPointError):
    """A computation produced NaN/Inf or otherwise broke down numerically."""


class FeatureMap(str, enum.Enum):
    INPUT = "x"
    LAST_HIDDEN = "last"
    ALL_HIDDEN = "all"


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int
    class_count: int
    hidden_layers: tuple[int, ...] = ()
    activation: str = "relu"
    l2_penalty: float = 0.0
    use_bias: bool = True

    def __post_init__(self):
        object.__setattr__(self, "hidden_layers", tuple(int(w) for w in self.hidden_layers))
        if self.input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        if self.class_count < 2:
            raise ValueError("class_count must be >= 2")
        if any(w < 1 for w in self.hidden_layers):
            raise ValueError("hidden layer widths must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if self.l2_penalty < 0:
            raise ValueError("l2_penalty must be nonnegative")

    @property
    def is_logreg(self) -> bool:
        return not self.hidden_layers

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        """(fan_in, fan_out) per layer."""
        dims = [self.input_dim, *self.hidden_layers, self.class_count]
        return list(zip(dims[:-1], dims[1:]))

    @property
    def param_count(self) -> int:
        return sum(o * i + (o if self.use_bias else 0) for i, o in self.layer_dims)


@dataclass(frozen=True)
class Model:
    spec: ModelSpec
    theta: np.ndarray

    def __post_init__(self):
        theta = np.array(self.theta, dtype=np.float64).ravel()
        if theta.shape != (self.spec.param_count,):
            raise ValueError(
                f"theta has {theta.size} entries, spec implies {self.spec.param_count}"
            )
        if not np.all(np.isfinite(theta)):
            raise NumericalError("theta contains non-finite entries")
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)

    @property
    def param_count(self) -> int:
        return self.spec.param_count

    def with_theta(self, theta: np.ndarray) -> "Model":
        return Model(self.spec, theta)

    def layers(self, theta: np.ndarray | None = None) -> list[tuple[np.ndarray, np.ndarray | None]]:
        """Views ``(W, b)`` into ``theta`` following the documented layout."""
        theta = self.theta if theta is None else theta
        out, pos = [], 0
        for fan_in, fan_out in self.spec.layer_dims:
            W = theta[pos : pos + fan_in * fan_out].reshape(fan_out, fan_in)
            pos += fan_in * fan_out
            b = None
            if self.spec.use_bias:
                b = theta[pos : pos + fan_out]
                pos += fan_out
            out.append((W, b))
        return out


def flatten_layers(layers: list[tuple[np.ndarray, np.ndarray | None]]) -> np.ndarray:
    parts = []
    for W, b in layers:
        parts.append(np.asarray(W).ravel())
        if b is not None:
            parts.append(np.asarray(b).ravel())
    return np.concatenate(parts)


def init_random(spec: ModelSpec, seed: int) -> Model:
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero."""
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in spec.layer_dims:
        bound = 1.0 / np.sqrt(fan_in)
        W = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        layers.append((W, np.zeros(fan_out) if spec.use_bias else None))
    return Model(spec, flatten_layers(layers))


# ------------------------------------------------------------- forward pass


def _act(z, name):
    return np.maximum(z, 0.0) if name == "relu" else np.tanh(z)


def _act_grad(z, a, name):
    return (z > 0).astype(np.float64) if name == "relu" else 1.0 - a * a


def _as_batch(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    return (x[None, :], True) if x.ndim == 1 else (x, False)


def _forward(model: Model, X: np.ndarray, theta: np.ndarray | None = None):
    """Returns (pre-activations, activations, logits); activations[0] is X."""
    layers = model.layers(theta)
    zs, acts = [], [X]
    a = X
    for l, (W, b) in enumerate(layers):
        z = a @ W.T
        if b is not None:
            z = z + b
        if l == len(layers) - 1:
            return zs, acts, z
        a = _act(z, model.spec.activation)
        zs.append(z)
        acts.append(a)
    raise AssertionError("unreachable")


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def logits(model: Model, x) -> np.ndarray:
    X, single = _as_batch(x)
    out = _forward(model, X)[2]
    return out[0] if single else out


def predict_proba(model: Model, x) -> np.ndarray:
    """Softmax class probabilities for one input or a batch of rows."""
    X, single = _as_batch(x)
    p = softmax(_forward(model, X)[2])
    return p[0] if single else p


def predict(model: Model, x):
    """Argmax class; ``np.argmax`` already resolves ties to the lowest index."""
    p = predict_proba(model, x)
    return int(np.argmax(p)) if p.ndim == 1 else np.argmax(p, axis=1)


def losses(model: Model, X, y) -> np.ndarray:
    X, _ = _as_batch(X)
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    lsm = log_softmax(_forward(model, X)[2])
    return -lsm[np.arange(len(y)), y]


def loss(model: Model, z: Instance) -> float:
    """Cross entropy -log p(y|x); the L2 penalty is not included."""
    return float(losses(model, z.features, [z.label])[0])


def _onehot(y: np.ndarray, C: int) -> np.ndarray:
    out = np.zeros((len(y), C))
    out[np.arange(len(y)), y] = 1.0
    return out


def per_example_gradients(model: Model, X, y, theta: np.ndarray | None = None) -> np.ndarray:
    """Cross-entropy gradients, one row of length ``param_count`` per example."""
    X, _ = _as_batch(X)
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    spec = model.spec
    layers = model.layers(theta)
    zs, acts, out = _forward(model, X, theta)
    delta = softmax(out) - _onehot(y, spec.class_count)
    blocks = []
    for l in range(len(layers) - 1, -1, -1):
        W, b = layers[l]
        a_prev = acts[l]
        layer_blocks = [(delta[:, :, None] * a_prev[:, None, :]).reshape(len(X), -1)]
        if b is not None:
            layer_blocks.append(delta)
        blocks.append(layer_blocks)
        if l > 0:
            delta = (delta @ W) * _act_grad(zs[l - 1], acts[l], spec.activation)
    return np.concatenate([blk for layer in reversed(blocks) for blk in layer], axis=1)


def loss_gradient(model: Model, z: Instance) -> np.ndarray:
    return per_example_gradients(model, z.features, [z.label])[0]


def objective(model: Model, X, y, theta: np.ndarray | None = None) -> float:
    """Mean cross entropy plus ``(l2_penalty/2) * ||theta||^2``."""
    theta = model.theta if theta is None else theta
    lsm = log_softmax(_forward(model, X, theta)[2])
    val = -lsm[np.arange(len(y)), y].mean()
    if model.spec.l2_penalty:
        val += 0.5 * model.spec.l2_penalty * float(theta @ theta)
    return float(val)


def objective_gradient(model: Model, X, y, theta: np.ndarray | None = None) -> np.ndarray:
    """Gradient of :func:`objective`, computed without per-example expansion."""
    theta = model.theta if theta is None else theta
    layers = model.layers(theta)
    zs, acts, out = _forward(model, X, theta)
    n = len(X)
    delta = (softmax(out) - _onehot(np.asarray(y), model.spec.class_count)) / n
    grads = []
    for l in range(len(layers) - 1, -1, -1):
        W, b = layers[l]
        grads.append((delta.T @ acts[l], None if b is None else delta.sum(axis=0)))
        if l > 0:
            delta = (delta @ W) * _act_grad(zs[l - 1], acts[l], model.spec.activation)
    g = flatten_layers(grads[::-1])
    if model.spec.l2_penalty:
        g = g + model.spec.l2_penalty * theta
    return g


def residual(model: Model, z: Instance) -> np.ndarray:
    """Softmax output minus the one-hot label."""
    p = predict_proba(model, z.features)
    p[z.label] -= 1.0
    return p


def residuals(model: Model, X, y) -> np.ndarray:
    p = predict_proba(model, np.atleast_2d(X))
    p[np.arange(len(p)), np.asarray(y)] -= 1.0
    return p


def features(model: Model, x, fmap: FeatureMap | str) -> np.ndarray:
    """Input, last-hidden, or concatenated-hidden representation of ``x``."""
    fmap = FeatureMap(fmap)
    X, single = _as_batch(x)
    if fmap is FeatureMap.INPUT:
        out = X.copy()
    else:
        if model.spec.is_logreg:
            raise ValueError(f"feature map {fmap.value!r} needs hidden layers")
        acts = _forward(model, X)[1][1:]
        out = acts[-1] if fmap is FeatureMap.LAST_HIDDEN else np.concatenate(acts, axis=1)
    return out[0] if single else out


# ----------------------------------------------------------------- training


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    epochs: int = 100
    batch_size: int = 32
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


class TrainResult(NamedTuple):
    model: Model
    final_loss: float
    initial_loss: float


def train(model: Model, ds: Dataset, cfg: TrainConfig) -> TrainResult:
    """Mini-batch Adam on :func:`objective`, reshuffling every epoch."""
    if ds.dim != model.spec.input_dim:
        raise ValueError(f"dataset dim {ds.dim} != model input_dim {model.spec.input_dim}")
    rng = np.random.default_rng(cfg.seed)
    theta = model.theta.copy()
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    X, y = ds.X, ds.y
    n = len(ds)
    initial = objective(model, X, y, theta)
    t = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            g = objective_gradient(model, X[idx], y[idx], theta)
            t += 1
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            m_hat = m / (1 - b1**t)
            v_hat = v / (1 - b2**t)
            theta = theta - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
        if not np.all(np.isfinite(theta)):
            raise NumericalError(f"non-finite parameters after epoch {epoch}")
        val = objective(model, X, y, theta)
        if not np.isfinite(val):
            raise NumericalError(f"non-finite training loss at epoch {epoch}")
    return TrainResult(Model(model.spec, theta), val, initial)


def accuracy(model: Model, ds: Dataset) -> float:
    return float(np.mean(predict(model, ds.X) == ds.y))


# ------------------------------------------------------------ serialization

MODEL_FORMAT = "relex-model/1"


def save_model(model: Model, path, meta: dict | None = None) -> None:
    spec = asdict(model.spec)
    spec["hidden_layers"] = list(spec["hidden_layers"])
    doc = {
        "format": MODEL_FORMAT,
        "spec": spec,
        "theta": [float(v) for v in model.theta],
        "meta": meta or {},
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def load_model(path) -> tuple[Model, dict]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != MODEL_FORMAT:
        raise ValueError(f"{path}: not a {MODEL_FORMAT} file")
    spec = ModelSpec(**doc["spec"])
    return Model(spec, np.array(doc["theta"], dtype=np.float64)), doc.get("meta", {})

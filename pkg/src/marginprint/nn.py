"""Dense feedforward classifiers in plain numpy.

Weights are stored as ``(fan_in, fan_out)`` matrices so that a batch of
row-vector inputs ``X`` maps to logits via ``X @ W + b`` layer by layer.
Everything runs in float64.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigurationError, FormatVersionError, ShapeError, TrainingError

MODEL_FORMAT_VERSION = 1

ACTIVATIONS = ("relu", "tanh")
TAGS = (
    "protected",
    "pirated_surrogate",
    "independent_surrogate",
    "pirated_test",
    "independent_test",
    "suspect",
)
LOSSES = ("cross_entropy", "soft_kl")


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 stream; the single source of randomness in the package."""
    return np.random.Generator(np.random.PCG64(int(seed)))


@dataclass(frozen=True)
class ModelSpec:
    layer_sizes: tuple
    activation: str = "tanh"
    seed: int = 0

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2:
            raise ConfigurationError(f"layer_sizes needs at least 2 entries, got {list(sizes)}")
        if any(s <= 0 for s in sizes):
            raise ConfigurationError(f"layer sizes must be positive, got {list(sizes)}")
        if sizes[-1] < 2:
            raise ConfigurationError("the output layer needs at least 2 classes")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        if int(self.seed) < 0:
            raise ConfigurationError("seed must be non-negative")

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_classes(self) -> int:
        return self.layer_sizes[-1]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0
    epochs: int = 50
    batch_size: int = 32
    seed: int = 0
    loss: str = "cross_entropy"
    temperature: float = 1.0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigurationError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigurationError("weight_decay must be non-negative")
        if self.epochs < 0:
            raise ConfigurationError("epochs must be non-negative")
        if self.batch_size <= 0:
            raise ConfigurationError("batch_size must be positive")
        if self.loss not in LOSSES:
            raise ConfigurationError(f"unknown loss {self.loss!r}")
        if self.loss == "soft_kl" and not self.temperature > 0:
            raise ConfigurationError("soft_kl needs a positive temperature")


@dataclass
class Model:
    """A trained (or freshly initialised) classifier.

    Treated as immutable: every operation that changes parameters returns a
    new instance.
    """

    spec: ModelSpec
    weights: list
    biases: list
    tag: str = "protected"
    lineage: str = ""

    def __post_init__(self):
        sizes = self.spec.layer_sizes
        if len(self.weights) != len(sizes) - 1 or len(self.biases) != len(sizes) - 1:
            raise ShapeError("parameter count does not match layer_sizes")
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape != (sizes[i], sizes[i + 1]) or b.shape != (sizes[i + 1],):
                raise ShapeError(f"layer {i} has shapes {W.shape}, {b.shape}")
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise ShapeError(f"layer {i} holds non-finite parameters")
        if self.tag not in TAGS:
            raise ConfigurationError(f"unknown tag {self.tag!r}")

    @property
    def input_dim(self) -> int:
        return self.spec.input_dim

    @property
    def n_classes(self) -> int:
        return self.spec.n_classes

    def logits(self, X) -> np.ndarray:
        """Batched logits for an ``(n, d)`` array (or a single vector)."""
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            return self.logits(X[None, :])[0]
        _check_dim(self, X)
        h = X
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ W + b
            if i < last:
                h = _activate(h, self.spec.activation)
        return h

    def predict(self, X) -> np.ndarray:
        return argmax_lowest(self.logits(X))

    def with_params(self, weights, biases, **changes) -> "Model":
        return dataclasses.replace(
            self,
            weights=[np.array(W, dtype=np.float64) for W in weights],
            biases=[np.array(b, dtype=np.float64) for b in biases],
            **changes,
        )

    def copy(self, **changes) -> "Model":
        return self.with_params(self.weights, self.biases, **changes)

    def n_weights(self) -> int:
        return sum(W.size for W in self.weights)

    def to_dict(self) -> dict:
        return {
            "format_version": MODEL_FORMAT_VERSION,
            "spec": {
                "layer_sizes": list(self.spec.layer_sizes),
                "activation": self.spec.activation,
                "seed": int(self.spec.seed),
            },
            "tag": self.tag,
            "lineage": self.lineage,
            "parameters": {
                "weights": [W.tolist() for W in self.weights],
                "biases": [b.tolist() for b in self.biases],
            },
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Model":
        version = doc.get("format_version")
        if version != MODEL_FORMAT_VERSION:
            raise FormatVersionError(f"unsupported model format_version {version!r}")
        try:
            spec = ModelSpec(**doc["spec"])
            params = doc["parameters"]
            return cls(
                spec=spec,
                weights=[np.array(W, dtype=np.float64) for W in params["weights"]],
                biases=[np.array(b, dtype=np.float64) for b in params["biases"]],
                tag=doc.get("tag", "protected"),
                lineage=doc.get("lineage", ""),
            )
        except (KeyError, TypeError) as exc:
            raise ConfigurationError(f"malformed model document: {exc}") from exc

    def fingerprint_ref(self) -> str:
        """Content hash used to reference the model from other files."""
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return "sha256:" + hashlib.sha256(blob).hexdigest()


def _check_dim(model: Model, X: np.ndarray):
    if X.ndim != 2 or X.shape[1] != model.input_dim:
        raise ShapeError(f"expected inputs of dimension {model.input_dim}, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ShapeError("inputs must be finite")


def _activate(z, name):
    if name == "tanh":
        return np.tanh(z)
    return np.maximum(z, 0.0)


def _activation_grad(z, a, name):
    if name == "tanh":
        return 1.0 - a * a
    return (z > 0).astype(np.float64)


def argmax_lowest(scores: np.ndarray) -> np.ndarray:
    """Row-wise argmax; ``np.argmax`` already returns the first (lowest) index on ties."""
    return np.argmax(scores, axis=-1)


def softmax(z, axis=-1):
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(z, axis=-1):
    z = z - np.max(z, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


# -- construction -----------------------------------------------------------


def init_model(spec: ModelSpec, tag: str = "protected", lineage: str = "") -> Model:
    """Xavier-uniform weights, zero biases, deterministic in ``spec.seed``."""
    if not isinstance(spec, ModelSpec):
        raise ConfigurationError("init_model expects a ModelSpec")
    rng = make_rng(spec.seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(spec.layer_sizes[:-1], spec.layer_sizes[1:]):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return Model(spec=spec, weights=weights, biases=biases, tag=tag, lineage=lineage)


# -- inference ----------------------------------------------------------------


def forward_logits(model: Model, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError("forward_logits takes a single input vector; use Model.logits for batches")
    return model.logits(x)


def _check_class(model: Model, y: int) -> int:
    y = int(y)
    if not 0 <= y < model.n_classes:
        raise IndexError(f"class index {y} out of range for K={model.n_classes}")
    return y


def runner_up(logits: np.ndarray, y: int) -> int:
    masked = np.array(logits, dtype=np.float64)
    masked[y] = -np.inf
    return int(np.argmax(masked))


def logit_margin(model: Model, x, y: int) -> float:
    """Logit of class ``y`` minus the largest other logit."""
    y = _check_class(model, y)
    s = forward_logits(model, x)
    return float(s[y] - s[runner_up(s, y)])


def margins(model: Model, X, y) -> np.ndarray:
    """Vectorised :func:`logit_margin` over rows of ``X`` with labels ``y``."""
    S = model.logits(np.atleast_2d(X))
    y = np.asarray(y, dtype=np.int64)
    idx = np.arange(len(S))
    own = S[idx, y]
    S = S.copy()
    S[idx, y] = -np.inf
    return own - S.max(axis=1)


def _forward_cache(model: Model, X):
    pre, post = [], [X]
    h = X
    last = len(model.weights) - 1
    for i, (W, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ W + b
        pre.append(z)
        h = _activate(z, model.spec.activation) if i < last else z
        post.append(h)
    return pre, post


def _backward(model: Model, pre, post, dlogits, want_params=True):
    """Backpropagate ``dlogits`` (n, K); return input grads and parameter grads."""
    grad_W = [None] * len(model.weights)
    grad_b = [None] * len(model.weights)
    delta = dlogits
    for i in range(len(model.weights) - 1, -1, -1):
        if want_params:
            grad_W[i] = post[i].T @ delta
            grad_b[i] = delta.sum(axis=0)
        delta = delta @ model.weights[i].T
        if i > 0:
            delta = delta * _activation_grad(pre[i - 1], post[i], model.spec.activation)
    return delta, grad_W, grad_b


def input_gradient(model: Model, X, dlogits) -> np.ndarray:
    """Vector-Jacobian product of the logits w.r.t. inputs, batched."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    pre, post = _forward_cache(model, X)
    dx, _, _ = _backward(model, pre, post, np.atleast_2d(dlogits), want_params=False)
    return dx


def parameter_gradient(model: Model, X, dlogits):
    """Gradients of ``sum(dlogits * logits(X))`` w.r.t. weights and biases."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    pre, post = _forward_cache(model, X)
    _, gW, gb = _backward(model, pre, post, np.atleast_2d(dlogits))
    return gW, gb


def margin_gradient(model: Model, x, y: int):
    """Gradient of the logit margin at ``x`` with the runner-up class held fixed.

    Returns ``(gradient, norm, runner_up)``. The runner-up is the lowest-index
    maximiser among classes other than ``y``.
    """
    y = _check_class(model, y)
    x = np.asarray(x, dtype=np.float64)
    s = forward_logits(model, x)
    k = runner_up(s, y)
    d = np.zeros(model.n_classes)
    d[y], d[k] = 1.0, -1.0
    grad = input_gradient(model, x, d)[0]
    return grad, float(np.linalg.norm(grad)), k


# -- training -----------------------------------------------------------------


def _loss_and_grad(logits, labels, soft, cfg: TrainConfig):
    n = len(logits)
    if cfg.loss == "cross_entropy":
        logp = log_softmax(logits)
        loss = -np.mean(logp[np.arange(n), labels])
        d = np.exp(logp)
        d[np.arange(n), labels] -= 1.0
        return loss, d / n
    T = cfg.temperature
    log_ps = log_softmax(logits / T)
    log_pt = log_softmax(soft / T)
    pt = np.exp(log_pt)
    loss = T * T * np.mean(np.sum(pt * (log_pt - log_ps), axis=1))
    return loss, T * (np.exp(log_ps) - pt) / n


def train(model: Model, data, cfg: TrainConfig, masks: Optional[Sequence[np.ndarray]] = None) -> Model:
    """Minibatch SGD with momentum (PyTorch-style update).

    ``masks`` optionally pins pruned weights at zero throughout training.
    Soft-label training reads teacher logits from ``data.soft_labels``.
    """
    X = np.asarray(data.inputs, dtype=np.float64)
    labels = np.asarray(data.labels, dtype=np.int64)
    if len(X) == 0:
        raise TrainingError("cannot train on an empty dataset")
    _check_dim(model, X)
    if labels.min() < 0 or labels.max() >= model.n_classes:
        raise TrainingError("labels fall outside [0, K)")
    soft = None
    if cfg.loss == "soft_kl":
        if data.soft_labels is None:
            raise TrainingError("soft_kl training needs soft labels on the dataset")
        soft = np.asarray(data.soft_labels, dtype=np.float64)
        if soft.shape != (len(X), model.n_classes):
            raise TrainingError(f"soft labels have shape {soft.shape}")
    if cfg.epochs == 0:
        return model.copy()

    weights = [W.copy() for W in model.weights]
    biases = [b.copy() for b in model.biases]
    if masks is not None:
        masks = [np.asarray(m, dtype=np.float64) for m in masks]
        weights = [W * m for W, m in zip(weights, masks)]
    vel_W = [np.zeros_like(W) for W in weights]
    vel_b = [np.zeros_like(b) for b in biases]
    work = model.with_params(weights, biases)
    # share arrays so in-place updates are visible to the forward pass
    work.weights, work.biases = weights, biases

    rng = make_rng(cfg.seed)
    n = len(X)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for batch, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            pre, post = _forward_cache(work, X[idx])
            loss, dlogits = _loss_and_grad(post[-1], labels[idx], None if soft is None else soft[idx], cfg)
            if not np.isfinite(loss):
                raise TrainingError("non-finite loss", epoch=epoch, batch=batch)
            _, gW, gb = _backward(work, pre, post, dlogits)
            for i in range(len(weights)):
                gW[i] = gW[i] + cfg.weight_decay * weights[i]
                gb[i] = gb[i] + cfg.weight_decay * biases[i]
                vel_W[i] *= cfg.momentum
                vel_W[i] += gW[i]
                vel_b[i] *= cfg.momentum
                vel_b[i] += gb[i]
                weights[i] -= cfg.learning_rate * vel_W[i]
                biases[i] -= cfg.learning_rate * vel_b[i]
                if masks is not None:
                    weights[i] *= masks[i]
            if not all(np.all(np.isfinite(W)) for W in weights):
                raise TrainingError("parameters diverged", epoch=epoch, batch=batch)
    return model.with_params(weights, biases)


def accuracy(model: Model, data) -> float:
    return float(np.mean(model.predict(data.inputs) == np.asarray(data.labels)))

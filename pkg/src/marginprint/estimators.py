"""scikit-learn style wrappers around the functional core."""
from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .datagen import Dataset
from .errors import ConfigurationError
from .fingerprint import FingerprintSet, GenConfig, generate
from .modelops import ModelPool
from .nn import Model, ModelSpec, TrainConfig, init_model, softmax, train
from .verify import decide, matching_rate


class DenseClassifier(ClassifierMixin, BaseEstimator):
    """Fully connected classifier trained with SGD and momentum.

    Arbitrary label values are mapped to ``0..K-1`` through ``classes_``;
    the fitted network is available as ``model_``.
    """

    def __init__(self, hidden_layer_sizes=(32, 32), activation: str = "tanh", learning_rate: float = 0.05,
                 momentum: float = 0.9, weight_decay: float = 0.0, epochs: int = 50, batch_size: int = 32,
                 random_state: int = 0):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.activation = activation
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.batch_size = batch_size
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_, encoded = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ConfigurationError("need at least two classes")
        self.n_features_in_ = X.shape[1]
        spec = ModelSpec((X.shape[1], *self.hidden_layer_sizes, len(self.classes_)), self.activation,
                         int(self.random_state))
        cfg = TrainConfig(learning_rate=self.learning_rate, momentum=self.momentum,
                          weight_decay=self.weight_decay, epochs=self.epochs, batch_size=self.batch_size,
                          seed=int(self.random_state))
        self.model_ = train(init_model(spec), Dataset(X, encoded, n_classes=len(self.classes_)), cfg)
        return self

    def _checked(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return X

    def decision_function(self, X) -> np.ndarray:
        return self.model_.logits(self._checked(X))

    def predict_proba(self, X) -> np.ndarray:
        return softmax(self.decision_function(X))

    def predict(self, X) -> np.ndarray:
        X = self._checked(X)
        return self.classes_[self.model_.predict(X)]


def _as_model(obj) -> Model:
    if isinstance(obj, Model):
        return obj
    if isinstance(obj, DenseClassifier):
        check_is_fitted(obj, "model_")
        return obj.model_
    raise ConfigurationError(f"expected a Model or fitted DenseClassifier, got {type(obj).__name__}")


def _as_pool(obj, role: str) -> ModelPool:
    if isinstance(obj, ModelPool):
        return obj
    return ModelPool(models=[_as_model(m) for m in obj], role=role)


class Fingerprinter(BaseEstimator):
    """Generates a fingerprint set for ``protected`` and scores suspects against it.

    ``fit(X, y)`` takes the protected model's training inputs and class
    indices. ``decision_function`` returns matching rates; ``predict`` returns
    1 for suspects flagged as pirated at threshold ``theta``.
    """

    def __init__(self, protected=None, pirated_pool=None, independent_pool=None, m_anchor: float = 8.0,
                 q_margin: float = 0.5, q_lip: float = 0.5, q_eps: float = 1.0, n_grid: int = 500,
                 max_fingerprints: int = 100, cw_restarts: int = 8, theta: Optional[float] = None):
        self.protected = protected
        self.pirated_pool = pirated_pool
        self.independent_pool = independent_pool
        self.m_anchor = m_anchor
        self.q_margin = q_margin
        self.q_lip = q_lip
        self.q_eps = q_eps
        self.n_grid = n_grid
        self.max_fingerprints = max_fingerprints
        self.cw_restarts = cw_restarts
        self.theta = theta

    def fit(self, X, y):
        if self.protected is None or self.pirated_pool is None or self.independent_pool is None:
            raise ConfigurationError("protected, pirated_pool and independent_pool must be set")
        X, y = check_X_y(X, y, dtype=np.float64)
        protected = _as_model(self.protected)
        if isinstance(self.protected, DenseClassifier):
            y = np.searchsorted(self.protected.classes_, y)
        cfg = GenConfig(m_anchor=self.m_anchor, q_margin=self.q_margin, q_lip=self.q_lip, q_eps=self.q_eps,
                        n_grid=self.n_grid, max_fingerprints=self.max_fingerprints,
                        cw_restarts=self.cw_restarts)
        data = Dataset(X, y, n_classes=protected.n_classes)
        self.fingerprint_set_: FingerprintSet = generate(
            protected, data, _as_pool(self.pirated_pool, "pirated_surrogate"),
            _as_pool(self.independent_pool, "independent_surrogate"), cfg,
        )
        return self

    def decision_function(self, suspects) -> np.ndarray:
        check_is_fitted(self, "fingerprint_set_")
        return np.array([matching_rate(_as_model(s), self.fingerprint_set_).matching_rate for s in suspects])

    def predict(self, suspects) -> np.ndarray:
        if self.theta is None:
            raise ConfigurationError("set theta before calling predict")
        check_is_fitted(self, "fingerprint_set_")
        reports = [decide(matching_rate(_as_model(s), self.fingerprint_set_), self.theta) for s in suspects]
        return np.array([r.decision == "pirated" for r in reports], dtype=np.int64)

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import central_difference, linear_model
from marginprint.datagen import Dataset
from marginprint.errors import ConfigurationError, FormatVersionError, ShapeError, TrainingError
from marginprint.nn import (
    Model, ModelSpec, TrainConfig, accuracy, argmax_lowest, forward_logits, init_model, input_gradient,
    logit_margin, margin_gradient, margins, parameter_gradient, runner_up, softmax, train,
)


def reference_forward(model, x):
    """Loop-based forward pass kept deliberately separate from Model.logits."""
    h = list(map(float, x))
    for layer, (W, b) in enumerate(zip(model.weights, model.biases)):
        out = []
        for j in range(W.shape[1]):
            z = b[j] + sum(h[i] * W[i, j] for i in range(W.shape[0]))
            if layer < len(model.weights) - 1:
                z = np.tanh(z) if model.spec.activation == "tanh" else max(z, 0.0)
            out.append(z)
        h = out
    return np.array(h)


def test_init_is_deterministic():
    a = init_model(ModelSpec((2, 4, 2), "relu", 7))
    b = init_model(ModelSpec((2, 4, 2), "relu", 7))
    assert json.dumps(a.to_dict()) == json.dumps(b.to_dict())


def test_spec_needs_two_layers():
    with pytest.raises(ConfigurationError):
        ModelSpec((2,), "relu", 0)


@pytest.mark.parametrize("bad", [dict(layer_sizes=(2, 0, 2)), dict(layer_sizes=(2, 1)),
                                 dict(layer_sizes=(2, 2), activation="sigmoid")])
def test_spec_validation(bad):
    with pytest.raises(ConfigurationError):
        ModelSpec(**bad)


def test_weight_shapes():
    m = init_model(ModelSpec((2, 8, 8, 3), "tanh", 1))
    assert [W.shape for W in m.weights] == [(2, 8), (8, 8), (8, 3)]
    assert all(np.all(b == 0) for b in m.biases)


def test_zero_model_gives_zero_logits():
    m = init_model(ModelSpec((3, 5, 2), "tanh", 0))
    z = m.with_params([np.zeros_like(W) for W in m.weights], [np.zeros_like(b) for b in m.biases])
    assert np.all(z.logits(np.array([1.0, -4.0, 2.5])) == 0)


def test_identity_layer():
    m = linear_model(np.eye(2))
    assert np.array_equal(forward_logits(m, [1.0, -2.0]), [1.0, -2.0])


@pytest.mark.parametrize("act", ["tanh", "relu"])
def test_forward_matches_reference(act):
    rng = np.random.default_rng(0)
    m = init_model(ModelSpec((4, 6, 5, 3), act, 11))
    m = m.with_params(m.weights, [rng.normal(size=b.shape) for b in m.biases])
    for x in rng.normal(size=(5, 4)):
        np.testing.assert_allclose(forward_logits(m, x), reference_forward(m, x), rtol=1e-12, atol=1e-12)
    X = rng.normal(size=(5, 4))
    np.testing.assert_allclose(m.logits(X), np.array([forward_logits(m, x) for x in X]), atol=1e-14)


def test_dimension_mismatch():
    m = init_model(ModelSpec((3, 2), "tanh", 0))
    with pytest.raises(ShapeError):
        m.logits(np.zeros(4))


def test_bad_parameter_shapes():
    spec = ModelSpec((2, 3), "tanh", 0)
    with pytest.raises(ShapeError):
        Model(spec, [np.zeros((3, 2))], [np.zeros(3)])
    with pytest.raises(ShapeError):
        Model(spec, [np.full((2, 3), np.nan)], [np.zeros(3)])


@pytest.mark.parametrize("logits,y,expected", [((3, 1, 0), 0, 2.0), ((3, 3, 0), 0, 0.0), ((1, 5, 0), 0, -4.0)])
def test_logit_margin_examples(logits, y, expected):
    m = linear_model(np.eye(3))
    assert logit_margin(m, np.array(logits, dtype=float), y) == expected


def test_runner_up_ties_go_to_lowest_index():
    assert runner_up(np.array([5.0, 2.0, 2.0, 2.0]), 0) == 1
    assert runner_up(np.array([2.0, 5.0, 2.0]), 1) == 0
    assert list(argmax_lowest(np.array([[1.0, 1.0], [0.0, 3.0]]))) == [0, 1]


def test_margins_vectorised():
    rng = np.random.default_rng(1)
    m = init_model(ModelSpec((3, 7, 4), "tanh", 2))
    X = rng.normal(size=(20, 3))
    y = rng.integers(0, 4, size=20)
    np.testing.assert_allclose(margins(m, X, y), [logit_margin(m, x, c) for x, c in zip(X, y)], atol=1e-14)


def test_linear_margin_gradient_is_row_difference():
    W = np.array([[1.0, 4.0, -2.0], [3.0, 0.5, 1.0]])
    m = linear_model(W)
    x = np.array([0.2, 0.1])  # logits (0.5, 0.85, -0.3): runner-up of class 0 is class 1
    grad, norm, k = margin_gradient(m, x, 0)
    assert k == 1
    np.testing.assert_array_equal(grad, W[:, 0] - W[:, 1])
    assert norm == pytest.approx(np.linalg.norm(W[:, 0] - W[:, 1]))


@pytest.mark.parametrize("seed", range(5))
def test_margin_gradient_matches_finite_differences(seed):
    m = init_model(ModelSpec((5, 9, 9, 3), "tanh", seed))
    x = np.random.default_rng(seed).normal(size=5)
    y = 1
    grad, _, k = margin_gradient(m, x, y)
    fd = central_difference(lambda v: forward_logits(m, v)[y] - forward_logits(m, v)[k], x)
    assert np.linalg.norm(grad - fd) / max(np.linalg.norm(fd), 1e-12) < 1e-4


def test_parameter_gradient_matches_finite_differences():
    m = init_model(ModelSpec((3, 4, 2), "tanh", 5))
    X = np.random.default_rng(2).normal(size=(6, 3))
    dl = np.random.default_rng(3).normal(size=(6, 2))
    gW, gb = parameter_gradient(m, X, dl)
    W0 = m.weights[0]
    for (i, j) in [(0, 0), (2, 3), (1, 2)]:
        def f(v, i=i, j=j):
            W = W0.copy()
            W[i, j] = v[0]
            return float(np.sum(m.with_params([W, m.weights[1]], m.biases).logits(X) * dl))
        assert gW[0][i, j] == pytest.approx(central_difference(f, [W0[i, j]])[0], rel=1e-6)
    gx = input_gradient(m, X, dl)
    fd = central_difference(lambda v: float(np.sum(m.logits(v[None])[0] * dl[0])), X[0])
    np.testing.assert_allclose(gx[0], fd, rtol=1e-6, atol=1e-9)


def test_training_reaches_high_accuracy(blobs):
    m = train(init_model(ModelSpec((2, 8, 2), "tanh", 0)), blobs, TrainConfig(epochs=50))
    assert accuracy(m, blobs) >= 0.99


def test_zero_epochs_is_noop(blobs):
    m = init_model(ModelSpec((2, 8, 2), "tanh", 0))
    out = train(m, blobs, TrainConfig(epochs=0))
    assert all(np.array_equal(a, b) for a, b in zip(m.weights + m.biases, out.weights + out.biases))


def test_training_is_deterministic(blobs):
    spec = ModelSpec((2, 8, 2), "relu", 4)
    a = train(init_model(spec), blobs, TrainConfig(epochs=5, seed=9))
    b = train(init_model(spec), blobs, TrainConfig(epochs=5, seed=9))
    assert a.fingerprint_ref() == b.fingerprint_ref()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises_training_error(blobs):
    m = init_model(ModelSpec((2, 8, 2), "relu", 0))
    big = Dataset(blobs.inputs * 1e154, blobs.labels)
    with pytest.raises(TrainingError) as info:
        train(m, big, TrainConfig(epochs=3, learning_rate=1e3))
    assert info.value.epoch is not None


def test_training_rejects_bad_labels(blobs):
    m = init_model(ModelSpec((2, 8, 2), "tanh", 0))
    with pytest.raises(TrainingError):
        train(m, Dataset(blobs.inputs, blobs.labels * 2, n_classes=3), TrainConfig(epochs=1))


def test_model_round_trip():
    m = init_model(ModelSpec((3, 4, 2), "relu", 8), tag="independent_test", lineage="x")
    back = Model.from_dict(json.loads(json.dumps(m.to_dict())))
    assert back.fingerprint_ref() == m.fingerprint_ref()
    doc = m.to_dict()
    doc["format_version"] = 99
    with pytest.raises(FormatVersionError):
        Model.from_dict(doc)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=6))
def test_softmax_is_a_distribution(z):
    p = softmax(np.array(z))
    assert np.all(p >= 0) and abs(p.sum() - 1) < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.integers(0, 2))
def test_margin_sign_matches_prediction(seed, y):
    m = init_model(ModelSpec((3, 5, 3), "tanh", seed))
    x = np.random.default_rng(seed).normal(size=3)
    g = logit_margin(m, x, y)
    assert (g > 0) == (int(m.predict(x)) == y) or g == 0

import numpy as np
import pytest

from marginprint.datagen import gen_blobs
from marginprint.nn import Model, ModelSpec


def linear_model(W, b=None, tag="protected", lineage="") -> Model:
    """One-layer model with logits ``x @ W + b``; ``W`` is (d, K)."""
    W = np.asarray(W, dtype=np.float64)
    b = np.zeros(W.shape[1]) if b is None else np.asarray(b, dtype=np.float64)
    return Model(ModelSpec(W.shape, "tanh", 0), [W], [b], tag=tag, lineage=lineage)


def central_difference(f, x, h=1e-6):
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        grad[i] = (f(x + e) - f(x - e)) / (2 * h)
    return grad


@pytest.fixture
def blobs():
    return gen_blobs(100, [[-5.0, 0.0], [5.0, 0.0]], 0.5, seed=3)


ACCEPTANCE_LINES = []


def record_criterion(number: int, passed: bool, detail: str):
    line = f"{'PASS' if passed else 'FAIL'} criterion {number}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

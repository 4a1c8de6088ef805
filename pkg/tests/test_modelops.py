import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import linear_model
from marginprint.datagen import split
from marginprint.errors import ConfigurationError
from marginprint.modelops import (
    AttackSpec, ModelPool, add_parameter_noise, apply_attack, build_pool, check_disjoint_seed_ranges,
    distill, lineage_field, load_pool, performance_report, prune, prune_masks, save_pool,
    signed_gradient_examples,
)
from marginprint.nn import ModelSpec, TrainConfig, accuracy, init_model, make_rng, train

FAST = TrainConfig(epochs=3)


@pytest.fixture
def protected(blobs):
    return train(init_model(ModelSpec((2, 8, 2), "tanh", 0)), blobs, TrainConfig(epochs=20))


def test_prune_zero_is_identity(protected):
    out, _ = prune(protected, 0.0)
    assert out.fingerprint_ref() == protected.fingerprint_ref()


def test_prune_half_of_ten_weights():
    m = linear_model(np.arange(1.0, 11.0).reshape(5, 2), b=[0.0, 0.0])
    out, masks = prune(m, 0.5)
    assert np.sum(out.weights[0] == 0) == 5
    assert sorted(np.abs(out.weights[0][out.weights[0] != 0])) == [6, 7, 8, 9, 10]


def test_prune_keeps_biases(protected):
    out, _ = prune(protected, 0.9)
    assert all(np.array_equal(a, b) for a, b in zip(out.biases, protected.biases))


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 0.99), st.integers(0, 100))
def test_prune_count_law(sparsity, seed):
    m = init_model(ModelSpec((3, 7, 4, 2), "relu", seed))
    masks = prune_masks(m, sparsity)
    zeros = sum(int(np.sum(k == 0)) for k in masks)
    assert zeros == int(np.ceil(round(sparsity * m.n_weights(), 9)))


def test_parameter_noise_scale(protected):
    noisy = add_parameter_noise(protected, 0.09, make_rng(0))
    for W, V in zip(protected.weights, noisy.weights):
        assert np.std(V - W) == pytest.approx(0.09 * W.std(), rel=0.5)


def test_signed_gradient_examples_increase_loss(protected, blobs):
    adv = signed_gradient_examples(protected, blobs, 0.3)
    assert np.allclose(np.abs(adv - blobs.inputs), 0.3)
    before = protected.logits(blobs.inputs)
    after = protected.logits(adv)
    idx = np.arange(len(blobs))
    assert np.mean(after[idx, blobs.labels] - after[idx, 1 - blobs.labels]) < np.mean(
        before[idx, blobs.labels] - before[idx, 1 - blobs.labels])


def test_distilled_student_agrees_with_teacher(blobs, protected):
    train_part, held = split(blobs, 0.7, seed=0)
    student = distill(protected, ModelSpec((2, 16, 2), "tanh", 3), train_part, TrainConfig(epochs=30), 2.0)
    agree = np.mean(student.predict(held.inputs) == protected.predict(held.inputs))
    assert agree >= 0.95


@pytest.mark.parametrize("spec", [
    AttackSpec("finetune", seed=1, train_cfg=FAST),
    AttackSpec("prune", seed=2, sparsity=0.3),
    AttackSpec("noise_finetune", seed=3, train_cfg=FAST),
    AttackSpec("prune_finetune", seed=4, sparsity=0.5, train_cfg=FAST),
    AttackSpec("distill", seed=5, student_spec=ModelSpec((2, 4, 2)), train_cfg=FAST),
    AttackSpec("adversarial_train", seed=6, train_cfg=FAST),
    AttackSpec("prune_distill", seed=7, sparsity=0.3, student_spec=ModelSpec((2, 4, 2)), train_cfg=FAST,
               kd_augment_copies=2, kd_jitter=0.5),
])
def test_attacks_are_deterministic_and_tagged(protected, blobs, spec):
    a = apply_attack(protected, blobs, spec, tag="pirated_surrogate")
    b = apply_attack(protected, blobs, spec, tag="pirated_surrogate")
    assert a.fingerprint_ref() == b.fingerprint_ref()
    assert a.tag == "pirated_surrogate"
    assert lineage_field(a.lineage, "attack") == spec.kind
    assert lineage_field(a.lineage, "seed", int) == spec.seed


def test_prune_finetune_keeps_mask(protected, blobs):
    out = apply_attack(protected, blobs, AttackSpec("prune_finetune", seed=0, sparsity=0.5, train_cfg=FAST))
    _, masks = prune(protected, 0.5)
    assert all(np.all(W[k == 0] == 0) for W, k in zip(out.weights, masks))


@pytest.mark.parametrize("bad", [
    dict(kind="melt"),
    dict(kind="prune"),
    dict(kind="finetune", sparsity=0.2),
    dict(kind="prune", sparsity=1.0),
    dict(kind="distill"),
    dict(kind="finetune", student_spec=ModelSpec((2, 2))),
])
def test_attack_spec_validation(bad):
    with pytest.raises(ConfigurationError):
        AttackSpec(**bad)


def test_pool_sizes(protected, blobs):
    specs = [AttackSpec("finetune", seed=10 + i, train_cfg=FAST) for i in range(3)] + [
        AttackSpec("prune", seed=13 + i, sparsity=s) for i, s in enumerate([0.2, 0.4, 0.6])]
    pirated = build_pool(protected, blobs, specs, "pirated_surrogate")
    assert len(pirated) == 6 and pirated.seed_range == (10, 15)
    indep = build_pool(protected, blobs, [(ModelSpec((2, h, 2), a, 100 + 3 * i + j), FAST)
                                          for i, (h, a) in enumerate([(8, "tanh"), (16, "relu")])
                                          for j in range(3)], "independent_surrogate")
    assert len(indep) == 6
    assert len({m.fingerprint_ref() for m in indep}) == 6
    assert all(m.tag == "independent_surrogate" for m in indep)


def test_overlapping_seed_ranges_rejected(protected, blobs):
    sur = build_pool(protected, blobs, [AttackSpec("prune", seed=s, sparsity=0.1) for s in (1, 5)],
                     "pirated_surrogate")
    with pytest.raises(ConfigurationError):
        build_pool(protected, blobs, [AttackSpec("prune", seed=3, sparsity=0.1)], "pirated_test", existing=[sur])
    test = build_pool(protected, blobs, [AttackSpec("prune", seed=3, sparsity=0.1)], "pirated_test")
    with pytest.raises(ConfigurationError):
        check_disjoint_seed_ranges([sur, test])
    # same split may share seeds
    check_disjoint_seed_ranges([sur, dataclasses.replace(sur, role="independent_surrogate")])


def test_pool_round_trip(tmp_path, protected, blobs):
    pool = build_pool(protected, blobs, [AttackSpec("prune", seed=s, sparsity=0.2) for s in (1, 2)],
                      "pirated_test")
    path = save_pool(pool, tmp_path)
    back = load_pool(path)
    assert back.role == "pirated_test"
    assert [m.fingerprint_ref() for m in back] == [m.fingerprint_ref() for m in pool]


def test_performance_report(protected, blobs):
    pool = ModelPool([prune(protected, 0.0)[0].copy(lineage="attack=prune;seed=1")], "pirated_test")
    base, rows = performance_report(protected, pool, blobs)
    assert base == accuracy(protected, blobs)
    assert rows[0]["preserved"]


def test_empty_pool_rejected():
    with pytest.raises(ConfigurationError):
        ModelPool([], "pirated_test")

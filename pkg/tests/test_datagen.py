import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from marginprint.datagen import Dataset, gen_blobs, gen_two_moons, load_csv, split, standardize, write_csv
from marginprint.errors import ConfigurationError, FormatVersionError, ParseError


def test_blobs_balanced():
    d = gen_blobs(100, [[-5, 0], [5, 0]], 0.5, seed=0)
    assert d.inputs.shape == (200, 2)
    assert np.bincount(d.labels).tolist() == [100, 100]


def test_blobs_tiny_spread():
    centers = np.array([[-5.0, 0.0], [5.0, 0.0]])
    d = gen_blobs(20, centers, 1e-9, seed=1)
    assert np.all(np.abs(d.inputs - centers[d.labels]) < 1e-6)


def test_generators_are_deterministic():
    assert np.array_equal(gen_blobs(10, [[0, 0], [1, 1]], 1.0, 5).inputs, gen_blobs(10, [[0, 0], [1, 1]], 1.0, 5).inputs)
    assert np.array_equal(gen_two_moons(10, 0.1, 5).inputs, gen_two_moons(10, 0.1, 5).inputs)


def test_blobs_need_two_centers():
    with pytest.raises(ConfigurationError):
        gen_blobs(10, [[0, 0]], 1.0, 0)


def test_noiseless_moons_on_unit_circle():
    d = gen_two_moons(50, 0.0, seed=0)
    upper = d.inputs[d.labels == 0]
    assert len(d) == 100
    np.testing.assert_allclose(np.hypot(upper[:, 0], upper[:, 1]), 1.0, atol=1e-15)
    assert np.all(upper[:, 1] >= 0)


def test_embedded_moons_preserve_geometry():
    flat = gen_two_moons(40, 0.0, seed=3)
    deep = gen_two_moons(40, 0.0, seed=3, ambient_dim=10)
    assert deep.dim == 10
    # orthonormal embedding keeps pairwise distances
    d_flat = np.linalg.norm(flat.inputs[:, None] - flat.inputs[None], axis=-1)
    d_deep = np.linalg.norm(deep.inputs[:, None] - deep.inputs[None], axis=-1)
    np.testing.assert_allclose(d_flat, d_deep, atol=1e-12)


def test_csv_example(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("1.0,2.0,0\n3.0,4.0,1\n")
    d = load_csv(p)
    assert len(d) == 2 and d.dim == 2 and d.n_classes >= 2


def test_csv_ragged_row(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("1.0,0\n1.0,2.0,1\n")
    with pytest.raises(ParseError) as info:
        load_csv(p)
    assert info.value.line == 2


@pytest.mark.parametrize("text,line", [("1.0,x,0\n", 1), ("1,0\n2,0.5\n", 2), ("1,0\n2,-1\n", 2)])
def test_csv_bad_cells(tmp_path, text, line):
    p = tmp_path / "a.csv"
    p.write_text(text)
    with pytest.raises(ParseError) as info:
        load_csv(p)
    assert info.value.line == line


def test_csv_round_trip(tmp_path):
    d = standardize(gen_two_moons(30, 0.1, seed=2, ambient_dim=4))
    write_csv(d, tmp_path / "d.csv", header=True)
    back = load_csv(tmp_path / "d.csv", has_header=True)
    assert np.array_equal(back.inputs, d.inputs)
    assert np.array_equal(back.labels, d.labels)
    assert np.array_equal(back.mean, d.mean) and back.n_classes == 2


def test_csv_sidecar_version(tmp_path):
    d = gen_two_moons(5, 0.1, seed=2)
    write_csv(d, tmp_path / "d.csv")
    (tmp_path / "d.meta.json").write_text('{"format_version": 7}')
    with pytest.raises(FormatVersionError):
        load_csv(tmp_path / "d.csv")


def test_split_sizes_and_determinism():
    d = gen_blobs(50, [[0, 0], [3, 3]], 1.0, 0)
    a, b = split(d, 0.8, seed=1)
    assert (len(a), len(b)) == (80, 20)
    a2, _ = split(d, 0.8, seed=1)
    assert np.array_equal(a.inputs, a2.inputs)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 60), st.floats(0.05, 0.95), st.integers(0, 1000))
def test_split_is_a_partition(n, fraction, seed):
    d = Dataset(np.arange(2 * n, dtype=float).reshape(n, 2), np.arange(n) % 2)
    if round(fraction * n) in (0, n):
        with pytest.raises(ConfigurationError):
            split(d, fraction, seed)
        return
    a, b = split(d, fraction, seed)
    rows = sorted(map(tuple, np.vstack([a.inputs, b.inputs])))
    assert rows == sorted(map(tuple, d.inputs))


def test_standardize_reuses_statistics():
    d = gen_blobs(30, [[0, 10], [4, -2]], 2.0, 0)
    a, b = split(d, 0.5, 0)
    a = standardize(a)
    np.testing.assert_allclose(a.inputs.mean(axis=0), 0, atol=1e-12)
    np.testing.assert_allclose(a.inputs.std(axis=0), 1, atol=1e-12)
    b2 = standardize(b, a.mean, a.std)
    np.testing.assert_allclose(b2.inputs, (b.inputs - a.mean) / a.std)


def test_dataset_validation():
    with pytest.raises(ConfigurationError):
        Dataset(np.zeros((3, 2)), [0, 1])
    with pytest.raises(ConfigurationError):
        Dataset(np.zeros((2, 2)), [0, 3], n_classes=2)

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from falldetect.tensor import (
    SeededRng,
    ShapeError,
    concat,
    ewise,
    flatten,
    map_activation,
    matmul,
    seeded_uniform,
    sigmoid,
)


def naive_matmul(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for q in range(k):
                s += a[i, q] * b[q, j]
            out[i, j] = s
    return out


def test_matmul_identity_and_scalar():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(matmul(np.eye(2), a), a)
    assert np.array_equal(matmul(a, np.eye(2)), a)
    assert matmul(np.array([[1.0, 2.0]]), np.array([[3.0], [4.0]])).tolist() == [[11.0]]


def test_matmul_matches_triple_loop(rng):
    a = rng.normal(size=(5, 7))
    b = rng.normal(size=(7, 3))
    np.testing.assert_allclose(matmul(a, b), naive_matmul(a, b), rtol=0, atol=1e-12)


def test_matmul_mismatch_names_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(np.zeros((2, 3)), np.zeros((2, 3)))


def test_ewise():
    assert ewise("mul", np.array([1.0, 2, 3]), np.array([0.0, 1, 2])).tolist() == [0, 2, 6]
    assert ewise("add", np.zeros((2, 2)), np.array([1.0, 2.0])).tolist() == [[1, 2], [1, 2]]
    x = np.arange(6.0).reshape(2, 3)
    assert not ewise("sub", x, x).any()
    with pytest.raises(ShapeError):
        ewise("add", np.zeros((2, 2)), np.zeros(3))
    with pytest.raises(ValueError):
        ewise("div", x, x)


def test_activations():
    assert map_activation("relu", np.array([-1.0, 0.0, 2.0])).tolist() == [0, 0, 2]
    assert map_activation("sigmoid", np.array(0.0)) == 0.5
    assert map_activation("tanh", np.array(0.0)) == 0.0


def test_sigmoid_stable_at_extremes():
    x = np.array([-1000.0, -50.0, 0.0, 50.0, 1000.0])
    with np.errstate(over="raise"):
        s = sigmoid(x)
    assert np.all(np.isfinite(s))
    assert s[0] == 0.0 and s[-1] == 1.0
    np.testing.assert_allclose(sigmoid(-x), 1 - s, atol=1e-15)


def test_flatten_row_major():
    x = np.array([[1, 2, 3], [4, 5, 6]])
    assert flatten(x).tolist() == [1, 2, 3, 4, 5, 6]
    assert flatten(np.zeros((32, 69))).shape == (2208,)
    v = np.array([3.0, 1.0])
    assert np.array_equal(flatten(v), v)


@given(st.lists(st.integers(1, 5), min_size=1, max_size=4))
def test_flatten_reshape_roundtrip(shape):
    x = np.random.default_rng(len(shape)).normal(size=shape)
    assert np.array_equal(flatten(x).reshape(shape), x)


def test_concat():
    assert concat([np.array([1]), np.array([2, 3])]).tolist() == [1, 2, 3]
    parts = [np.zeros(2208), np.zeros(1056), np.zeros(8960)]
    assert concat(parts).shape == (12224,)
    v = np.array([4.0, 5.0])
    assert np.array_equal(concat([v]), v)
    with pytest.raises(ValueError):
        concat([])


def test_seeded_uniform_contracts():
    a = seeded_uniform(3, 0.0, 1.0, SeededRng(42))
    b = seeded_uniform(3, 0.0, 1.0, SeededRng(42))
    assert np.array_equal(a, b)
    lo, hi = 1.0, 1.0 + 1e-9
    x = seeded_uniform(1000, lo, hi, SeededRng(1))
    assert np.all((x >= lo) & (x < hi))
    big = seeded_uniform(100_000, 0.0, 1.0, SeededRng(7))
    assert abs(big.mean() - 0.5) < 0.01
    with pytest.raises(ValueError):
        seeded_uniform(3, 1.0, 1.0, SeededRng(0))


def test_seeded_streams_reproducible_and_independent():
    a = SeededRng(99).uniform(0, 1, 10_000)
    b = SeededRng(99).uniform(0, 1, 10_000)
    assert np.array_equal(a, b)
    # drawing from one child must not shift another
    r1 = SeededRng(5)
    r1.child("shuffle").uniform(0, 1, 1000)
    init_a = r1.child("init").uniform(0, 1, 5)
    init_b = SeededRng(5).child("init").uniform(0, 1, 5)
    assert np.array_equal(init_a, init_b)
    assert not np.array_equal(SeededRng(5).child("init").uniform(0, 1, 5), SeededRng(5).child("shuffle").uniform(0, 1, 5))

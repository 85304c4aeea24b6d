import numpy as np
import pytest

from src.numerics import axpy, check_finite, dot, gram, matvec, norm2
from src.utils import DimensionError


def test_dot_examples():
    assert dot([1, 0], [0, 1]) == 0.
    assert dot([1, 2], [3, 4]) == 11.
    assert dot([3, 4], [3, 4]) == 25.


def test_dot_length_mismatch():
    with pytest.raises(DimensionError):
        dot([1, 2], [1, 2, 3])


@pytest.mark.parametrize('G, expected', [
    (np.eye(2), np.eye(2)),
    (np.array([[1., 1.], [0., 0.]]), np.ones((2, 2))),
    (np.array([[1., -1.], [0., 1.]]), np.array([[1., -1.], [-1., 2.]])),
])
def test_gram_examples(G, expected):
    np.testing.assert_array_equal(gram(G), expected)


def test_gram_empty():
    with pytest.raises(DimensionError):
        gram(np.zeros((0, 3)))


def test_gram_symmetric_and_psd(rng):
    for _ in range(100):
        d, m = int(rng.integers(1, 51)), int(rng.integers(1, 11))
        G = rng.standard_normal((d, m))
        K = gram(G)
        np.testing.assert_array_equal(K, K.T)
        a = rng.standard_normal(m)
        assert a @ K @ a >= -1e-10 * (a @ a) * np.trace(K)
        for i in range(m):
            np.testing.assert_allclose(matvec(K, np.eye(m)[i]), G.T @ G[:, i], rtol=1e-12, atol=1e-12)


def test_matvec_axpy_norm():
    x = np.array([1.5, -2.])
    np.testing.assert_array_equal(matvec(np.eye(2), x), x)
    np.testing.assert_array_equal(axpy(2., [1, 1], [0, 1]), [2., 3.])
    assert norm2([3, 4]) == 5.
    with pytest.raises(DimensionError):
        matvec(np.eye(3), x)
    with pytest.raises(DimensionError):
        axpy(1., [1, 2], [1, 2, 3])


def test_non_finite_rejected():
    with pytest.raises(DimensionError):
        check_finite(np.array([1., np.nan]), 'x')
    with pytest.raises(DimensionError):
        dot([np.inf, 0.], [1., 1.])

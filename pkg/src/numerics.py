"""Dense float64 linear algebra shared by the model, solver, consensus and sampler."""
import numpy as np

from src.utils import DimensionError



def check_finite(arr, name='array'):
    """Raise DimensionError if `arr` holds NaN or Inf."""
    arr = np.asarray(arr)
    if not np.all(np.isfinite(arr)):
        bad = int(np.size(arr) - np.count_nonzero(np.isfinite(arr)))
        raise DimensionError(f"{name}: {bad} non-finite entries")
    return arr


def as_vector(x, name='vector'):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionError(f"{name}: expected 1-d array, got shape {x.shape}")
    return check_finite(x, name)


def as_matrix(A, name='matrix'):
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2:
        raise DimensionError(f"{name}: expected 2-d array, got shape {A.shape}")
    return check_finite(A, name)


def dot(x, y):
    x = as_vector(x, 'x')
    y = as_vector(y, 'y')
    if x.size != y.size:
        raise DimensionError(f"dot: length mismatch {x.size} vs {y.size}")
    return float(x @ y)


def gram(G):
    """
    Gram matrix K = G^T G of the columns of G.

    Only the upper triangle is computed; the lower one is its mirror, so K is
    symmetric bit for bit.

    Args:
        G:      d x M matrix, column i is g_i

    Returns:
        K:      M x M matrix with K[i, j] = g_i . g_j
    """
    G = as_matrix(G, 'G')
    d, m = G.shape
    if d == 0 or m == 0:
        raise DimensionError(f"gram: empty matrix of shape {G.shape}")
    K = np.zeros((m, m))
    for idx in range(m):
        K[idx, idx:] = G[:, idx] @ G[:, idx:]
    upper = np.triu(K, 1)
    return np.triu(K) + upper.T


def matvec(A, x):
    A = as_matrix(A, 'A')
    x = as_vector(x, 'x')
    if A.shape[1] != x.size:
        raise DimensionError(f"matvec: {A.shape} matrix with length-{x.size} vector")
    return A @ x


def axpy(alpha, x, y):
    """alpha * x + y"""
    x = as_vector(x, 'x')
    y = as_vector(y, 'y')
    if x.size != y.size:
        raise DimensionError(f"axpy: length mismatch {x.size} vs {y.size}")
    return check_finite(float(alpha) * x + y, 'axpy')


def norm2(x):
    x = as_vector(x, 'x')
    return float(np.sqrt(x @ x))

"""Dense matrix helpers shared by every other module.

Matrices are plain numpy float64 arrays in C (row-major) order; row-major is
the single canonical layout, and the truncating reshape below is defined by
row-major enumeration.  Standard products, norms and averages delegate to
numpy; the rank oracle and the truncating reshape are written out here
because their exact semantics are part of the library's contract.
"""

from __future__ import annotations

import numpy as np

from .rng import Rng


def _check_finite(m: np.ndarray) -> np.ndarray:
    if not np.isfinite(m).all():
        raise ValueError("matrix contains non-finite entries")
    return m


def matrix(rows, dtype=np.float64) -> np.ndarray:
    """Coerce nested sequences to a C-ordered float64 matrix."""
    m = np.ascontiguousarray(rows, dtype=dtype)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got ndim={m.ndim}")
    return _check_finite(m)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return _check_finite(a @ b)


def transpose(m: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(m.T)


def kron(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Kronecker product: entry ((p*b.rows + i), (q*b.cols + j)) = a[p,q]*b[i,j]."""
    return _check_finite(np.kron(a, b))


def frobenius_norm(m: np.ndarray) -> float:
    return float(np.linalg.norm(m))


def add_scaled(a: np.ndarray, b: np.ndarray, alpha: float) -> np.ndarray:
    """a + alpha * b."""
    if a.shape != b.shape:
        raise ValueError(f"add_scaled shape mismatch: {a.shape} vs {b.shape}")
    return _check_finite(a + alpha * b)


def mean(mats: list[np.ndarray]) -> np.ndarray:
    """Elementwise arithmetic average; summation order is the list order."""
    if not mats:
        raise ValueError("mean of an empty list")
    shape = mats[0].shape
    for m in mats[1:]:
        if m.shape != shape:
            raise ValueError(f"mean shape mismatch: {m.shape} vs {shape}")
    return np.add.reduce(np.stack(mats), axis=0) / len(mats)


def rank(m: np.ndarray, tol: float) -> int:
    """Numerical rank: pivot count of Gaussian elimination with partial
    pivoting, where a pivot with |pivot| <= tol * max|entry of m| counts
    as zero."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    a = np.array(m, dtype=np.float64)
    scale = np.abs(a).max() if a.size else 0.0
    if scale == 0.0:
        return 0
    threshold = tol * scale
    rows, cols = a.shape
    r = 0
    for col in range(cols):
        if r == rows:
            break
        piv = r + int(np.argmax(np.abs(a[r:, col])))
        if abs(a[piv, col]) <= threshold:
            continue  # no usable pivot in this column
        if piv != r:
            a[[r, piv]] = a[[piv, r]]
        factors = a[r + 1:, col] / a[r, col]
        a[r + 1:, col:] -= np.outer(factors, a[r, col:])
        r += 1
    return r


def reshape_truncate(src: np.ndarray, m: int, n: int) -> np.ndarray:
    """First m*n entries of src in row-major order, reshaped to (m, n)."""
    if src.size < m * n:
        raise ValueError(
            f"reshape_truncate needs {m * n} entries, source has {src.size}"
        )
    return src.ravel(order="C")[: m * n].reshape(m, n).copy()


def fill_uniform(rows: int, cols: int, bound: float, rng: Rng) -> np.ndarray:
    """(rows, cols) matrix of i.i.d. uniforms on [-bound, bound]."""
    if bound < 0:
        raise ValueError("bound must be >= 0")
    u = rng.uniform_block(rows * cols)
    return ((2.0 * u - 1.0) * bound).reshape(rows, cols)

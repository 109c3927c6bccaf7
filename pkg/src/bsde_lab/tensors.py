"""Contraction rules for the multidimensional process conventions.

Shapes (trailing axes; any number of leading batch axes is allowed):
  - VecD  z: (n, d)      -- n entries, each a vector in R^d
  - MatD  A: (n, n, d)   -- n x n entries, each a vector in R^d
  - plain matrix: (n, n); plain vector: (n,)

The only multiplications used anywhere in the package are the three
contractions below plus ordinary matrix products of plain matrices.
"""

from __future__ import annotations

import numpy as np


def contract_az(a: np.ndarray, z: np.ndarray) -> np.ndarray:
    """(A z)_i = sum_j A[i, j] . z[j], an R^n vector.

    a: (..., n, n, d), z: (..., n, d) -> (..., n)
    """
    a = np.asarray(a, dtype=float)
    z = np.asarray(z, dtype=float)
    if a.shape[-1] != z.shape[-1] or a.shape[-2] != z.shape[-2]:
        raise ValueError(f"shape mismatch: A {a.shape}, z {z.shape}")
    return np.einsum("...ijd,...jd->...i", a, z)


def contract_adb(a: np.ndarray, db: np.ndarray) -> np.ndarray:
    """Plain matrix (A dB)_{ij} = A[i, j] . dB, used in dS = S (A dB).

    a: (..., n, n, d), db: (..., d) -> (..., n, n)
    """
    return np.einsum("...ijd,...d->...ij", np.asarray(a, float), np.asarray(db, float))


def mat_square(a: np.ndarray) -> np.ndarray:
    """R^d-contracted matrix square (A^2)_{ij} = sum_k A[i, k] . A[k, j].

    Appears in the drift of the inverse-exponential dynamics.
    a: (..., n, n, d) -> (..., n, n)
    """
    a = np.asarray(a, dtype=float)
    return np.einsum("...ikd,...kjd->...ij", a, a)


def operator_norm(m: np.ndarray) -> np.ndarray:
    """Largest singular value of each matrix in a batch.

    m: (..., n, n) -> (...).  n is small everywhere in this package, so the
    dense SVD is fine.
    """
    m = np.asarray(m, dtype=float)
    if m.shape[-1] == 1:
        return np.abs(m[..., 0, 0])
    return np.linalg.svd(m, compute_uv=False)[..., 0]


def frobenius(a: np.ndarray, trailing: int) -> np.ndarray:
    """Euclidean norm over the last `trailing` axes."""
    a = np.asarray(a, dtype=float)
    return np.sqrt((a * a).reshape(a.shape[: a.ndim - trailing] + (-1,)).sum(axis=-1))

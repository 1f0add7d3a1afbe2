"""Minimal dense real-matrix kernel shared by every other module.

All arithmetic is done in 64-bit floats regardless of how feature packs
store their tensors; the Gram solve is the numerically sensitive step
and benefits from the extra precision.  Matrices are plain 2-D
C-contiguous float64 numpy arrays; ``as_matrix`` is the single entry
point that enforces that convention on external input.

Explicit matrix inverses are deliberately absent: every expression of
the form (A + delta*I)^-1 B is computed with a Cholesky-based solve.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg

from .errors import NonFiniteInput, NotPositiveDefinite, ShapeMismatch, ZeroVector

# A Matrix is a 2-D float64 ndarray; the alias exists for signatures.
Matrix = np.ndarray

_SYMMETRY_RTOL = 1e-6
_ZERO_NORM_TOL = 1e-12


def as_matrix(data, name: str = "matrix") -> Matrix:
    """Validate external input and return it as a 2-D float64 array.

    Raises ShapeMismatch for non-2-D input and NonFiniteInput if any
    entry is NaN or Inf.
    """
    a = np.ascontiguousarray(data, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeMismatch(f"{name}: expected a 2-D array, got ndim={a.ndim}")
    if not np.isfinite(a).all():
        raise NonFiniteInput(f"{name}: contains NaN or Inf entries")
    return a


def as_vector(data, name: str = "vector") -> np.ndarray:
    """Validate external input and return it as a 1-D float64 array."""
    v = np.ascontiguousarray(data, dtype=np.float64)
    if v.ndim != 1:
        raise ShapeMismatch(f"{name}: expected a 1-D array, got ndim={v.ndim}")
    if not np.isfinite(v).all():
        raise NonFiniteInput(f"{name}: contains NaN or Inf entries")
    return v


def spd_solve(a: Matrix, b: Matrix) -> Matrix:
    """Solve a @ x = b for symmetric positive definite ``a``.

    ``a`` must be n-by-n and symmetric to within a relative tolerance of
    1e-6; ``b`` must have n rows.  Uses a Cholesky factorization, never
    an explicit inverse.  Raises NotPositiveDefinite when the
    factorization hits a non-positive pivot.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] < 1:
        raise ShapeMismatch(f"spd_solve: 'a' must be square n>=1, got {a.shape}")
    rhs = b if b.ndim == 2 else b.reshape(-1, 1)
    if rhs.shape[0] != a.shape[0]:
        raise ShapeMismatch(
            f"spd_solve: rhs has {rhs.shape[0]} rows, expected {a.shape[0]}"
        )
    scale = np.abs(a).max()
    if scale > 0.0 and np.abs(a - a.T).max() > _SYMMETRY_RTOL * scale:
        raise ShapeMismatch("spd_solve: 'a' is not symmetric within tolerance")
    try:
        factor = scipy.linalg.cho_factor(a, lower=True, check_finite=False)
    except scipy.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from exc
    x = scipy.linalg.cho_solve(factor, rhs, check_finite=False)
    return x if b.ndim == 2 else x.ravel()


def cosine_sim(u, v) -> float:
    """Cosine of the angle between two vectors, in [-1, 1].

    Raises ZeroVector when either norm is below 1e-12.
    """
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise ShapeMismatch(f"cosine_sim: shapes {u.shape} vs {v.shape}")
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu < _ZERO_NORM_TOL or nv < _ZERO_NORM_TOL:
        raise ZeroVector("cosine_sim: vector norm below 1e-12")
    return float(np.dot(u, v) / (nu * nv))


def frobenius_sq(a) -> float:
    """Sum of squared entries (squared Frobenius norm)."""
    a = np.asarray(a, dtype=np.float64)
    return float(np.sum(a * a))

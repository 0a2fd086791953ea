"""Operations on 3x3 symmetric positive definite matrices.

Tensors are plain float64 ``numpy`` arrays of shape (3, 3); directions are
unit-norm arrays of shape (3,). The six unique entries of a tensor are
ordered (a11, a22, a33, a12, a13, a23) wherever a flat layout is needed
(design matrices, CSV files).
"""

import numpy as np

from . import _kernels
from .errors import InvalidDof, NotPositiveDefinite

__all__ = [
    "cholesky",
    "eigh3",
    "principal_eigenvector",
    "sample_wishart",
    "wishart_logpdf",
    "is_spd",
    "pack",
    "unpack",
    "as_unit_vector",
]

PACK_ORDER = ((0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2))


def _as_matrix(m, name="matrix"):
    a = np.asarray(m, dtype=np.float64)
    if a.shape != (3, 3):
        raise ValueError(f"{name} must have shape (3, 3), got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} has non-finite entries")
    return a


def cholesky(matrix):
    """Lower Cholesky factor L with L @ L.T equal to the input.

    The input must be symmetric with finite entries; only the lower
    triangle is read. Pivots are accepted when they exceed 1e-14 times the
    trace, which separates genuine PD failures from roundoff.

    Raises
    ------
    NotPositiveDefinite
        If any pivot falls below the tolerance.
    """
    a = _as_matrix(matrix)
    out = np.empty((3, 3))
    if not _kernels.chol3(a, out):
        raise NotPositiveDefinite("matrix is not positive definite")
    return out


def is_spd(matrix):
    """True when the (symmetric) input passes the Cholesky PD check."""
    a = np.asarray(matrix, dtype=np.float64)
    if a.shape != (3, 3) or not np.all(np.isfinite(a)):
        return False
    return bool(_kernels.chol3(a, np.empty((3, 3))))


def eigh3(matrix):
    """Eigenvalues (ascending) and eigenvector columns via cyclic Jacobi.

    Deterministic for symmetric inputs; robust near degenerate spectra.
    """
    a = _as_matrix(matrix)
    return _kernels.eigh3_jacobi(a)


def principal_eigenvector(matrix, with_flag=False):
    """Unit eigenvector of the largest eigenvalue.

    The sign is canonicalized so the component of largest magnitude is
    positive; downstream angle computations use acute angles, so the
    convention never affects results.

    Parameters
    ----------
    matrix : array_like, shape (3, 3)
        Symmetric tensor (positive definite in normal use).
    with_flag : bool
        When True, also return a degeneracy flag that is set when the top
        two eigenvalues are within 1e-9 (relative), i.e. the direction is
        ill-defined.
    """
    a = _as_matrix(matrix)
    vec, degenerate = _kernels.principal_axis3(a)
    if with_flag:
        return vec, bool(degenerate)
    return vec


def sample_wishart(mean, dof, rng):
    """Draw a 3x3 Wishart matrix with expectation ``mean``.

    The distribution is parameterized by its mean: the classical scale
    matrix is mean/dof. Sampling uses the Bartlett decomposition with
    gamma-distributed squared diagonals, so non-integer dof are supported.

    Parameters
    ----------
    mean : array_like, shape (3, 3)
        SPD expectation of the draw.
    dof : float
        Degrees of freedom, must exceed 2.
    rng : numpy.random.Generator
        Source of randomness; consumed in a fixed order.
    """
    if dof <= 2.0:
        raise InvalidDof(f"degrees of freedom must exceed 2, got {dof}")
    v = _as_matrix(mean, "mean")
    out = np.empty((3, 3))
    if not _kernels.wishart_sample3(rng, v, float(dof), out):
        raise NotPositiveDefinite("mean matrix is not positive definite")
    return out


def wishart_logpdf(x, mean, dof):
    """Log density of the mean-parameterized 3x3 Wishart at ``x``.

    Density: |X|^((k-p-1)/2) exp(-tr((V/k)^-1 X)/2)
             / (2^(kp/2) |V/k|^(k/2) Gamma_p(k/2)),   p = 3,
    where V is the mean and k the dof. The trivariate gamma function is
    evaluated as a sum of ordinary log-gamma terms.
    """
    if dof <= 2.0:
        raise InvalidDof(f"degrees of freedom must exceed 2, got {dof}")
    xa = _as_matrix(x, "x")
    va = _as_matrix(mean, "mean")
    val = _kernels.wishart_logpdf3(xa, va, float(dof))
    if np.isnan(val):
        raise NotPositiveDefinite("x and mean must both be positive definite")
    return float(val)


def pack(matrix):
    """Six unique entries of a symmetric matrix as (a11, a22, a33, a12, a13, a23)."""
    a = np.asarray(matrix, dtype=np.float64)
    return np.array([a[i, j] for i, j in PACK_ORDER])


def unpack(entries):
    """Symmetric (3, 3) matrix from its six unique entries."""
    e = np.asarray(entries, dtype=np.float64)
    if e.shape != (6,):
        raise ValueError(f"expected 6 entries, got shape {e.shape}")
    a = np.empty((3, 3))
    for (i, j), val in zip(PACK_ORDER, e):
        a[i, j] = val
        a[j, i] = val
    return a


def as_unit_vector(v, tol=1e-12, name="vector"):
    """Validate and return a finite unit-norm 3-vector."""
    a = np.asarray(v, dtype=np.float64)
    if a.shape != (3,):
        raise ValueError(f"{name} must have shape (3,), got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} has non-finite entries")
    nrm = float(np.linalg.norm(a))
    if abs(nrm - 1.0) > tol:
        raise ValueError(f"{name} must be unit norm, |v| = {nrm!r}")
    return a

"""Non-spatial least-squares tensor estimation (baseline and warm start).

Fits each voxel independently by minimizing

    sum_m (log S_mv - log S0_v + b * g_m' A g_m)^2

over symmetric A. The residual sign follows the observation model (the
mean is log S0 - b g'Ag). The minimizer is exact and may be indefinite;
``project_to_pd`` clamps its spectrum for consumers that need an SPD
matrix.
"""

import numpy as np

from . import spd
from .errors import RankDeficientDesign
from .signals import quadratic_features

__all__ = [
    "design_matrix",
    "fit_least_squares",
    "fit_all",
    "project_to_pd",
]


def design_matrix(gradients, b=1.0):
    """(M, 6) matrix mapping packed tensors to -mean-shift: rows -b * features."""
    return -b * quadratic_features(gradients)


def fit_least_squares(v, dataset):
    """Exact least-squares symmetric tensor for voxel v.

    Solved by SVD-backed ``lstsq`` (rank revealing) rather than explicit
    normal-equation inverses.

    Raises
    ------
    RankDeficientDesign
        When the gradient design has rank below 6.
    """
    proto = dataset.protocol
    x = design_matrix(proto.gradients, proto.b)
    y = dataset.log_signals[:, v] - proto.log_s0[v]
    coef, _, rank, _ = np.linalg.lstsq(x, y, rcond=None)
    if rank < 6:
        raise RankDeficientDesign(
            f"gradient design rank {rank} < 6; tensor not identifiable"
        )
    return spd.unpack(coef)


def fit_all(dataset):
    """Least-squares tensors for every voxel, shape (n, 3, 3)."""
    proto = dataset.protocol
    x = design_matrix(proto.gradients, proto.b)
    y = dataset.log_signals - proto.log_s0[np.newaxis, :]
    coefs, _, rank, _ = np.linalg.lstsq(x, y, rcond=None)
    if rank < 6:
        raise RankDeficientDesign(
            f"gradient design rank {rank} < 6; tensor not identifiable"
        )
    n = dataset.dims.n
    out = np.empty((n, 3, 3))
    for v in range(n):
        out[v] = spd.unpack(coefs[:, v])
    return out


def project_to_pd(matrix, floor=None):
    """Clamp the spectrum of a symmetric matrix from below.

    Eigenvalues below ``floor`` are raised to it; the default floor is
    1e-4 * max(lambda_max, 1). The result always passes the Cholesky PD
    check, and inputs whose spectrum already clears the floor are
    returned unchanged up to reassembly roundoff.
    """
    a = np.asarray(matrix, dtype=np.float64)
    w, vecs = spd.eigh3(a)
    if floor is None:
        floor = 1e-4 * max(w[2], 1.0)
    w = np.maximum(w, floor)
    return (vecs * w) @ vecs.T

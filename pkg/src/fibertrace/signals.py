"""Forward signal model, Gaussian log-likelihood, and synthetic phantoms.

The observation model on the log scale is

    log S_mv = log S0_v - b * g_m' A_v g_m + eps_mv,   eps ~ N(0, sigma^2),

with fixed acquisition design (gradients g_m, scale b, baseline log S0).
Phantoms place fibers along circular arcs anchored at the bottom corners
of the grid; fiber voxels emit the rank-one signal
log S0 - b (g' m_v)^2 with m_v tangent to the arc, background voxels emit
an isotropic-tensor signal. Noise is added i.i.d. on the log scale.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .grid import GridDims, voxel_coords

__all__ = [
    "AcquisitionProtocol",
    "DwiDataset",
    "Arc",
    "PhantomConfig",
    "PhantomTruth",
    "default_gradients",
    "default_protocol",
    "noiseless_log_signal",
    "voxel_log_likelihood",
    "quadratic_features",
    "simulate_phantom",
    "arc_tangent",
]

_GOLDEN = (1.0 + math.sqrt(5.0)) / 2.0


@dataclass(frozen=True)
class AcquisitionProtocol:
    """Fixed acquisition design: gradient directions, scale, baselines.

    gradients has shape (M, 3) with unit rows; log_s0 has one entry per
    voxel. M >= 6 is required for a six-parameter tensor to be
    identifiable.
    """

    gradients: np.ndarray
    b: float
    log_s0: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.gradients, dtype=np.float64)
        if g.ndim != 2 or g.shape[1] != 3:
            raise ValueError(f"gradients must have shape (M, 3), got {g.shape}")
        if g.shape[0] < 6:
            raise ValueError(f"need at least 6 gradients, got {g.shape[0]}")
        norms = np.linalg.norm(g, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ValueError("all gradients must be unit norm")
        if self.b <= 0:
            raise ValueError(f"b must be positive, got {self.b}")
        object.__setattr__(self, "gradients", g)
        object.__setattr__(
            self, "log_s0", np.asarray(self.log_s0, dtype=np.float64).ravel()
        )

    @property
    def n_measurements(self):
        return self.gradients.shape[0]


@dataclass
class DwiDataset:
    """Observed log signals with their acquisition design.

    log_signals has shape (M, n): one row per measurement, one column per
    voxel (row-major voxel ids).
    """

    dims: GridDims
    protocol: AcquisitionProtocol
    log_signals: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.log_signals, dtype=np.float64)
        m = self.protocol.n_measurements
        if s.shape != (m, self.dims.n):
            raise ValueError(
                f"log_signals must have shape ({m}, {self.dims.n}), got {s.shape}"
            )
        if not np.all(np.isfinite(s)):
            raise ValueError("log_signals has non-finite entries")
        if self.protocol.log_s0.shape != (self.dims.n,):
            raise ValueError("protocol.log_s0 length must equal the voxel count")
        self.log_signals = s


@dataclass(frozen=True)
class Arc:
    """Circular fiber arc in the x-y plane, spanning all z slices.

    A voxel belongs to the arc when the in-plane distance from its center
    to ``center`` falls within radius +- halfwidth.
    """

    center: tuple
    radius: float
    halfwidth: float

    def __post_init__(self):
        if len(self.center) != 2:
            raise ConfigError("arc center must be an (x, y) pair")
        if self.radius <= 0 or self.halfwidth <= 0:
            raise ConfigError("arc radius and halfwidth must be positive")


def _default_arcs():
    # anchored at the right/left bottom corners of the default 8x7 footprint
    return (
        Arc(center=(8.0, 0.0), radius=4.4, halfwidth=0.5),
        Arc(center=(0.0, 0.0), radius=2.4, halfwidth=0.5),
    )


@dataclass(frozen=True)
class PhantomConfig:
    """Geometry and tensor constants of the synthetic phantom.

    The defaults reconstruct the published example layout: an 8x7x2 grid
    with two arcs anchored at the bottom corners. ``fiber_eigenvalues``
    (lambda1, lambda2) define the PD representative tensor
    (l1 - l2) m m' + l2 I stored in the truth; ``iso_diffusivity`` scales
    the isotropic background tensor.
    """

    dims: GridDims = field(default_factory=lambda: GridDims(8, 7, 2))
    arcs: tuple = field(default_factory=_default_arcs)
    iso_diffusivity: float = 0.75
    fiber_eigenvalues: tuple = (2.0, 0.5)

    def __post_init__(self):
        if not isinstance(self.dims, GridDims):
            object.__setattr__(self, "dims", GridDims(*self.dims))
        object.__setattr__(
            self, "arcs", tuple(a if isinstance(a, Arc) else Arc(**a) for a in self.arcs)
        )
        if not self.arcs:
            raise ConfigError("phantom needs at least one arc")
        l1, l2 = self.fiber_eigenvalues
        if not (l1 > l2 > 0):
            raise ConfigError("fiber eigenvalues must satisfy lambda1 > lambda2 > 0")
        if self.iso_diffusivity <= 0:
            raise ConfigError("iso_diffusivity must be positive")


@dataclass
class PhantomTruth:
    """Ground truth of a simulated phantom.

    directions holds unit tangents for fiber voxels and NaN rows for
    background; labels holds the arc index per voxel (-1 for background);
    tensors holds the PD representative tensor field (None when the truth
    was loaded from CSV, which stores directions only).
    """

    dims: GridDims
    directions: np.ndarray
    labels: np.ndarray
    tensors: np.ndarray = None

    @property
    def fiber_mask(self):
        return self.labels >= 0

    @property
    def n_fiber_voxels(self):
        return int(np.count_nonzero(self.fiber_mask))


def default_gradients(m=15):
    """Deterministic low-discrepancy gradient set on the upper hemisphere.

    Fibonacci-lattice points: well spread, reproducible, and generic
    enough that the 6-column quadratic design has full rank for m >= 6.
    """
    if m < 6:
        raise ValueError(f"need at least 6 gradients, got {m}")
    idx = np.arange(m, dtype=np.float64)
    z = (idx + 0.5) / m
    phi = 2.0 * math.pi * idx / _GOLDEN
    r = np.sqrt(1.0 - z * z)
    g = np.column_stack([r * np.cos(phi), r * np.sin(phi), z])
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def default_protocol(dims, b=1.0, log_s0=0.0, n_gradients=15):
    """Protocol with the default gradient set and a constant baseline."""
    if not isinstance(dims, GridDims):
        dims = GridDims(*dims)
    return AcquisitionProtocol(
        gradients=default_gradients(n_gradients),
        b=b,
        log_s0=np.full(dims.n, float(log_s0)),
    )


def quadratic_features(gradients):
    """Per-gradient features f with f . a6 = g' A g for packed tensors.

    Columns: g1^2, g2^2, g3^2, 2 g1 g2, 2 g1 g3, 2 g2 g3.
    """
    g = np.asarray(gradients, dtype=np.float64)
    return np.column_stack([
        g[:, 0] ** 2,
        g[:, 1] ** 2,
        g[:, 2] ** 2,
        2.0 * g[:, 0] * g[:, 1],
        2.0 * g[:, 0] * g[:, 2],
        2.0 * g[:, 1] * g[:, 2],
    ])


def noiseless_log_signal(tensor, gradient, b, log_s0):
    """Mean log signal: log_s0 - b * g' A g."""
    g = np.asarray(gradient, dtype=np.float64)
    a = np.asarray(tensor, dtype=np.float64)
    return float(log_s0 - b * (g @ a @ g))


def voxel_log_likelihood(tensor, v, dataset, sigma2):
    """Gaussian log likelihood of voxel v's measurements under ``tensor``."""
    if sigma2 <= 0:
        raise ValueError(f"sigma2 must be positive, got {sigma2}")
    proto = dataset.protocol
    g = proto.gradients
    quad = np.einsum("mi,ij,mj->m", g, np.asarray(tensor, dtype=np.float64), g)
    mean = proto.log_s0[v] - proto.b * quad
    resid = dataset.log_signals[:, v] - mean
    m = proto.n_measurements
    return float(
        -0.5 * m * math.log(2.0 * math.pi * sigma2)
        - 0.5 * np.dot(resid, resid) / sigma2
    )


def arc_tangent(center, point):
    """Unit tangent (in-plane) of the circle around ``center`` at ``point``."""
    rx = point[0] - center[0]
    ry = point[1] - center[1]
    nrm = math.hypot(rx, ry)
    if nrm == 0.0:
        raise ConfigError("tangent undefined at the arc center")
    return np.array([-ry / nrm, rx / nrm, 0.0])


def _build_truth(config):
    dims = config.dims
    n = dims.n
    directions = np.full((n, 3), np.nan)
    labels = np.full(n, -1, dtype=np.int64)
    l1, l2 = config.fiber_eigenvalues
    tensors = np.empty((n, 3, 3))
    eye = np.eye(3)
    for v in range(n):
        x, y, _ = voxel_coords(v, dims)
        cx, cy = x + 0.5, y + 0.5
        for a_idx, arc in enumerate(config.arcs):
            d = math.hypot(cx - arc.center[0], cy - arc.center[1])
            if abs(d - arc.radius) <= arc.halfwidth:
                tangent = arc_tangent(arc.center, (cx, cy))
                directions[v] = tangent
                labels[v] = a_idx
                tensors[v] = (l1 - l2) * np.outer(tangent, tangent) + l2 * eye
                break
        else:
            tensors[v] = config.iso_diffusivity * eye

    counts = np.bincount(labels[labels >= 0], minlength=len(config.arcs))
    for a_idx, c in enumerate(counts):
        if c == 0:
            raise ConfigError(
                f"arc {a_idx} selects no voxels: it lies outside the grid"
            )
    return PhantomTruth(dims, directions, labels, tensors)


def simulate_phantom(config, protocol, tau, rng):
    """Simulate a phantom dataset and its ground truth.

    Fiber voxels emit log_s0 - b (g' m_v)^2 (tangent directions); background
    voxels emit the isotropic-tensor signal. With tau > 0, N(0, tau^2) noise
    is added independently per measurement and voxel.

    Returns (DwiDataset, PhantomTruth).
    """
    if tau < 0:
        raise ConfigError(f"tau must be nonnegative, got {tau}")
    truth = _build_truth(config)
    dims = config.dims
    n = dims.n
    g = protocol.gradients
    m = protocol.n_measurements
    if protocol.log_s0.shape != (n,):
        raise ConfigError("protocol baseline length does not match the grid")

    noiseless = np.empty((m, n))
    for v in range(n):
        if truth.labels[v] >= 0:
            proj = g @ truth.directions[v]
            noiseless[:, v] = protocol.log_s0[v] - protocol.b * proj * proj
        else:
            noiseless[:, v] = protocol.log_s0[v] - protocol.b * config.iso_diffusivity

    if tau > 0:
        signals = noiseless + tau * rng.standard_normal((m, n))
    else:
        signals = noiseless.copy()
    return DwiDataset(dims, protocol, signals), truth

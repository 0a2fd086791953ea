"""Voxel-hopping fiber tracking with angle thresholds, over posterior draws.

From each seed, tracking expands to every Moore-neighborhood voxel whose
two angles both fall strictly below the threshold C:

* delta: acute angle between the two voxels' tensor directions;
* theta: acute angle between the source direction and the between-voxel
  displacement direction.

Movement follows branch semantics: a directed edge (u, v) is traversed
when some branch can reach u from a seed through qualifying edges without
having visited v. Branches never revisit voxels, so traversal terminates.
A tract is the canonical (lexicographically sorted) set of traversed
directed edges; identical tracts across posterior draws are grouped into
patterns with frequency-based probabilities.
"""

import math
from collections import deque
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from ._kernels import principal_axes_batch
from .errors import ConfigError, SeedOutOfBounds
from .grid import GridDims, neighbors_tracking, voxel_coords

__all__ = [
    "TrackConfig",
    "FiberPattern",
    "SweepResult",
    "angle_delta",
    "angle_theta",
    "direction_field",
    "fact_track",
    "probabilistic_track",
    "sensitivity_sweep",
    "SWEEP_START",
    "SWEEP_STEP",
    "SWEEP_COUNT",
]

# threshold grid of the sensitivity analysis: C = 18 + 0.01 s, s = 0..1000
SWEEP_START = 18.0
SWEEP_STEP = 0.01
SWEEP_COUNT = 1001


@dataclass(frozen=True)
class TrackConfig:
    """Seed voxels and the shared angle threshold (degrees)."""

    seeds: tuple
    threshold_deg: float

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not self.seeds:
            raise ConfigError("at least one seed voxel is required")
        if not 0.0 < self.threshold_deg < 90.0:
            raise ConfigError(
                f"threshold must lie in (0, 90) degrees, got {self.threshold_deg}"
            )


@dataclass(frozen=True)
class FiberPattern:
    """One distinct tract with its posterior frequency."""

    edges: tuple
    count: int
    probability: float
    seeds: tuple

    @property
    def voxels(self):
        vox = set(self.seeds)
        for u, v in self.edges:
            vox.add(u)
            vox.add(v)
        return tuple(sorted(vox))


def _acute_angle_deg(dot, acute=True):
    c = abs(dot) if acute else dot
    c = min(1.0, max(-1.0, c))
    return math.degrees(math.acos(c))


def angle_delta(m_u, m_v, acute=True):
    """Angle in degrees between two tensor directions.

    Acute by default (eigenvector signs are arbitrary); pass acute=False
    for the raw angle in fidelity experiments.
    """
    return _acute_angle_deg(float(np.dot(m_u, m_v)), acute)


def angle_theta(m_u, l_uv, acute=True):
    """Angle in degrees between a tensor direction and a between-voxel direction."""
    return _acute_angle_deg(float(np.dot(m_u, l_uv)), acute)


def direction_field(tensors):
    """Principal eigenvector per voxel for a (n, 3, 3) tensor stack."""
    t = np.ascontiguousarray(tensors, dtype=np.float64)
    return principal_axes_batch(t)


@lru_cache(maxsize=32)
def _edge_table(dims_key):
    """Directed Moore edges of the grid: (src, dst, unit displacement)."""
    dims = GridDims(*dims_key)
    src = []
    dst = []
    disp = []
    for u in range(dims.n):
        ux, uy, uz = voxel_coords(u, dims)
        for v in neighbors_tracking(u, dims):
            vx, vy, vz = voxel_coords(int(v), dims)
            d = np.array([vx - ux, vy - uy, vz - uz], dtype=np.float64)
            src.append(u)
            dst.append(int(v))
            disp.append(d / np.linalg.norm(d))
    return (
        np.array(src, dtype=np.int64),
        np.array(dst, dtype=np.int64),
        np.vstack(disp),
    )


def _edge_criteria(field, dims, acute=True):
    """Per directed edge, max of the two qualifying angles (degrees)."""
    src, dst, disp = _edge_table((dims.nx, dims.ny, dims.nz))
    m_src = field[src]
    m_dst = field[dst]
    cos_theta = np.einsum("ij,ij->i", m_src, disp)
    cos_delta = np.einsum("ij,ij->i", m_src, m_dst)
    if acute:
        cos_theta = np.abs(cos_theta)
        cos_delta = np.abs(cos_delta)
    theta = np.degrees(np.arccos(np.clip(cos_theta, -1.0, 1.0)))
    delta = np.degrees(np.arccos(np.clip(cos_delta, -1.0, 1.0)))
    return src, dst, np.maximum(theta, delta)


def _reachable(adj, seeds, banned, n):
    """Voxels reachable from the seeds along qualifying edges, avoiding one."""
    seen = np.zeros(n, dtype=bool)
    queue = deque()
    for s in seeds:
        if s != banned and not seen[s]:
            seen[s] = True
            queue.append(s)
    while queue:
        u = queue.popleft()
        for v in adj.get(u, ()):
            if v != banned and not seen[v]:
                seen[v] = True
                queue.append(v)
    return seen


def _traversed_edges(qual_src, qual_dst, seeds, n):
    """Edges a branch-based traversal visits, given the qualifying edges."""
    adj = {}
    for u, v in zip(qual_src, qual_dst):
        adj.setdefault(int(u), []).append(int(v))
    reach = _reachable(adj, seeds, -1, n)
    targets = {}
    for u, v in zip(qual_src, qual_dst):
        if reach[u]:
            targets.setdefault(int(v), []).append(int(u))
    edges = []
    for v, sources in targets.items():
        reach_wo_v = _reachable(adj, seeds, v, n)
        for u in sources:
            if reach_wo_v[u]:
                edges.append((u, v))
    edges.sort()
    return tuple(edges)


def _check_seeds(seeds, dims):
    for s in seeds:
        if not 0 <= s < dims.n:
            raise SeedOutOfBounds(f"seed voxel {s} outside grid of {dims.n} voxels")


def fact_track(field, config, graph, acute=True):
    """Track one direction field; returns the canonical traversed edge set.

    Pure in (field, config); an empty tuple means no neighbor qualified at
    any seed.
    """
    dims = graph.dims
    _check_seeds(config.seeds, dims)
    field = np.asarray(field, dtype=np.float64)
    if field.shape != (dims.n, 3):
        raise ValueError(f"field must have shape ({dims.n}, 3), got {field.shape}")
    src, dst, crit = _edge_criteria(field, dims, acute)
    mask = crit < config.threshold_deg
    return _traversed_edges(src[mask], dst[mask], config.seeds, dims.n)


def probabilistic_track(draws, config, graph, acute=True):
    """Group per-draw tracts into distinct patterns with probabilities T_k/T.

    Runs tracking on the principal-eigenvector field of every retained
    draw; identical edge sets form one pattern. Patterns are sorted by
    descending probability (ties broken lexicographically by edge set).
    """
    dims = graph.dims
    _check_seeds(config.seeds, dims)
    counts = {}
    for t in range(draws.n_draws):
        field = direction_field(draws.tensors[t])
        edges = fact_track(field, config, graph, acute)
        counts[edges] = counts.get(edges, 0) + 1
    total = draws.n_draws
    ranked = sorted(counts.items(), key=lambda item: (-item[1], item[0]))
    return [
        FiberPattern(edges=e, count=c, probability=c / total, seeds=config.seeds)
        for e, c in ranked
    ]


@dataclass
class SweepResult:
    """Pattern probabilities across the threshold grid.

    ``probabilities[i, k]`` is the probability of pattern k at
    ``thresholds[i]``; pattern ids index ``pattern_edges`` and are matched
    across thresholds by edge-set identity.
    """

    thresholds: np.ndarray
    pattern_edges: list
    probabilities: np.ndarray
    seeds: tuple

    @property
    def n_patterns(self):
        return len(self.pattern_edges)


def sensitivity_sweep(draws, seeds, graph, acute=True):
    """Pattern probabilities on the grid C = 18 + 0.01 s, s = 0..1000.

    Per draw, the tract is a piecewise-constant function of C that can
    only change where an edge's qualifying angle sits inside the sweep
    window, so tracking is recomputed per draw only at those breakpoints.
    """
    dims = graph.dims
    seeds = tuple(int(s) for s in seeds)
    _check_seeds(seeds, dims)
    thresholds = SWEEP_START + SWEEP_STEP * np.arange(SWEEP_COUNT)
    t_total = draws.n_draws

    pattern_ids = {}
    pattern_edges = []
    counts = np.zeros((SWEEP_COUNT, 0), dtype=np.int64)

    tract_cache = {}
    for t in range(t_total):
        field = direction_field(draws.tensors[t])
        src, dst, crit = _edge_criteria(field, dims, acute)
        lo, hi = thresholds[0], thresholds[-1]
        # an edge with angle x flips from excluded to included as C crosses x
        # (strict inequality), so only x in [lo, hi) can change any tract
        breaks = np.unique(crit[(crit >= lo) & (crit < hi)])
        # interval index per threshold; same interval -> same tract
        interval = np.searchsorted(breaks, thresholds, side="left")
        interval_tracts = {}
        for idx in np.unique(interval):
            c_rep = thresholds[np.argmax(interval == idx)]
            mask = crit < c_rep
            key = (dims, seeds, tuple(np.flatnonzero(mask)))
            tract = tract_cache.get(key)
            if tract is None:
                tract = _traversed_edges(src[mask], dst[mask], seeds, dims.n)
                tract_cache[key] = tract
            interval_tracts[idx] = tract
        for i in range(SWEEP_COUNT):
            tract = interval_tracts[interval[i]]
            pid = pattern_ids.get(tract)
            if pid is None:
                pid = len(pattern_edges)
                pattern_ids[tract] = pid
                pattern_edges.append(tract)
                counts = np.pad(counts, ((0, 0), (0, 1)))
            counts[i, pid] += 1

    # rank pattern ids by overall prevalence (ties: lexicographic edges)
    totals = counts.sum(axis=0)
    new_order = sorted(
        range(len(pattern_edges)), key=lambda k: (-totals[k], pattern_edges[k])
    )
    return SweepResult(
        thresholds=thresholds,
        pattern_edges=[pattern_edges[k] for k in new_order],
        probabilities=counts[:, new_order] / t_total,
        seeds=seeds,
    )

"""Voxel grid indexing, the model DAG, and tracking neighborhoods.

Two different neighborhood systems are used deliberately:

* the *model* graph connects face-adjacent voxels (4 in 2-D, 6 in 3-D) and
  is oriented into a DAG by voxel rank;
* the *tracking* neighborhood is the full Moore neighborhood (8 in 2-D,
  26 in 3-D), so diagonal between-voxel directions are reachable.

Voxel ids are 0-based row-major linear indices (x fastest, then y, then z).
Ranks are 1-based in documentation and exports.
"""

import csv
from dataclasses import dataclass

import numpy as np

__all__ = [
    "GridDims",
    "VoxelGraph",
    "build_dag",
    "neighbors_tracking",
    "face_neighbors",
    "linear_index",
    "voxel_coords",
    "save_edge_list",
]


@dataclass(frozen=True)
class GridDims:
    """Extent of the voxel grid; nz = 1 for 2-D images."""

    nx: int
    ny: int
    nz: int = 1

    def __post_init__(self):
        for name in ("nx", "ny", "nz"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")

    @property
    def n(self):
        return self.nx * self.ny * self.nz


def linear_index(x, y, z, dims):
    """0-based row-major voxel id (x fastest)."""
    return x + dims.nx * (y + dims.ny * z)


def voxel_coords(v, dims):
    """(x, y, z) integer coordinates of voxel id v."""
    x = v % dims.nx
    y = (v // dims.nx) % dims.ny
    z = v // (dims.nx * dims.ny)
    return x, y, z


@dataclass
class VoxelGraph:
    """Directed acyclic model graph plus its transpose (children) index.

    ``rank`` is the 1-based hierarchical coordinate order (z slowest, then
    y, then x); every edge points from lower to higher rank, which makes
    the graph acyclic by construction. Parents and children are stored in
    CSR form (indptr/indices) with indices ascending per voxel.
    """

    dims: GridDims
    rank: np.ndarray
    parent_indptr: np.ndarray
    parent_indices: np.ndarray
    child_indptr: np.ndarray
    child_indices: np.ndarray

    def parents(self, v):
        """Voxel ids in N(v): face-adjacent voxels of smaller rank."""
        return self.parent_indices[self.parent_indptr[v]:self.parent_indptr[v + 1]]

    def children(self, v):
        """Voxels u with v in N(u)."""
        return self.child_indices[self.child_indptr[v]:self.child_indptr[v + 1]]

    def n_parents(self, v):
        return int(self.parent_indptr[v + 1] - self.parent_indptr[v])

    @property
    def n_edges(self):
        return int(self.parent_indices.shape[0])

    def edges(self):
        """All directed edges as (src, dst) pairs, dst-major order."""
        out = []
        for v in range(self.dims.n):
            for u in self.parents(v):
                out.append((int(u), v))
        return out


def build_dag(dims):
    """Construct the model DAG for a grid.

    Voxels are ranked by their coordinates taken hierarchically (z, then y,
    then x); with row-major ids this makes rank(v) = v + 1. Each undirected
    face-adjacency edge is oriented from the smaller-rank voxel to the
    larger, so parents of v are its -x/-y/-z face neighbors and the
    rank-1 voxel has an empty parent set.
    """
    if not isinstance(dims, GridDims):
        dims = GridDims(*dims)
    n = dims.n
    rank = np.arange(1, n + 1, dtype=np.int64)

    parent_indptr = np.zeros(n + 1, dtype=np.int64)
    parent_lists = []
    for v in range(n):
        x, y, z = voxel_coords(v, dims)
        pars = []
        if z > 0:
            pars.append(linear_index(x, y, z - 1, dims))
        if y > 0:
            pars.append(linear_index(x, y - 1, z, dims))
        if x > 0:
            pars.append(linear_index(x - 1, y, z, dims))
        pars.sort()
        parent_lists.append(pars)
        parent_indptr[v + 1] = parent_indptr[v] + len(pars)
    parent_indices = np.fromiter(
        (u for pars in parent_lists for u in pars),
        dtype=np.int64,
        count=parent_indptr[-1],
    )

    child_counts = np.zeros(n, dtype=np.int64)
    for pars in parent_lists:
        for u in pars:
            child_counts[u] += 1
    child_indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(child_counts, out=child_indptr[1:])
    child_indices = np.empty(parent_indices.shape[0], dtype=np.int64)
    cursor = child_indptr[:-1].copy()
    for v in range(n):
        for u in parent_lists[v]:
            child_indices[cursor[u]] = v
            cursor[u] += 1
    # children of u are appended in ascending v, so each slice is sorted

    for arr in (rank, parent_indptr, parent_indices, child_indptr, child_indices):
        arr.setflags(write=False)
    return VoxelGraph(dims, rank, parent_indptr, parent_indices,
                      child_indptr, child_indices)


def face_neighbors(v, dims):
    """Face-adjacent voxel ids (the model adjacency), ascending."""
    x, y, z = voxel_coords(v, dims)
    out = []
    for dx, dy, dz in ((-1, 0, 0), (1, 0, 0), (0, -1, 0),
                       (0, 1, 0), (0, 0, -1), (0, 0, 1)):
        xx, yy, zz = x + dx, y + dy, z + dz
        if 0 <= xx < dims.nx and 0 <= yy < dims.ny and 0 <= zz < dims.nz:
            out.append(linear_index(xx, yy, zz, dims))
    out.sort()
    return np.array(out, dtype=np.int64)


def neighbors_tracking(v, dims):
    """Moore neighborhood of v (8 in 2-D, 26 in 3-D), clipped at borders."""
    x, y, z = voxel_coords(v, dims)
    out = []
    for dz in (-1, 0, 1):
        zz = z + dz
        if not 0 <= zz < dims.nz:
            continue
        for dy in (-1, 0, 1):
            yy = y + dy
            if not 0 <= yy < dims.ny:
                continue
            for dx in (-1, 0, 1):
                if dx == 0 and dy == 0 and dz == 0:
                    continue
                xx = x + dx
                if 0 <= xx < dims.nx:
                    out.append(linear_index(xx, yy, zz, dims))
    out.sort()
    return np.array(out, dtype=np.int64)


def save_edge_list(graph, path):
    """Write the DAG as an edge-list CSV with columns (src, dst)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["src", "dst"])
        for v in range(graph.dims.n):
            for u in graph.parents(v):
                writer.writerow([int(u), v])

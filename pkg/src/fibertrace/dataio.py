"""CSV schemas and run manifests for the file-based pipeline.

All files are UTF-8 CSV with a header row; floats are written with
``repr`` so values round-trip bit-exactly. Datasets live in a directory
as ``protocol.csv`` (m, gx, gy, gz, b), ``signals.csv``
(voxel_x, voxel_y, voxel_z, m, log_signal, log_s0) and optionally
``truth.csv`` (voxel_x, voxel_y, voxel_z, mx, my, mz; fiber voxels only).
Measurement indices and voxel coordinates are 0-based.
"""

import csv
import json
import os
import tempfile

import numpy as np

from . import __version__
from .errors import SchemaError
from .grid import GridDims, linear_index, voxel_coords
from .sampler import PosteriorDraws
from .signals import AcquisitionProtocol, DwiDataset, PhantomTruth

__all__ = [
    "save_dataset",
    "load_dataset",
    "save_truth",
    "load_truth",
    "save_draws",
    "load_draws",
    "save_estimates",
    "load_estimates",
    "save_patterns",
    "save_sensitivity",
    "save_study",
    "save_quiver",
    "write_manifest",
    "read_manifest",
]

TENSOR_COLS = ("a11", "a22", "a33", "a12", "a13", "a23")
_PACK = ((0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2))


def _fmt(x):
    return repr(float(x))


def _open_reader(path, expected_header):
    if not os.path.exists(path):
        raise SchemaError(f"{os.path.basename(path)}: file not found at {path}")
    fh = open(path, newline="", encoding="utf-8")
    reader = csv.reader(fh)
    header = next(reader, None)
    if header != list(expected_header):
        fh.close()
        raise SchemaError(
            f"{os.path.basename(path)}: header {header} != {list(expected_header)}"
        )
    return fh, reader


def _parse_float(value, path, row_no, col):
    try:
        return float(value)
    except ValueError:
        raise SchemaError(
            f"{os.path.basename(path)}: row {row_no}, column {col!r}: "
            f"not a number: {value!r}"
        ) from None


def _parse_int(value, path, row_no, col):
    try:
        return int(value)
    except ValueError:
        raise SchemaError(
            f"{os.path.basename(path)}: row {row_no}, column {col!r}: "
            f"not an integer: {value!r}"
        ) from None


# ---------------------------------------------------------------- datasets

def save_dataset(dataset, out_dir, truth=None):
    """Write protocol.csv and signals.csv (plus truth.csv when given)."""
    os.makedirs(out_dir, exist_ok=True)
    proto = dataset.protocol
    with open(os.path.join(out_dir, "protocol.csv"), "w", newline="",
              encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["m", "gx", "gy", "gz", "b"])
        for m in range(proto.n_measurements):
            g = proto.gradients[m]
            w.writerow([m, _fmt(g[0]), _fmt(g[1]), _fmt(g[2]), _fmt(proto.b)])

    dims = dataset.dims
    with open(os.path.join(out_dir, "signals.csv"), "w", newline="",
              encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["voxel_x", "voxel_y", "voxel_z", "m", "log_signal", "log_s0"])
        for v in range(dims.n):
            x, y, z = voxel_coords(v, dims)
            for m in range(proto.n_measurements):
                w.writerow([x, y, z, m,
                            _fmt(dataset.log_signals[m, v]),
                            _fmt(proto.log_s0[v])])
    if truth is not None:
        save_truth(truth, out_dir)


def load_dataset(in_dir):
    """Read a dataset directory back into a DwiDataset."""
    proto_path = os.path.join(in_dir, "protocol.csv")
    fh, reader = _open_reader(proto_path, ["m", "gx", "gy", "gz", "b"])
    rows = {}
    b_values = set()
    with fh:
        for row_no, row in enumerate(reader, start=2):
            if len(row) != 5:
                raise SchemaError(
                    f"protocol.csv: row {row_no}: expected 5 columns, got {len(row)}"
                )
            m = _parse_int(row[0], proto_path, row_no, "m")
            if m in rows:
                raise SchemaError(f"protocol.csv: duplicate measurement row m={m}")
            g = [_parse_float(row[i], proto_path, row_no, c)
                 for i, c in ((1, "gx"), (2, "gy"), (3, "gz"))]
            rows[m] = g
            b_values.add(_parse_float(row[4], proto_path, row_no, "b"))
    if not rows:
        raise SchemaError("protocol.csv: no measurement rows")
    n_meas = max(rows) + 1
    for m in range(n_meas):
        if m not in rows:
            raise SchemaError(f"protocol.csv: missing measurement row m={m}")
    if len(b_values) != 1:
        raise SchemaError(f"protocol.csv: b must be constant, found {sorted(b_values)}")
    gradients = np.array([rows[m] for m in range(n_meas)])

    sig_path = os.path.join(in_dir, "signals.csv")
    fh, reader = _open_reader(
        sig_path, ["voxel_x", "voxel_y", "voxel_z", "m", "log_signal", "log_s0"]
    )
    entries = {}
    log_s0_map = {}
    max_x = max_y = max_z = 0
    with fh:
        for row_no, row in enumerate(reader, start=2):
            if len(row) != 6:
                raise SchemaError(
                    f"signals.csv: row {row_no}: expected 6 columns, got {len(row)}"
                )
            x = _parse_int(row[0], sig_path, row_no, "voxel_x")
            y = _parse_int(row[1], sig_path, row_no, "voxel_y")
            z = _parse_int(row[2], sig_path, row_no, "voxel_z")
            m = _parse_int(row[3], sig_path, row_no, "m")
            if min(x, y, z) < 0:
                raise SchemaError(f"signals.csv: row {row_no}: negative coordinate")
            if not 0 <= m < n_meas:
                raise SchemaError(
                    f"signals.csv: row {row_no}: m={m} outside protocol range"
                )
            val = _parse_float(row[4], sig_path, row_no, "log_signal")
            s0 = _parse_float(row[5], sig_path, row_no, "log_s0")
            key = (x, y, z, m)
            if key in entries:
                raise SchemaError(
                    f"signals.csv: duplicate row for voxel ({x},{y},{z}), m={m}"
                )
            entries[key] = val
            prev = log_s0_map.get((x, y, z))
            if prev is not None and prev != s0:
                raise SchemaError(
                    f"signals.csv: inconsistent log_s0 for voxel ({x},{y},{z})"
                )
            log_s0_map[(x, y, z)] = s0
            max_x, max_y, max_z = max(max_x, x), max(max_y, y), max(max_z, z)

    dims = GridDims(max_x + 1, max_y + 1, max_z + 1)
    signals = np.empty((n_meas, dims.n))
    log_s0 = np.empty(dims.n)
    for v in range(dims.n):
        x, y, z = voxel_coords(v, dims)
        if (x, y, z) not in log_s0_map:
            raise SchemaError(f"signals.csv: missing voxel ({x},{y},{z})")
        log_s0[v] = log_s0_map[(x, y, z)]
        for m in range(n_meas):
            val = entries.get((x, y, z, m))
            if val is None:
                raise SchemaError(
                    f"signals.csv: missing row for voxel ({x},{y},{z}), m={m}"
                )
            signals[m, v] = val

    try:
        protocol = AcquisitionProtocol(gradients=gradients, b=b_values.pop(),
                                       log_s0=log_s0)
        return DwiDataset(dims, protocol, signals)
    except ValueError as exc:
        raise SchemaError(f"dataset in {in_dir}: {exc}") from exc


def save_truth(truth, out_dir):
    """Write truth.csv: one row per fiber voxel with its unit direction."""
    os.makedirs(out_dir, exist_ok=True)
    dims = truth.dims
    with open(os.path.join(out_dir, "truth.csv"), "w", newline="",
              encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["voxel_x", "voxel_y", "voxel_z", "mx", "my", "mz"])
        for v in range(dims.n):
            if truth.labels[v] < 0:
                continue
            x, y, z = voxel_coords(v, dims)
            d = truth.directions[v]
            w.writerow([x, y, z, _fmt(d[0]), _fmt(d[1]), _fmt(d[2])])


def load_truth(in_dir, dims):
    """Read truth.csv if present; labels are presence-based (0 or -1)."""
    path = os.path.join(in_dir, "truth.csv")
    if not os.path.exists(path):
        return None
    fh, reader = _open_reader(
        path, ["voxel_x", "voxel_y", "voxel_z", "mx", "my", "mz"]
    )
    directions = np.full((dims.n, 3), np.nan)
    labels = np.full(dims.n, -1, dtype=np.int64)
    with fh:
        for row_no, row in enumerate(reader, start=2):
            if len(row) != 6:
                raise SchemaError(
                    f"truth.csv: row {row_no}: expected 6 columns, got {len(row)}"
                )
            x = _parse_int(row[0], path, row_no, "voxel_x")
            y = _parse_int(row[1], path, row_no, "voxel_y")
            z = _parse_int(row[2], path, row_no, "voxel_z")
            if not (0 <= x < dims.nx and 0 <= y < dims.ny and 0 <= z < dims.nz):
                raise SchemaError(f"truth.csv: row {row_no}: voxel outside grid")
            v = linear_index(x, y, z, dims)
            vec = np.array([_parse_float(row[i], path, row_no, c)
                            for i, c in ((3, "mx"), (4, "my"), (5, "mz"))])
            nrm = np.linalg.norm(vec)
            if abs(nrm - 1.0) > 1e-6:
                raise SchemaError(f"truth.csv: row {row_no}: direction not unit norm")
            directions[v] = vec
            labels[v] = 0
    return PhantomTruth(dims, directions, labels, tensors=None)


# ------------------------------------------------------------------- draws

def _write_tensor_rows(writer, dims, tensors, prefix=()):
    for v in range(dims.n):
        x, y, z = voxel_coords(v, dims)
        a = tensors[v]
        writer.writerow(list(prefix) + [x, y, z]
                        + [_fmt(a[i, j]) for i, j in _PACK])


def save_draws(draws, out_dir):
    """Write draws_tensors.csv, draws_scalars.csv and acceptance.csv."""
    os.makedirs(out_dir, exist_ok=True)
    dims = draws.dims
    with open(os.path.join(out_dir, "draws_tensors.csv"), "w", newline="",
              encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "voxel_x", "voxel_y", "voxel_z", *TENSOR_COLS])
        for t in range(draws.n_draws):
            _write_tensor_rows(w, dims, draws.tensors[t], prefix=(t,))
    with open(os.path.join(out_dir, "draws_scalars.csv"), "w", newline="",
              encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "sigma2", "k"])
        for t in range(draws.n_draws):
            w.writerow([t, _fmt(draws.sigma2[t]), _fmt(draws.k[t])])
    with open(os.path.join(out_dir, "acceptance.csv"), "w", newline="",
              encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["voxel_x", "voxel_y", "voxel_z", "accept_rate"])
        for v in range(dims.n):
            x, y, z = voxel_coords(v, dims)
            w.writerow([x, y, z, _fmt(draws.accept_rate[v])])


def load_draws(in_dir):
    """Read a draws directory back into a PosteriorDraws (config-less)."""
    path = os.path.join(in_dir, "draws_tensors.csv")
    fh, reader = _open_reader(
        path, ["t", "voxel_x", "voxel_y", "voxel_z", *TENSOR_COLS]
    )
    records = {}
    max_t = max_x = max_y = max_z = 0
    with fh:
        for row_no, row in enumerate(reader, start=2):
            if len(row) != 10:
                raise SchemaError(
                    f"draws_tensors.csv: row {row_no}: expected 10 columns"
                )
            t = _parse_int(row[0], path, row_no, "t")
            x = _parse_int(row[1], path, row_no, "voxel_x")
            y = _parse_int(row[2], path, row_no, "voxel_y")
            z = _parse_int(row[3], path, row_no, "voxel_z")
            vals = [_parse_float(row[4 + i], path, row_no, TENSOR_COLS[i])
                    for i in range(6)]
            records[(t, x, y, z)] = vals
            max_t = max(max_t, t)
            max_x, max_y, max_z = max(max_x, x), max(max_y, y), max(max_z, z)
    dims = GridDims(max_x + 1, max_y + 1, max_z + 1)
    n_draws = max_t + 1
    tensors = np.empty((n_draws, dims.n, 3, 3))
    for t in range(n_draws):
        for v in range(dims.n):
            x, y, z = voxel_coords(v, dims)
            vals = records.get((t, x, y, z))
            if vals is None:
                raise SchemaError(
                    f"draws_tensors.csv: missing row t={t}, voxel ({x},{y},{z})"
                )
            for c, (i, j) in enumerate(_PACK):
                tensors[t, v, i, j] = vals[c]
                tensors[t, v, j, i] = vals[c]

    spath = os.path.join(in_dir, "draws_scalars.csv")
    fh, reader = _open_reader(spath, ["t", "sigma2", "k"])
    sigma2 = np.full(n_draws, np.nan)
    kvals = np.full(n_draws, np.nan)
    with fh:
        for row_no, row in enumerate(reader, start=2):
            t = _parse_int(row[0], spath, row_no, "t")
            if not 0 <= t < n_draws:
                raise SchemaError(f"draws_scalars.csv: row {row_no}: t={t} out of range")
            sigma2[t] = _parse_float(row[1], spath, row_no, "sigma2")
            kvals[t] = _parse_float(row[2], spath, row_no, "k")
    if np.any(np.isnan(sigma2)):
        raise SchemaError("draws_scalars.csv: missing draws")

    apath = os.path.join(in_dir, "acceptance.csv")
    accept = np.full(dims.n, np.nan)
    if os.path.exists(apath):
        fh, reader = _open_reader(
            apath, ["voxel_x", "voxel_y", "voxel_z", "accept_rate"]
        )
        with fh:
            for row_no, row in enumerate(reader, start=2):
                x = _parse_int(row[0], apath, row_no, "voxel_x")
                y = _parse_int(row[1], apath, row_no, "voxel_y")
                z = _parse_int(row[2], apath, row_no, "voxel_z")
                accept[linear_index(x, y, z, dims)] = _parse_float(
                    row[3], apath, row_no, "accept_rate"
                )
    return PosteriorDraws(
        dims=dims, tensors=tensors, sigma2=sigma2, k=kvals,
        accept_rate=accept, accept_rate_k=float("nan"),
        q_final=float("nan"), config=None,
    )


# --------------------------------------------------------------- estimates

def save_estimates(tensors, dims, path):
    """Write per-voxel tensor estimates (draws_tensors layout minus t)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["voxel_x", "voxel_y", "voxel_z", *TENSOR_COLS])
        _write_tensor_rows(w, dims, tensors)


def load_estimates(path):
    """Read an estimates CSV; returns (tensors (n, 3, 3), dims)."""
    fh, reader = _open_reader(path, ["voxel_x", "voxel_y", "voxel_z", *TENSOR_COLS])
    records = {}
    max_x = max_y = max_z = 0
    with fh:
        for row_no, row in enumerate(reader, start=2):
            x = _parse_int(row[0], path, row_no, "voxel_x")
            y = _parse_int(row[1], path, row_no, "voxel_y")
            z = _parse_int(row[2], path, row_no, "voxel_z")
            vals = [_parse_float(row[3 + i], path, row_no, TENSOR_COLS[i])
                    for i in range(6)]
            records[(x, y, z)] = vals
            max_x, max_y, max_z = max(max_x, x), max(max_y, y), max(max_z, z)
    dims = GridDims(max_x + 1, max_y + 1, max_z + 1)
    tensors = np.empty((dims.n, 3, 3))
    for v in range(dims.n):
        x, y, z = voxel_coords(v, dims)
        vals = records.get((x, y, z))
        if vals is None:
            raise SchemaError(f"{os.path.basename(path)}: missing voxel ({x},{y},{z})")
        for c, (i, j) in enumerate(_PACK):
            tensors[v, i, j] = vals[c]
            tensors[v, j, i] = vals[c]
    return tensors, dims


# ---------------------------------------------------- tracking and studies

def save_patterns(patterns, dims, out_dir):
    """Write patterns.csv (id, probability, count) and pattern_edges.csv."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "patterns.csv"), "w", newline="",
              encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["pattern_id", "probability", "count"])
        for pid, pat in enumerate(patterns):
            w.writerow([pid, _fmt(pat.probability), pat.count])
    with open(os.path.join(out_dir, "pattern_edges.csv"), "w", newline="",
              encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["pattern_id", "src_x", "src_y", "src_z",
                    "dst_x", "dst_y", "dst_z"])
        for pid, pat in enumerate(patterns):
            for u, v in pat.edges:
                ux, uy, uz = voxel_coords(u, dims)
                vx, vy, vz = voxel_coords(v, dims)
                w.writerow([pid, ux, uy, uz, vx, vy, vz])


def save_sensitivity(sweep, path):
    """Write sensitivity.csv rows (C, pattern_id, probability).

    Emits one row per pattern with nonzero probability at each threshold;
    every threshold contributes at least one row.
    """
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["C", "pattern_id", "probability"])
        for i, c in enumerate(sweep.thresholds):
            for pid in range(sweep.n_patterns):
                p = sweep.probabilities[i, pid]
                if p > 0.0:
                    w.writerow([_fmt(c), pid, _fmt(p)])


def save_study(result, path):
    """Write the study report CSV, one row per (method, tau, metric) cell."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "tau", "metric", "mean", "stderr", "replications"])
        for method, tau, metric, mean, se, reps in result.rows():
            se_txt = "" if (se != se) else _fmt(se)  # NaN -> empty: undefined
            w.writerow([method, _fmt(tau), metric, _fmt(mean), se_txt, reps])


def save_quiver(draws, path):
    """Write per-draw in-plane principal directions for external plotting."""
    from .tracking import direction_field

    dims = draws.dims
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["voxel_x", "voxel_y", "voxel_z", "t", "mx", "my"])
        for t in range(draws.n_draws):
            field = direction_field(draws.tensors[t])
            for v in range(dims.n):
                x, y, z = voxel_coords(v, dims)
                w.writerow([x, y, z, t, _fmt(field[v, 0]), _fmt(field[v, 1])])


# ---------------------------------------------------------------- manifest

def write_manifest(out_dir, command, seed, config, inputs, outputs,
                   wall_time_s):
    """Atomically write manifest.json next to a command's outputs."""
    payload = {
        "tool": "fibertrace",
        "version": __version__,
        "command": command,
        "seed": seed,
        "config": config,
        "inputs": inputs,
        "outputs": sorted(outputs),
        "wall_time_s": wall_time_s,
    }
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "manifest.json")
    fd, tmp = tempfile.mkstemp(dir=out_dir, suffix=".manifest.tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)
    return path


def read_manifest(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)

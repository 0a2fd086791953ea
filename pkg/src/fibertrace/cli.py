"""Command-line pipeline: simulate, fit-ls, sample, track, sweep, evaluate.

Each command reads CSV inputs, writes CSV outputs plus a ``manifest.json``
recording the command, resolved configuration, master seed and file lists;
re-running a command with the same inputs and seed reproduces its outputs
bit-exactly. Configuration files are JSON.

Exit codes: 0 success, 2 configuration errors, 3 file-schema errors,
4 numerical failures.
"""

import argparse
import json
import os
import sys
import time

import numpy as np

from . import dataio
from .errors import (
    ConfigError,
    InvalidDof,
    NotPositiveDefinite,
    RankDeficientDesign,
    SchemaError,
    SeedOutOfBounds,
)
from .evaluate import StudyConfig, run_simulation_study
from .grid import GridDims, build_dag, linear_index
from .leastsq import fit_all
from .sampler import SamplerConfig, posterior_mean, run_chain, _PRESETS
from .signals import (
    Arc,
    PhantomConfig,
    default_protocol,
    simulate_phantom,
)
from .tracking import TrackConfig, probabilistic_track, sensitivity_sweep

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SCHEMA = 3
EXIT_NUMERIC = 4

_GEOMETRY_KEYS = {"dims", "arcs", "iso_diffusivity", "fiber_eigenvalues"}
_PHANTOM_KEYS = _GEOMETRY_KEYS | {"tau", "b", "log_s0", "n_gradients"}
_SAMPLER_KEYS = {
    "preset", "burn_in", "retained", "thin", "target_accept", "scan",
    "tune_batch", "tune_gain", "q_init", "k_init", "k_step",
}
_STUDY_KEYS = {"replications", "noise_levels", "sampler", "phantom", "workers"}


def _load_json(path, what):
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"{what} config not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{what} config is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"{what} config must be a JSON object")
    return cfg


def _check_keys(cfg, allowed, what):
    unknown = set(cfg) - allowed
    if unknown:
        raise ConfigError(f"{what} config: unknown key(s) {sorted(unknown)}")


def _phantom_geometry(cfg, what):
    _check_keys(cfg, _GEOMETRY_KEYS, what)
    kwargs = {}
    if "dims" in cfg:
        try:
            kwargs["dims"] = GridDims(*cfg["dims"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"dims: {exc}") from None
    if "arcs" in cfg:
        arcs = []
        for i, a in enumerate(cfg["arcs"]):
            try:
                arcs.append(Arc(center=tuple(a["center"]),
                                radius=a["radius"], halfwidth=a["halfwidth"]))
            except (KeyError, TypeError) as exc:
                raise ConfigError(f"arcs[{i}]: {exc}") from None
        kwargs["arcs"] = tuple(arcs)
    if "iso_diffusivity" in cfg:
        kwargs["iso_diffusivity"] = cfg["iso_diffusivity"]
    if "fiber_eigenvalues" in cfg:
        kwargs["fiber_eigenvalues"] = tuple(cfg["fiber_eigenvalues"])
    try:
        return PhantomConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def _phantom_from_config(cfg):
    _check_keys(cfg, _PHANTOM_KEYS, "simulate")
    geometry = {k: v for k, v in cfg.items() if k in _GEOMETRY_KEYS}
    phantom = _phantom_geometry(geometry, "simulate")
    tau = cfg.get("tau", 0.1)
    proto_kwargs = dict(
        b=cfg.get("b", 1.0),
        log_s0=cfg.get("log_s0", 0.0),
        n_gradients=cfg.get("n_gradients", 15),
    )
    return phantom, tau, proto_kwargs


def _sampler_from_config(cfg, seed):
    _check_keys(cfg, _SAMPLER_KEYS, "sampler")
    base = dict(_PRESETS.get(cfg.get("preset", "desk")))
    if cfg.get("preset", "desk") not in _PRESETS:
        raise ConfigError(
            f"unknown sampler preset {cfg['preset']!r}; "
            f"choose from {sorted(_PRESETS)}"
        )
    base.update({k: v for k, v in cfg.items() if k != "preset"})
    try:
        return SamplerConfig(seed=seed, **base)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def _parse_seeds(text, dims):
    seeds = []
    for i, part in enumerate(text.split(";")):
        part = part.strip()
        if not part:
            continue
        coords = part.split(",")
        if len(coords) != 3:
            raise ConfigError(f"seed #{i}: expected x,y,z, got {part!r}")
        try:
            x, y, z = (int(c) for c in coords)
        except ValueError:
            raise ConfigError(f"seed #{i}: non-integer coordinate in {part!r}") from None
        if not (0 <= x < dims.nx and 0 <= y < dims.ny and 0 <= z < dims.nz):
            raise SeedOutOfBounds(
                f"seed ({x},{y},{z}) outside grid {dims.nx}x{dims.ny}x{dims.nz}"
            )
        seeds.append(linear_index(x, y, z, dims))
    if not seeds:
        raise ConfigError("no seed voxels given")
    return seeds


def cmd_simulate(args):
    t0 = time.monotonic()
    cfg = _load_json(args.config, "simulate")
    phantom, tau, proto_kwargs = _phantom_from_config(cfg)
    rng = np.random.default_rng(args.seed)
    protocol = default_protocol(phantom.dims, **proto_kwargs)
    data, truth = simulate_phantom(phantom, protocol, tau, rng)
    dataio.save_dataset(data, args.out, truth=truth)
    snapshot = {
        "dims": [phantom.dims.nx, phantom.dims.ny, phantom.dims.nz],
        "tau": tau,
        "arcs": [{"center": list(a.center), "radius": a.radius,
                  "halfwidth": a.halfwidth} for a in phantom.arcs],
        "iso_diffusivity": phantom.iso_diffusivity,
        "fiber_eigenvalues": list(phantom.fiber_eigenvalues),
        **proto_kwargs,
    }
    dataio.write_manifest(
        args.out, "simulate", args.seed, snapshot,
        inputs={"config": args.config},
        outputs=["protocol.csv", "signals.csv", "truth.csv"],
        wall_time_s=time.monotonic() - t0,
    )
    print(f"simulate: wrote {phantom.dims.n} voxels, "
          f"M={protocol.n_measurements}, tau={tau} -> {args.out}")
    return EXIT_OK


def cmd_fit_ls(args):
    t0 = time.monotonic()
    data = dataio.load_dataset(args.data)
    tensors = fit_all(data)
    os.makedirs(args.out, exist_ok=True)
    dataio.save_estimates(tensors, data.dims, os.path.join(args.out, "estimates.csv"))
    dataio.write_manifest(
        args.out, "fit-ls", args.seed, {},
        inputs={"data": args.data},
        outputs=["estimates.csv"],
        wall_time_s=time.monotonic() - t0,
    )
    print(f"fit-ls: estimated {data.dims.n} tensors -> {args.out}")
    return EXIT_OK


def cmd_sample(args):
    t0 = time.monotonic()
    data = dataio.load_dataset(args.data)
    config = _sampler_from_config(_load_json(args.config, "sampler"), args.seed)
    graph = build_dag(data.dims)
    draws = run_chain(data, graph, config)
    dataio.save_draws(draws, args.out)
    snapshot = {
        "burn_in": config.burn_in, "retained": config.retained,
        "thin": config.thin, "target_accept": config.target_accept,
        "scan": config.scan, "tune_batch": config.tune_batch,
        "tune_gain": config.tune_gain, "q_init": config.q_init,
        "k_init": config.k_init, "k_step": config.k_step,
    }
    dataio.write_manifest(
        args.out, "sample", args.seed, snapshot,
        inputs={"data": args.data, "config": args.config},
        outputs=["draws_tensors.csv", "draws_scalars.csv", "acceptance.csv"],
        wall_time_s=time.monotonic() - t0,
    )
    mean_rate = float(draws.accept_rate.mean())
    print(f"sample: {draws.n_draws} retained draws, "
          f"mean site acceptance {mean_rate:.3f} -> {args.out}")
    return EXIT_OK


def cmd_track(args):
    t0 = time.monotonic()
    if args.sweep == (args.threshold is not None):
        raise ConfigError("give exactly one of --threshold or --sweep")
    draws = dataio.load_draws(args.draws)
    graph = build_dag(draws.dims)
    seeds = _parse_seeds(args.seeds, draws.dims)
    os.makedirs(args.out, exist_ok=True)
    outputs = []
    if args.sweep:
        sweep = sensitivity_sweep(draws, seeds, graph)
        dataio.save_sensitivity(sweep, os.path.join(args.out, "sensitivity.csv"))
        outputs.append("sensitivity.csv")
        summary = f"{sweep.n_patterns} pattern(s) over {len(sweep.thresholds)} thresholds"
    else:
        config = TrackConfig(seeds=tuple(seeds), threshold_deg=args.threshold)
        patterns = probabilistic_track(draws, config, graph)
        dataio.save_patterns(patterns, draws.dims, args.out)
        outputs.extend(["patterns.csv", "pattern_edges.csv"])
        summary = f"{len(patterns)} pattern(s) at C={args.threshold}"
    if args.quiver:
        dataio.save_quiver(draws, os.path.join(args.out, "quiver.csv"))
        outputs.append("quiver.csv")
    dataio.write_manifest(
        args.out, "track", args.seed,
        {"seeds": args.seeds, "threshold": args.threshold, "sweep": args.sweep,
         "quiver": args.quiver},
        inputs={"draws": args.draws},
        outputs=outputs,
        wall_time_s=time.monotonic() - t0,
    )
    print(f"track: {summary} -> {args.out}")
    return EXIT_OK


def cmd_evaluate(args):
    t0 = time.monotonic()
    cfg = _load_json(args.config, "study")
    _check_keys(cfg, _STUDY_KEYS, "study")
    sampler = _sampler_from_config(cfg.get("sampler", {}), seed=0)
    phantom = _phantom_geometry(cfg.get("phantom", {}), "study phantom")
    try:
        study = StudyConfig(
            replications=cfg.get("replications", 50),
            noise_levels=tuple(cfg.get("noise_levels", (0.1, 0.5))),
            sampler=sampler,
            phantom=phantom,
            master_seed=args.seed,
            workers=cfg.get("workers", 1),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    result = run_simulation_study(study)
    os.makedirs(args.out, exist_ok=True)
    dataio.save_study(result, os.path.join(args.out, "report.csv"))
    snapshot = {
        "replications": study.replications,
        "noise_levels": list(study.noise_levels),
        "workers": study.workers,
        "sampler": {"burn_in": sampler.burn_in, "retained": sampler.retained,
                    "thin": sampler.thin},
    }
    dataio.write_manifest(
        args.out, "evaluate", args.seed, snapshot,
        inputs={"config": args.config},
        outputs=["report.csv"],
        wall_time_s=time.monotonic() - t0,
    )
    for method, tau, metric, mean, se, _ in result.rows():
        se_txt = "n/a" if se != se else f"{se:.4f}"
        print(f"evaluate: {method:6s} tau={tau} {metric}: {mean:.4f} (se {se_txt})")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="fibertrace",
        description=(
            "Spatially smoothed Bayesian tensor estimation and probabilistic "
            "fiber tracking on voxel grids"
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic phantom dataset")
    p.add_argument("--config", help="phantom config JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0, help="master RNG seed")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit-ls", help="least-squares tensor fit per voxel")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_fit_ls)

    p = sub.add_parser("sample", help="run the posterior sampler")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--config", help="sampler config JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("track", help="probabilistic tracking over draws")
    p.add_argument("--draws", required=True, help="draws directory")
    p.add_argument("--seeds", required=True,
                   help="seed voxels as 'x,y,z;x,y,z;...'")
    p.add_argument("--threshold", type=float,
                   help="angle threshold C in degrees")
    p.add_argument("--sweep", action="store_true",
                   help="run the 1001-threshold sensitivity sweep instead")
    p.add_argument("--quiver", action="store_true",
                   help="also write per-draw in-plane directions")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("sweep", help="threshold sensitivity sweep (track --sweep)")
    p.add_argument("--draws", required=True)
    p.add_argument("--seeds", required=True)
    p.add_argument("--quiver", action="store_true")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_track, sweep=True, threshold=None)

    p = sub.add_parser("evaluate", help="replicated phantom simulation study")
    p.add_argument("--config", help="study config JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SchemaError as exc:
        print(f"error (schema): {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except (ConfigError, SeedOutOfBounds) as exc:
        print(f"error (config): {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NotPositiveDefinite, InvalidDof, RankDeficientDesign,
            np.linalg.LinAlgError) as exc:
        print(f"error (numeric): {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

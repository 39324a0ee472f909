"""Command-line interface: ``anisoreg {simulate,register,sweep,evaluate,clean,export}``.

Exit codes: 0 on success, 1 on invalid input or arguments, 2 on a runtime
failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .core import (
    AnisoregError,
    Mode,
    RegistrationConfig,
    RigidTransform,
    Schedule,
    ValidationError,
)
from .engine import best_of_restarts
from .io import (
    export_gmm,
    export_transforms,
    parse_cloud_csv,
    parse_gmm,
    parse_transforms,
    write_cloud_csv,
    write_ply,
)
from .metrics import pairwise_error
from .pipeline import (
    VARIANCE_FACTOR,
    RunManifest,
    SweepSpec,
    build_model,
    clean_registered_clouds,
    config_dict,
    run_sweep,
)
from .simulation import AcquisitionSpec, perturb_rotations, simulate_views

log = logging.getLogger("anisoreg")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for runtime failures here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _nonneg_int(text):
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return v


def _add_registration_flags(p):
    p.add_argument("--n-components", type=int, required=True)
    p.add_argument("--outlier-fraction", type=float, default=0.1)
    p.add_argument("--max-iters", type=int, default=100)
    p.add_argument("--rel-loglik-tol", type=float, default=1e-6)
    p.add_argument("--mode", choices=[m.value for m in Mode], default=Mode.PROPOSED.value)
    p.add_argument("--samples-per-point", type=int, default=1)
    p.add_argument("--variance-floor", type=float, default=None)
    p.add_argument("--update-weights", action="store_true",
                   help="update the component priors (fixed by default)")
    p.add_argument("--schedule", choices=[s.value for s in Schedule], default=None)
    p.add_argument("--restarts", type=int, default=5)


def _add_acquisition_flags(p):
    p.add_argument("--sigma-spatial-std", type=float, default=None,
                   help="std of the per-point noise level (default 0.2 * sigma)")
    p.add_argument("--outlier-fraction", type=float, default=0.1)
    p.add_argument("--n-views", type=int, default=5)
    p.add_argument("--noise-entries", choices=("variance", "std"), default="variance")
    p.add_argument("--n-points", type=int, default=2000)
    p.add_argument("--mesh", default=None, help="PLY or x,y,z file for a custom model")


def build_parser():
    parser = _Parser(prog="anisoreg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="generate noisy views of a model")
    p.add_argument("--model", default="triplets", help="triplets, centriole or mesh (with --mesh)")
    p.add_argument("--sigma", type=float, required=True)
    p.add_argument("--r", type=float, default=1.0)
    _add_acquisition_flags(p)
    p.add_argument("--init-std-deg", type=float, default=30.0)
    p.add_argument("--seed", type=_nonneg_int, required=True)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("register", help="jointly register cloud CSV files")
    p.add_argument("clouds", nargs="+")
    _add_registration_flags(p)
    p.add_argument("--init", default=None, help="initial transforms CSV (default identity)")
    p.add_argument("--seed", type=_nonneg_int, required=True)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("sweep", help="simulate and register a grid of noise settings")
    p.add_argument("--model", default="triplets")
    p.add_argument("--sigmas", type=float, nargs="+", default=[0.01])
    p.add_argument("--rs", type=float, nargs="+", default=[1.0, 5.0, 10.0])
    p.add_argument("--replicates", type=int, default=10)
    p.add_argument("--n-views", type=int, default=5)
    p.add_argument("--restarts", type=int, default=5)
    p.add_argument("--init-std-deg", type=float, default=30.0)
    p.add_argument("--outlier-fraction", type=float, default=0.1)
    p.add_argument("--sigma-spatial-std-ratio", type=float, default=0.2)
    p.add_argument("--n-components", type=int, default=None)
    p.add_argument("--n-points", type=int, default=2000)
    p.add_argument("--max-iters", type=int, default=100)
    p.add_argument("--rel-loglik-tol", type=float, default=1e-6)
    p.add_argument("--noise-entries", choices=("variance", "std"), default="variance")
    p.add_argument("--mesh", default=None)
    p.add_argument("--seed", type=_nonneg_int, default=0)
    p.add_argument("--workers", type=int, default=None,
                   help="process count (default: ANISOREG_WORKERS or 1)")
    p.add_argument("--timing", action="store_true", help="fill the seconds column")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("evaluate", help="pairwise rotation error against ground truth")
    p.add_argument("--estimated", required=True, help="estimated transforms CSV")
    p.add_argument("--truth", required=True, help="ground-truth transforms CSV")
    p.add_argument("--symmetry-order", type=int, default=1)
    p.add_argument("--out", default=None, help="write the pairwise matrix as CSV")

    p = sub.add_parser("clean", help="drop outliers and high-variance points after registration")
    p.add_argument("clouds", nargs="+")
    p.add_argument("--registration", required=True, help="output directory of `register`")
    p.add_argument("--factor", type=float, default=VARIANCE_FACTOR)
    p.add_argument("--ply", action="store_true", help="also write a merged PLY")
    p.add_argument("--out", required=True)

    p = sub.add_parser("export", help="write registered clouds and GMM means as PLY")
    p.add_argument("clouds", nargs="+")
    p.add_argument("--registration", required=True, help="output directory of `register`")
    p.add_argument("--text", action="store_true", help="ASCII instead of binary PLY")
    p.add_argument("--out", required=True)
    return parser


def _load_clouds(paths):
    return [parse_cloud_csv(p) for p in paths]


def _load_registration(directory):
    d = Path(directory)
    manifest = RunManifest.read(d / "manifest.json")
    gmm_meta = manifest.extra["gmm"]
    gmm = parse_gmm(d / "gmm.csv", gmm_meta["hull_volume"], gmm_meta["variance_floor"])
    transforms = parse_transforms(d / "transforms.csv")
    return manifest, transforms, gmm


def _write_matrix(path, m):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"c{j}" for j in range(m.shape[1])])
        for row in m:
            w.writerow([repr(float(v)) for v in row])


def _write_model_csv(model, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "z"])
        for p in model.points:
            w.writerow([repr(float(v)) for v in p])
    return Path(path)


def cmd_simulate(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ss = np.random.SeedSequence(args.seed)
    model_ss, sim_ss, init_ss = ss.spawn(3)
    model = build_model(args.model, args.n_points, args.mesh, np.random.default_rng(model_ss))
    acq = AcquisitionSpec(sigma=args.sigma, r=args.r, sigma_spatial_std=args.sigma_spatial_std,
                          outlier_fraction=args.outlier_fraction, n_views=args.n_views,
                          rng_seed=args.seed, noise_entries=args.noise_entries)
    sim = simulate_views(model, acq, np.random.default_rng(sim_ss))
    init = perturb_rotations(sim.transforms, args.init_std_deg, np.random.default_rng(init_ss))
    paths = [write_cloud_csv(c, out / f"{c.id}.csv") for c in sim.clouds]
    paths.append(export_transforms(sim.transforms, out / "truth_transforms.csv"))
    paths.append(export_transforms(init, out / "init_transforms.csv"))
    mask_path = out / "outliers.csv"
    with mask_path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["view", "index"])
        for c, m in zip(sim.clouds, sim.outlier_masks):
            for i in np.flatnonzero(m):
                w.writerow([c.id, int(i)])
    paths.append(mask_path)
    paths.append(_write_model_csv(model, out / "model.csv"))
    manifest = RunManifest(command=args.argv, config={k: v for k, v in vars(args).items() if k != "argv"},
                           seed=args.seed,
                           extra={"symmetry_order": model.symmetry_order, "model": model.name})
    manifest.add_outputs(paths)
    manifest.write(out / "manifest.json")
    print(f"wrote {len(sim.clouds)} views to {out}")
    return EXIT_OK


def cmd_register(args):
    clouds = _load_clouds(args.clouds)
    if args.init:
        init = parse_transforms(args.init)
        if len(init) != len(clouds):
            raise ValidationError(f"{len(init)} initial transforms for {len(clouds)} clouds")
    else:
        init = [RigidTransform.identity() for _ in clouds]
    cfg = RegistrationConfig(n_components=args.n_components, outlier_fraction=args.outlier_fraction,
                             max_iters=args.max_iters, rel_loglik_tol=args.rel_loglik_tol,
                             rng_seed=args.seed, mode=Mode(args.mode),
                             samples_per_point=args.samples_per_point,
                             variance_floor=args.variance_floor,
                             fix_weights=not args.update_weights, schedule=args.schedule)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    res = best_of_restarts(clouds, init, cfg, args.restarts, np.random.default_rng(args.seed))
    seconds = time.perf_counter() - start
    paths = [export_transforms(res.transforms, out / "transforms.csv"),
             export_gmm(res.gmm, out / "gmm.csv")]
    trace_path = out / "trace.csv"
    with trace_path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "loglik"])
        for i, v in enumerate(res.trace.values):
            w.writerow([i, repr(float(v))])
    paths.append(trace_path)
    manifest = RunManifest(command=args.argv, config=config_dict(cfg),
                           seed=args.seed, mode=cfg.mode.value, timing={"seconds": seconds},
                           extra={"restarts": args.restarts, "n_iter": res.n_iter,
                                  "converged": res.converged, "loglik": res.loglik,
                                  "gmm": {"hull_volume": res.gmm.hull_volume,
                                          "variance_floor": res.gmm.variance_floor}})
    manifest.add_inputs(args.clouds + ([args.init] if args.init else []))
    manifest.add_outputs(paths)
    manifest.write(out / "manifest.json")
    print(f"{cfg.mode.value}: loglik {res.loglik:.6g} after {res.n_iter} iterations"
          f"{'' if res.converged else ' (not converged)'}")
    return EXIT_OK


def cmd_sweep(args):
    spec = SweepSpec(model=args.model, sigmas=tuple(args.sigmas), rs=tuple(args.rs),
                     replicates=args.replicates, n_views=args.n_views, restarts=args.restarts,
                     init_std_deg=args.init_std_deg, outlier_fraction=args.outlier_fraction,
                     sigma_spatial_std_ratio=args.sigma_spatial_std_ratio,
                     n_components=args.n_components, n_points=args.n_points,
                     max_iters=args.max_iters, rel_loglik_tol=args.rel_loglik_tol, seed=args.seed,
                     mesh_path=args.mesh, noise_entries=args.noise_entries)
    path = run_sweep(spec, args.out, workers=args.workers, record_timing=args.timing,
                     command=args.argv)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_evaluate(args):
    est = parse_transforms(args.estimated)
    truth = parse_transforms(args.truth)
    rep = pairwise_error(est, truth, args.symmetry_order)
    if args.out:
        _write_matrix(args.out, rep.pairwise)
    print(json.dumps({"mean_err_deg": rep.mean, "std_err_deg": rep.std}))
    return EXIT_OK


def cmd_clean(args):
    clouds = _load_clouds(args.clouds)
    manifest, transforms, gmm = _load_registration(args.registration)
    if len(transforms) != len(clouds):
        raise ValidationError(f"{len(transforms)} transforms for {len(clouds)} clouds")
    mode = Mode(manifest.mode)
    cleaned = clean_registered_clouds(clouds, transforms, gmm, mode, args.factor)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = [write_cloud_csv(c, out / f"{c.id}_clean.csv") for c in cleaned]
    if args.ply and cleaned:
        paths.append(write_ply(np.concatenate([c.points for c in cleaned]), out / "cleaned.ply"))
    kept = sum(len(c) for c in cleaned)
    total = sum(len(c) for c in clouds)
    print(f"kept {kept} of {total} points")
    return EXIT_OK


def cmd_export(args):
    clouds = _load_clouds(args.clouds)
    _, transforms, gmm = _load_registration(args.registration)
    if len(transforms) != len(clouds):
        raise ValidationError(f"{len(transforms)} transforms for {len(clouds)} clouds")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pts = np.concatenate([t.apply(c.points) for c, t in zip(clouds, transforms)])
    write_ply(pts, out / "registered.ply", text=args.text)
    write_ply(gmm.means, out / "gmm_means.ply", text=args.text)
    print(f"wrote {out / 'registered.ply'} and {out / 'gmm_means.ply'}")
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "register": cmd_register, "sweep": cmd_sweep,
            "evaluate": cmd_evaluate, "clean": cmd_clean, "export": cmd_export}


def main(argv=None):
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    args = parser.parse_args(argv)
    args.argv = ["anisoreg"] + argv
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ValidationError, FileNotFoundError, KeyError) as exc:
        print(f"anisoreg {args.command}: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (AnisoregError, np.linalg.LinAlgError, OSError, RuntimeError) as exc:
        print(f"anisoreg {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

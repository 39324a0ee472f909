"""Experiment orchestration: post-registration cleaning, parameter sweeps and
run manifests."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import Mode, ObservedCloud, RegistrationConfig, ValidationError
from .engine import _estep_cloud, best_of_restarts, noise_bases
from .gaussian import rotate_covariance
from .metrics import pairwise_error
from .simulation import (
    AcquisitionSpec,
    generate_centriole,
    generate_triplets,
    load_mesh_model,
    perturb_rotations,
    simulate_views,
)

log = logging.getLogger(__name__)

WORKERS_ENV = "ANISOREG_WORKERS"
SWEEP_COLUMNS = ("model", "sigma", "r", "replicate", "mode", "mean_err_deg", "std_err_deg",
                 "loglik", "iters", "seconds")
DEFAULT_COMPONENTS = {"triplets": 54, "centriole": 1500, "bunny": 2500}
VARIANCE_FACTOR = 2.5


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: list
    config: dict
    seed: Optional[int]
    mode: Optional[str] = None
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def add_inputs(self, paths):
        for p in paths:
            self.inputs[str(p)] = sha256_file(p)

    def add_outputs(self, paths):
        for p in paths:
            self.outputs[str(p)] = sha256_file(p)

    def write(self, path):
        doc = asdict(self)
        doc["platform"] = platform.platform()
        Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")
        return Path(path)

    @classmethod
    def read(cls, path):
        doc = json.loads(Path(path).read_text())
        doc.pop("platform", None)
        return cls(**doc)


def config_dict(config):
    d = asdict(config)
    d["mode"] = config.mode.value
    d["schedule"] = config.resolved_schedule.value
    return d


def cleaning_masks(clouds, transforms, gmm, mode=Mode.PROPOSED, factor=VARIANCE_FACTOR):
    """Boolean keep-mask per cloud.

    A point is dropped when its most responsible class is the outlier class,
    or when its most responsible component has a variance strictly above
    ``factor`` times the median component variance.
    """
    K = gmm.n_components
    noisy = gmm.variances > factor * np.median(gmm.variances)
    masks = []
    for cloud, t in zip(clouds, transforms):
        alpha = _estep_cloud(cloud, t, gmm, Mode(mode), posterior=False).alpha
        best = np.argmax(alpha, axis=1)
        outlier = best == K
        masks.append(~outlier & ~noisy[np.minimum(best, K - 1)])
    return masks


def clean_registered_clouds(clouds, transforms, gmm, mode=Mode.PROPOSED, factor=VARIANCE_FACTOR):
    """Registered clouds with outliers and points of high-variance components
    removed. Retained points are only moved by their final transform; their
    noise covariances are rotated accordingly."""
    out = []
    for cloud, t, keep in zip(clouds, transforms,
                              cleaning_masks(clouds, transforms, gmm, mode, factor)):
        pts = t.apply(cloud.points[keep])
        covs = rotate_covariance(cloud.noise_covs[keep], t.rotation)
        if len(pts):
            out.append(ObservedCloud(cloud.id, pts, covs))
        else:
            log.warning("cloud %s: every point removed", cloud.id)
    return out


@dataclass(frozen=True)
class SweepSpec:
    model: str = "triplets"
    sigmas: Sequence[float] = (0.01,)
    rs: Sequence[float] = (1.0, 5.0, 10.0)
    replicates: int = 10
    n_views: int = 5
    restarts: int = 5
    init_std_deg: float = 30.0
    outlier_fraction: float = 0.10
    sigma_spatial_std_ratio: float = 0.2
    n_components: Optional[int] = None
    n_points: int = 2000
    max_iters: int = 100
    rel_loglik_tol: float = 1e-6
    seed: int = 0
    mesh_path: Optional[str] = None
    noise_entries: str = "variance"

    def __post_init__(self):
        if not len(self.sigmas):
            raise ValidationError("sweep needs at least one sigma")
        if not len(self.rs):
            raise ValidationError("sweep needs at least one r")
        if self.replicates < 1 or self.restarts < 1:
            raise ValidationError("replicates and restarts must be >= 1")
        if self.model not in ("triplets", "centriole") and self.mesh_path is None:
            raise ValidationError(f"model {self.model!r} needs a mesh_path")

    @property
    def components(self):
        if self.n_components is not None:
            return self.n_components
        return DEFAULT_COMPONENTS.get(self.model, DEFAULT_COMPONENTS["bunny"])


def build_model(name, n_points=2000, mesh_path=None, rng=None):
    if name == "triplets":
        return generate_triplets()
    if name == "centriole":
        return generate_centriole(n_points, rng)
    return load_mesh_model(mesh_path, n_points, rng, normalize=True)


def run_cell(spec, i_sigma, i_r, replicate, record_timing=False):
    """Simulate one (sigma, r, replicate) cell and register it with both modes.

    Returns one row dict per mode. Seeds are derived from the sweep seed and
    the cell indices only, so a cell gives the same rows whatever the
    execution order.
    """
    sigma, r = spec.sigmas[i_sigma], spec.rs[i_r]
    ss = np.random.SeedSequence([spec.seed, i_sigma, i_r, replicate])
    model_ss, sim_ss, init_ss, reg_ss = ss.spawn(4)
    model = build_model(spec.model, spec.n_points, spec.mesh_path, np.random.default_rng(model_ss))
    acq = AcquisitionSpec(sigma=sigma, r=r, sigma_spatial_std=spec.sigma_spatial_std_ratio * sigma,
                          outlier_fraction=spec.outlier_fraction, n_views=spec.n_views,
                          noise_entries=spec.noise_entries)
    sim = simulate_views(model, acq, np.random.default_rng(sim_ss))
    init = perturb_rotations(sim.transforms, spec.init_std_deg, np.random.default_rng(init_ss))
    rows = []
    for mode in (Mode.PROPOSED, Mode.BASELINE):
        row = dict(model=spec.model, sigma=sigma, r=r, replicate=replicate, mode=mode.value)
        start = time.perf_counter()
        try:
            cfg = RegistrationConfig(n_components=spec.components, outlier_fraction=0.1,
                                     max_iters=spec.max_iters, rel_loglik_tol=spec.rel_loglik_tol,
                                     mode=mode)
            # both modes start from the same restart seeds; a fresh SeedSequence
            # is needed because spawning mutates its child counter
            fresh = np.random.SeedSequence(reg_ss.entropy, spawn_key=reg_ss.spawn_key)
            res = best_of_restarts(sim.clouds, init, cfg, spec.restarts,
                                   np.random.default_rng(fresh))
            rep = pairwise_error(res.transforms, sim.transforms, model.symmetry_order)
            row.update(mean_err_deg=rep.mean, std_err_deg=rep.std, loglik=res.loglik,
                       iters=res.n_iter)
        except Exception as exc:  # recorded as a failed row, the sweep goes on
            log.error("cell sigma=%g r=%g rep=%d %s failed: %s", sigma, r, replicate, mode.value, exc)
            row.update(mean_err_deg=float("nan"), std_err_deg=float("nan"), loglik=float("nan"),
                       iters=0, error=f"{type(exc).__name__}: {exc}")
        row["seconds"] = time.perf_counter() - start if record_timing else ""
        rows.append(row)
    return rows


def _run_cell_args(args):
    return run_cell(*args)


def _format(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def resolve_workers(workers=None):
    if workers is None:
        workers = int(os.environ.get(WORKERS_ENV, "1"))
    return max(1, int(workers))


def run_sweep(spec, out_dir, workers=None, record_timing=False, command=None):
    """Run every (sigma, r, replicate) cell and write ``sweep.csv`` plus
    ``manifest.json`` into ``out_dir``. Returns the CSV path.

    Cells run in a process pool of ``workers`` (default: the
    ``ANISOREG_WORKERS`` environment variable, else 1); rows are written in
    cell order regardless of completion order. The ``seconds`` column is
    left empty unless ``record_timing`` is set, which keeps the CSV
    byte-reproducible.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cells = [(spec, i, j, k, record_timing)
             for i in range(len(spec.sigmas))
             for j in range(len(spec.rs))
             for k in range(spec.replicates)]
    workers = resolve_workers(workers)
    start = time.time()
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_cell_args, cells))
    else:
        results = [_run_cell_args(c) for c in cells]
    csv_path = out_dir / "sweep.csv"
    failures = []
    with csv_path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for rows in results:
            for row in rows:
                if "error" in row:
                    failures.append({k: row[k] for k in ("sigma", "r", "replicate", "mode", "error")})
                w.writerow([_format(row[c]) for c in SWEEP_COLUMNS])
    manifest = RunManifest(command=list(command or []), config=asdict(spec), seed=spec.seed,
                           mode="both", timing={"started": start, "seconds": time.time() - start,
                                                "workers": workers})
    manifest.extra["failures"] = failures
    manifest.add_outputs([csv_path])
    manifest.write(out_dir / "manifest.json")
    return csv_path


def read_sweep(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))

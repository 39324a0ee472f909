"""Synthetic ground-truth models and the noisy multiview acquisition.

Models are centered at the origin with the symmetry axis along z. The
default geometries are in arbitrary units with a radius of about 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np
from scipy.spatial.transform import Rotation

from .core import ObservedCloud, ParseError, RigidTransform, TooFewPoints, ValidationError
from .io import parse_ply
from .metrics import rot_z


@dataclass(frozen=True)
class GroundTruthModel:
    name: str
    points: np.ndarray
    symmetry_order: int = 1

    def __post_init__(self):
        if self.symmetry_order < 1:
            raise ValidationError("symmetry_order must be >= 1")
        pts = np.array(self.points, dtype=float)
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True)
class AcquisitionSpec:
    """Noise and view parameters of a simulated acquisition.

    The per-point covariance is ``diag(s, s, r s)`` with ``s`` drawn around
    ``sigma``. With ``noise_entries="variance"`` (default) those entries are
    the variances themselves; with ``"std"`` they are standard deviations and
    get squared. ``sigma_spatial_std=None`` means ``0.2 * sigma``.
    """

    sigma: float
    r: float = 1.0
    sigma_spatial_std: Optional[float] = None
    outlier_fraction: float = 0.10
    n_views: int = 5
    rng_seed: int = 0
    noise_entries: str = "variance"

    def __post_init__(self):
        if self.sigma < 0:
            raise ValidationError("sigma must be >= 0")
        if self.r < 1:
            raise ValidationError("r must be >= 1")
        if self.sigma_spatial_std is not None and self.sigma_spatial_std < 0:
            raise ValidationError("sigma_spatial_std must be >= 0")
        if not 0 <= self.outlier_fraction < 1:
            raise ValidationError("outlier_fraction must be in [0, 1)")
        if self.n_views < 1:
            raise ValidationError("n_views must be >= 1")
        if self.noise_entries not in ("variance", "std"):
            raise ValidationError("noise_entries must be 'variance' or 'std'")

    @property
    def spatial_std(self):
        return 0.2 * self.sigma if self.sigma_spatial_std is None else self.sigma_spatial_std


@dataclass
class SimulatedViews:
    clouds: List[ObservedCloud]
    transforms: List[RigidTransform]
    outlier_masks: List[np.ndarray] = field(default_factory=list)

    def __iter__(self):
        # unpacks as (clouds, transforms)
        return iter((self.clouds, self.transforms))


def _replicate(template, order):
    return np.concatenate([template @ rot_z(2 * np.pi * k / order).T for k in range(order)])


def _blade(radius, z, spacing, angle, n=3):
    """n points on a segment through (radius, 0, z), tilted from the tangent."""
    direction = np.array([np.sin(angle), np.cos(angle), 0.0])
    offsets = (np.arange(n) - (n - 1) / 2.0) * spacing
    return np.array([radius, 0.0, z]) + offsets[:, None] * direction


def generate_triplets(bottom_radius=1.0, top_radius=0.7, height=1.2, spacing=0.25,
                      blade_angle=np.radians(40.0)):
    """54 points: two C9 rings of triplets, the top ring narrower than the bottom."""
    template = np.vstack([
        _blade(bottom_radius, -height / 2, spacing, blade_angle),
        _blade(top_radius, height / 2, spacing, blade_angle),
    ])
    return GroundTruthModel("triplets", _replicate(template, 9), symmetry_order=9)


@dataclass(frozen=True)
class CentrioleGeometry:
    bottom_radius: float = 1.0
    top_radius: float = 0.8
    length: float = 1.8
    tube_radius: float = 0.05
    tube_spacing: float = 0.12
    blade_angle: float = np.radians(50.0)

    @property
    def max_radius(self):
        return max(self.bottom_radius, self.top_radius) + self.tube_spacing + self.tube_radius


def generate_centriole(n_points=2000, rng=None, geometry=CentrioleGeometry()):
    """Points sampled uniformly along 27 tubes (9 triplets) on a tapered barrel."""
    if n_points < 54:
        raise ValidationError("n_points must be >= 54")
    rng = np.random.default_rng(0) if rng is None else rng
    g = geometry
    tube = rng.integers(0, 27, size=n_points)
    sector, member = tube // 3, tube % 3
    s = rng.uniform(0.0, 1.0, size=n_points)
    radius = g.bottom_radius + s * (g.top_radius - g.bottom_radius)
    offset = (member - 1) * g.tube_spacing
    center = np.column_stack([
        radius + offset * np.sin(g.blade_angle),
        offset * np.cos(g.blade_angle),
        s * g.length - g.length / 2,
    ])
    # spread on the tube cross-section, in the plane orthogonal to z
    phi = rng.uniform(0.0, 2 * np.pi, size=n_points)
    rho = g.tube_radius * np.sqrt(rng.uniform(0.0, 1.0, size=n_points))
    center[:, 0] += rho * np.cos(phi)
    center[:, 1] += rho * np.sin(phi)
    ang = 2 * np.pi * sector / 9
    c, si = np.cos(ang), np.sin(ang)
    pts = np.column_stack([c * center[:, 0] - si * center[:, 1],
                           si * center[:, 0] + c * center[:, 1],
                           center[:, 2]])
    return GroundTruthModel("centriole", pts, symmetry_order=9)


def _sample_mesh(vertices, faces, n_points, rng):
    a, b, c = (vertices[faces[:, i]] for i in range(3))
    area = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
    if not area.sum() > 0:
        raise ParseError("mesh has zero surface area")
    tri = rng.choice(len(faces), size=n_points, p=area / area.sum())
    u, v = rng.uniform(size=(2, n_points))
    flip = u + v > 1
    u[flip], v[flip] = 1 - u[flip], 1 - v[flip]
    return a[tri] + u[:, None] * (b[tri] - a[tri]) + v[:, None] * (c[tri] - a[tri])


def normalize_points(points, radius=1.0):
    """Center at the centroid and scale to the given maximal distance."""
    p = np.asarray(points, dtype=float)
    p = p - p.mean(axis=0)
    return p * (radius / np.linalg.norm(p, axis=1).max())


def load_mesh_model(path, n_points=2000, rng=None, normalize=False):
    """Ground-truth model from a PLY (mesh or point set) or x,y,z text file.

    Meshes are sampled on their surface with area weighting; point sets are
    subsampled without replacement (all points, in file order, when
    ``n_points`` equals the point count).
    """
    rng = np.random.default_rng(0) if rng is None else rng
    path = Path(path)
    faces = None
    if path.suffix.lower() == ".ply":
        verts, faces = parse_ply(path, with_faces=True)
    else:
        try:
            verts = np.loadtxt(path, delimiter="," if path.suffix.lower() == ".csv" else None,
                               ndmin=2)[:, :3]
        except ValueError as exc:
            raise ParseError(f"{path}: {exc}") from None
    if faces is not None and len(faces):
        pts = _sample_mesh(verts, faces, n_points, rng)
    elif n_points > len(verts):
        raise TooFewPoints(f"{path} has {len(verts)} points, {n_points} requested")
    elif n_points == len(verts):
        pts = verts
    else:
        pts = verts[np.sort(rng.choice(len(verts), size=n_points, replace=False))]
    if normalize:
        pts = normalize_points(pts)
    return GroundTruthModel(path.stem, pts, symmetry_order=1)


def noise_covariance(level, r, noise_entries="variance"):
    level = np.asarray(level, dtype=float)
    diag = np.stack([level, level, r * level], axis=-1)
    if noise_entries == "std":
        diag = diag ** 2
    return diag[..., :, None] * np.eye(3)


def simulate_views(model, spec, rng=None):
    """Rotate the model randomly per view, replace a fraction of its points
    with uniform outliers inside the rotated bounding box, draw a noise level
    per point and add Gaussian noise with the recorded covariance.

    Returns a :class:`SimulatedViews`; it unpacks as ``(clouds, transforms)``
    where ``transforms[j]`` maps the model frame onto view ``j``.
    """
    rng = np.random.default_rng(spec.rng_seed) if rng is None else rng
    N = len(model)
    n_out = int(round(spec.outlier_fraction * N))
    clouds, truths, masks = [], [], []
    for j, vr in enumerate(rng.spawn(spec.n_views)):
        R = Rotation.random(random_state=vr).as_matrix()
        X = model.points @ R.T
        mask = np.zeros(N, dtype=bool)
        if n_out:
            idx = vr.choice(N, size=n_out, replace=False)
            mask[idx] = True
            X[idx] = vr.uniform(X.min(axis=0), X.max(axis=0), size=(n_out, 3))
        level = np.maximum(vr.normal(spec.sigma, spec.spatial_std, size=N), spec.sigma / 10)
        covs = noise_covariance(level, spec.r, spec.noise_entries)
        std = np.sqrt(np.diagonal(covs, axis1=1, axis2=2))
        Y = X + std * vr.standard_normal((N, 3))
        clouds.append(ObservedCloud(f"view{j:02d}", Y, covs))
        truths.append(RigidTransform(R, np.zeros(3)))
        masks.append(mask)
    return SimulatedViews(clouds, truths, masks)


def perturb_rotations(true_transforms, std_degrees, rng=None):
    """Initial transforms: the inverse ground-truth rotations with Gaussian
    noise of ``std_degrees`` added to their xyz Euler angles."""
    if std_degrees < 0:
        raise ValidationError("std_degrees must be >= 0")
    rng = np.random.default_rng(0) if rng is None else rng
    out = []
    for t in true_transforms:
        inv = t.rotation.T
        if std_degrees > 0:
            angles = Rotation.from_matrix(inv).as_euler("xyz", degrees=True)
            angles = angles + rng.normal(0.0, std_degrees, size=3)
            inv = Rotation.from_euler("xyz", angles, degrees=True).as_matrix()
        out.append(RigidTransform(inv, np.zeros(3)))
    return out

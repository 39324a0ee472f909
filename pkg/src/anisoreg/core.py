"""Shared value types: observed clouds, rigid transforms, the mixture model
and the registration configuration.

Arrays are stored read-only so the types can be shared freely. Noise
covariances are kept as full ``(N, 3, 3)`` symmetric arrays; the six-entry
upper-triangle layout used on disk is handled by :func:`cov_to_upper` and
:func:`cov_from_upper`.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

ROTATION_TOL = 1e-9
PSD_JITTER = 1e-12

# order of the six unique entries of a symmetric 3x3 matrix
UPPER_INDEX = ((0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2))


class AnisoregError(Exception):
    """Base class for all library errors."""


class ValidationError(AnisoregError, ValueError):
    pass


class NotARotation(ValidationError):
    pass


class NotPSD(ValidationError):
    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class SingularCovariance(AnisoregError, np.linalg.LinAlgError):
    pass


class DegenerateConfiguration(AnisoregError):
    pass


class InsufficientPoints(ValidationError):
    pass


class LengthMismatch(ValidationError):
    pass


class ParseError(ValidationError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class TooFewPoints(ValidationError):
    pass


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype, copy=True)
    a.flags.writeable = False
    return a


def cov_to_upper(cov):
    """(..., 3, 3) -> (..., 6) as ``xx, yy, zz, xy, xz, yz``."""
    cov = np.asarray(cov, dtype=float)
    return np.stack([cov[..., i, j] for i, j in UPPER_INDEX], axis=-1)


def cov_from_upper(upper):
    """Inverse of :func:`cov_to_upper`; the result is symmetric by construction."""
    upper = np.asarray(upper, dtype=float)
    cov = np.zeros(upper.shape[:-1] + (3, 3))
    for c, (i, j) in enumerate(UPPER_INDEX):
        cov[..., i, j] = upper[..., c]
        cov[..., j, i] = upper[..., c]
    return cov


def check_psd(covs):
    """Raise :class:`NotPSD` unless every matrix in ``covs`` is symmetric PSD.

    The test is a Cholesky factorization after adding a diagonal jitter of
    ``PSD_JITTER * trace`` (plus the smallest normal float so that exact zero
    matrices pass).
    """
    covs = np.asarray(covs, dtype=float)
    single = covs.ndim == 2
    covs = covs.reshape(-1, 3, 3)
    if not np.all(np.isfinite(covs)):
        bad = int(np.argwhere(~np.isfinite(covs).all(axis=(1, 2)))[0, 0])
        raise NotPSD(f"covariance {bad} has non-finite entries", index=bad)
    asym = np.abs(covs - covs.transpose(0, 2, 1)).max(axis=(1, 2))
    scale = np.abs(covs).max(axis=(1, 2))
    bad = np.nonzero(asym > 1e-12 * np.maximum(scale, 1.0))[0]
    if bad.size:
        raise NotPSD(f"covariance {bad[0]} is not symmetric", index=int(bad[0]))
    tr = np.trace(covs, axis1=1, axis2=2)
    jitter = PSD_JITTER * np.abs(tr) + np.finfo(float).tiny
    shifted = covs + jitter[:, None, None] * np.eye(3)
    try:
        np.linalg.cholesky(shifted)
    except np.linalg.LinAlgError:
        # find the first offending matrix for the error message
        for idx in range(len(covs)):
            try:
                np.linalg.cholesky(shifted[idx])
            except np.linalg.LinAlgError:
                raise NotPSD(
                    f"covariance {idx} is not positive semi-definite",
                    index=None if single else idx,
                ) from None
    return True


def nearest_rotation(m):
    """Closest proper rotation to ``m`` in Frobenius norm."""
    u, _, vt = np.linalg.svd(np.asarray(m, dtype=float))
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def is_rotation(m, tol=ROTATION_TOL):
    m = np.asarray(m, dtype=float)
    if m.shape != (3, 3) or not np.all(np.isfinite(m)):
        return False
    return (np.linalg.norm(m.T @ m - np.eye(3)) <= tol
            and abs(np.linalg.det(m) - 1.0) <= tol)


def validate_rotation(m, project=False, tol=ROTATION_TOL):
    """Return ``m`` as a rotation matrix.

    If ``m`` is orthonormal with determinant +1 (within ``tol``) it is
    returned unchanged. Otherwise the nearest rotation is returned when
    ``project`` is set, else :class:`NotARotation` is raised.
    """
    m = np.asarray(m, dtype=float)
    if m.shape != (3, 3):
        raise NotARotation(f"expected a 3x3 matrix, got shape {m.shape}")
    if is_rotation(m, tol):
        return m
    if project and np.all(np.isfinite(m)):
        return nearest_rotation(m)
    ortho = np.linalg.norm(m.T @ m - np.eye(3))
    raise NotARotation(
        f"not a rotation: |M^T M - I| = {ortho:.3g}, det = {np.linalg.det(m):.6g}")


@dataclass(frozen=True)
class ObservedCloud:
    """A point set with one noise covariance per point."""

    id: str
    points: np.ndarray
    noise_covs: np.ndarray

    def __post_init__(self):
        pts = _frozen(self.points)
        covs = _frozen(self.noise_covs)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValidationError(f"points must be (N, 3), got {pts.shape}")
        if len(pts) < 1:
            raise ValidationError("a cloud needs at least one point")
        if covs.shape != (len(pts), 3, 3):
            raise ValidationError(
                f"noise_covs must be ({len(pts)}, 3, 3), got {covs.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValidationError("points must be finite")
        check_psd(covs)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "noise_covs", covs)

    def __len__(self):
        return len(self.points)

    @classmethod
    def noise_free(cls, id, points):
        points = np.asarray(points, dtype=float)
        return cls(id, points, np.zeros((len(points), 3, 3)))


@dataclass(frozen=True)
class RigidTransform:
    """``x -> rotation @ x + translation``."""

    rotation: np.ndarray
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        rot = validate_rotation(self.rotation)
        t = np.asarray(self.translation, dtype=float).reshape(-1)
        if t.shape != (3,) or not np.all(np.isfinite(t)):
            raise ValidationError("translation must be a finite 3-vector")
        object.__setattr__(self, "rotation", _frozen(rot))
        object.__setattr__(self, "translation", _frozen(t))

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points):
        """Transform an ``(N, 3)`` array (or a single point)."""
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def inverse(self):
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def compose(self, other):
        """``self ∘ other``: apply ``other`` first."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    def as_row(self):
        """12 values: row-major rotation followed by translation."""
        return np.concatenate([self.rotation.reshape(-1), self.translation])


@dataclass(frozen=True)
class GmmModel:
    """Isotropic Gaussian mixture with an extra uniform outlier class.

    ``weights`` has ``K + 1`` entries, the last one being the outlier mass
    whose density is ``1 / hull_volume``.
    """

    means: np.ndarray
    variances: np.ndarray
    weights: np.ndarray
    hull_volume: float
    variance_floor: float = 0.0

    def __post_init__(self):
        means = _frozen(self.means)
        var = _frozen(self.variances).reshape(-1)
        w = _frozen(self.weights).reshape(-1)
        k = len(var)
        if means.shape != (k, 3) or k < 1:
            raise ValidationError(f"means must be ({k}, 3), got {means.shape}")
        if w.shape != (k + 1,):
            raise ValidationError(f"weights must have K+1 = {k + 1} entries")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValidationError(f"weights must be >= 0 and sum to 1 (sum={w.sum()!r})")
        if not np.all(var > 0) or np.any(var < self.variance_floor):
            raise ValidationError("variances must be positive and above the floor")
        if not self.hull_volume > 0:
            raise ValidationError("hull_volume must be positive")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "variances", var)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "hull_volume", float(self.hull_volume))
        object.__setattr__(self, "variance_floor", float(self.variance_floor))

    @property
    def n_components(self):
        return len(self.variances)

    @property
    def outlier_weight(self):
        return float(self.weights[-1])

    def replace(self, **changes):
        kw = dict(means=self.means, variances=self.variances, weights=self.weights,
                  hull_volume=self.hull_volume, variance_floor=self.variance_floor)
        kw.update(changes)
        return GmmModel(**kw)


class Mode(str, enum.Enum):
    PROPOSED = "proposed_sage"
    BASELINE = "baseline_jrmpc"


class Schedule(str, enum.Enum):
    SAGE = "sage"
    ECM = "ecm"


@dataclass(frozen=True)
class RegistrationConfig:
    """Hyper-parameters of one registration run.

    ``variance_floor=None`` resolves to ``(1e-4 * bbox diagonal)**2`` of the
    initially transformed data. ``schedule=None`` picks SAGE for the proposed
    mode and ECM for the baseline.
    """

    n_components: int
    outlier_fraction: float = 0.1
    max_iters: int = 100
    rel_loglik_tol: float = 1e-6
    rng_seed: int = 0
    mode: Mode = Mode.PROPOSED
    samples_per_point: int = 1
    variance_floor: Optional[float] = None
    fix_weights: bool = True
    schedule: Optional[Schedule] = None

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        if self.schedule is not None:
            object.__setattr__(self, "schedule", Schedule(self.schedule))
        if int(self.n_components) < 1:
            raise ValidationError("n_components must be >= 1")
        if not 0.0 <= self.outlier_fraction < 1.0:
            raise ValidationError("outlier_fraction must be in [0, 1)")
        if self.max_iters < 1:
            raise ValidationError("max_iters must be >= 1")
        if self.rel_loglik_tol < 0:
            raise ValidationError("rel_loglik_tol must be >= 0")
        if self.rng_seed < 0:
            raise ValidationError("rng_seed must be unsigned")
        if self.samples_per_point < 1:
            raise ValidationError("samples_per_point must be >= 1")
        if self.variance_floor is not None and not self.variance_floor > 0:
            raise ValidationError("variance_floor must be positive")

    @property
    def resolved_schedule(self):
        if self.schedule is not None:
            return self.schedule
        return Schedule.SAGE if self.mode is Mode.PROPOSED else Schedule.ECM

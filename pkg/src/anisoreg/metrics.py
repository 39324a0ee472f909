"""Rotation accuracy of a multiview registration, up to cyclic symmetry."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import LengthMismatch, ValidationError


def rotation_angle_between(a, b):
    """Angle (radians) of the rotation ``a @ b.T``.

    Equal to ``arccos((tr - 1) / 2)``, evaluated as ``atan2`` of the sine
    (from the skew part) and the cosine so that it stays accurate near 0.
    """
    m = np.asarray(a, dtype=float) @ np.asarray(b, dtype=float).T
    skew = np.array([m[2, 1] - m[1, 2], m[0, 2] - m[2, 0], m[1, 0] - m[0, 1]])
    return float(np.arctan2(0.5 * np.linalg.norm(skew), 0.5 * (np.trace(m) - 1.0)))


def axis_rotation(axis, angle):
    """Rodrigues rotation about a (not necessarily unit) axis."""
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    K = np.array([[0, -axis[2], axis[1]],
                  [axis[2], 0, -axis[0]],
                  [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * K @ K


def rot_z(angle):
    return axis_rotation((0.0, 0.0, 1.0), angle)


@dataclass(frozen=True)
class ErrorReport:
    pairwise: np.ndarray  # (M, M), degrees
    mean: float
    std: float


def _as_rotation(t):
    return np.asarray(getattr(t, "rotation", t), dtype=float)


def pairwise_error(est, truth, symmetry_order=1, axis=(0.0, 0.0, 1.0)):
    """Pairwise relative-rotation errors in degrees.

    ``truth[j]`` maps the model frame to view ``j``; ``est[j]`` maps view
    ``j`` to the common frame. For each pair the estimated relative rotation
    ``est_i^T est_j`` is compared with ``truth_i Rz(k)^T truth_j^T`` for
    every symmetry step ``k``, using ``min(theta, pi - theta)`` and keeping
    the smallest value. Accepts transforms or bare rotation matrices.
    """
    if len(est) != len(truth):
        raise LengthMismatch(f"{len(est)} estimates vs {len(truth)} ground truths")
    if symmetry_order < 1:
        raise ValidationError("symmetry_order must be >= 1")
    R_hat = [_as_rotation(t) for t in est]
    R_true = [_as_rotation(t) for t in truth]
    sym = [axis_rotation(axis, 2 * np.pi * k / symmetry_order) for k in range(symmetry_order)]
    M = len(est)
    D = np.zeros((M, M))
    for i in range(M):
        for j in range(i + 1, M):
            rel_hat = R_hat[i].T @ R_hat[j]
            best = np.inf
            for S in sym:
                theta = rotation_angle_between(rel_hat, R_true[i] @ S.T @ R_true[j].T)
                best = min(best, theta, np.pi - theta)
            D[i, j] = D[j, i] = np.degrees(best)
    iu = np.triu_indices(M, 1)
    vals = D[iu]
    mean = float(vals.mean()) if vals.size else 0.0
    std = float(vals.std()) if vals.size else 0.0
    return ErrorReport(D, mean, std)

"""Closed-form weighted rigid alignment (weighted Kabsch / Procrustes)."""

from __future__ import annotations

import numpy as np

from .core import DegenerateConfiguration, RigidTransform, ValidationError

RANK_TOL = 1e-12


def procrustes_from_moments(total_weight, source_mean, target_mean, cross_cov):
    """Solve the weighted alignment from its sufficient statistics.

    ``cross_cov`` is ``sum_n w_n (s_n - s_bar)(m_n - m_bar)^T``. Raises
    :class:`DegenerateConfiguration` when the weights vanish or the
    cross-covariance has rank < 2.
    """
    if not total_weight > 0 or not np.isfinite(total_weight):
        raise DegenerateConfiguration("sum of weights must be positive")
    H = np.asarray(cross_cov, dtype=float)
    U, S, Vt = np.linalg.svd(H)
    if S[0] <= 0 or S[1] <= RANK_TOL * S[0]:
        raise DegenerateConfiguration(
            f"cross-covariance has rank < 2 (singular values {S})")
    V = Vt.T
    d = 1.0 if np.linalg.det(V @ U.T) > 0 else -1.0
    R = V @ np.diag([1.0, 1.0, d]) @ U.T
    t = target_mean - R @ source_mean
    return RigidTransform(R, t)


def weighted_moments(sources, targets, weights):
    sources = np.asarray(sources, dtype=float)
    targets = np.asarray(targets, dtype=float)
    w = np.asarray(weights, dtype=float).reshape(-1)
    total = w.sum()
    if not total > 0:
        raise DegenerateConfiguration("sum of weights must be positive")
    s_bar = w @ sources / total
    m_bar = w @ targets / total
    H = (sources - s_bar).T @ (w[:, None] * (targets - m_bar))
    return total, s_bar, m_bar, H


def weighted_procrustes(sources, targets, weights):
    """Rigid transform minimizing ``sum w ||R s + t - m||^2``.

    Parameters
    ----------
    sources, targets : (N, 3) arrays of corresponding points
    weights : (N,) nonnegative weights with a positive sum

    Returns
    -------
    RigidTransform mapping sources onto targets.
    """
    w = np.asarray(weights, dtype=float)
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValidationError("weights must be finite and nonnegative")
    return procrustes_from_moments(*weighted_moments(sources, targets, w))


def alignment_cost(transform, sources, targets, weights):
    r = transform.apply(sources) - np.asarray(targets, dtype=float)
    return float(np.asarray(weights, dtype=float) @ np.sum(r * r, axis=1))

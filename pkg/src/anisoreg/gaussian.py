"""Gaussian identities for points observed through known localization noise.

A clean point ``y`` with ``phi(y) ~ N(mu, s2 I)`` observed as
``y_obs ~ N(y, S)`` has marginal ``phi(y_obs) ~ N(mu, s2 I + R S R^T)`` and
posterior ``phi(y) | y_obs ~ N(y_hat, (I - W) s2)`` with
``W = s2 (s2 I + R S R^T)^-1`` and ``y_hat = mu + W (phi(y_obs) - mu)``.

The scalar functions here work on one point and use Cholesky solves. The
batched kernels (``noise_eigh`` and friends) serve the EM engine: since every
component covariance is ``s2 I``, diagonalizing the noise covariance once per
point diagonalizes ``s2 I + R S R^T`` for every component and every rotation.
"""

from __future__ import annotations

import numpy as np

from .core import PSD_JITTER, SingularCovariance

LOG_2PI = np.log(2.0 * np.pi)


def rotate_covariance(cov, r):
    """``R @ cov @ R.T``; ``cov`` may be a single matrix or a stack."""
    r = np.asarray(r, dtype=float)
    out = r @ np.asarray(cov, dtype=float) @ r.T
    return 0.5 * (out + np.swapaxes(out, -1, -2))


def _cholesky(cov):
    cov = np.asarray(cov, dtype=float)
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        pass
    jitter = PSD_JITTER * max(np.trace(cov), np.finfo(float).tiny)
    try:
        return np.linalg.cholesky(cov + jitter * np.eye(3))
    except np.linalg.LinAlgError:
        raise SingularCovariance("covariance is not positive definite") from None


def gaussian_logpdf(x, mean, cov):
    """log N(x; mean, cov) for one point or an ``(N, 3)`` array of points."""
    x = np.asarray(x, dtype=float)
    L = _cholesky(cov)
    d = (x - np.asarray(mean, dtype=float)).reshape(-1, 3)
    z = np.linalg.solve(L, d.T)
    maha = np.sum(z * z, axis=0)
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    out = -0.5 * (3 * LOG_2PI + logdet + maha)
    return out[0] if x.ndim == 1 else out


def marginal_covariance(noise, rotation, sigma2):
    return sigma2 * np.eye(3) + rotate_covariance(noise, rotation)


def marginal_component_logpdf(y_obs, noise, t, mu, sigma2):
    """log of the clean-point marginal for a single mixture component."""
    if not sigma2 > 0:
        raise SingularCovariance("component variance must be positive")
    x = t.apply(y_obs)
    return gaussian_logpdf(x, mu, marginal_covariance(noise, t.rotation, sigma2))


def marginal_component_density(y_obs, noise, t, mu, sigma2):
    """N(phi(y_obs); mu, sigma2 I + R noise R^T)."""
    return float(np.exp(marginal_component_logpdf(y_obs, noise, t, mu, sigma2)))


def posterior_gain_and_mean(y_obs, noise, t, mu, sigma2):
    """Gain ``W`` and denoised mean ``y_hat`` of the clean point (aligned frame).

    ``W = sigma2 (sigma2 I + R noise R^T)^-1`` is computed from a Cholesky
    solve rather than an explicit inverse.
    """
    mu = np.asarray(mu, dtype=float)
    L = _cholesky(marginal_covariance(noise, t.rotation, sigma2))
    # S^-1 via two triangular solves against the identity; S is symmetric so W = sigma2 S^-1
    s_inv = np.linalg.solve(L.T, np.linalg.solve(L, np.eye(3)))
    W = sigma2 * s_inv
    W = 0.5 * (W + W.T)
    y_hat = W @ (t.apply(y_obs) - mu) + mu
    return W, y_hat


def posterior_covariance(W, sigma2):
    """``(I - W) sigma2``, symmetrized."""
    P = (np.eye(3) - np.asarray(W)) * sigma2
    return 0.5 * (P + P.T)


# ---------------------------------------------------------------------------
# batched kernels


def noise_eigh(covs):
    """Eigen-decomposition of a stack of noise covariances.

    Returns ``(lam, Q)`` with ``covs[i] = Q[i] @ diag(lam[i]) @ Q[i].T``.
    Tiny negative eigenvalues from round-off are clamped to zero.
    """
    lam, Q = np.linalg.eigh(np.asarray(covs, dtype=float))
    return np.maximum(lam, 0.0), Q


def component_log_densities(x, lam, Qr, means, variances):
    """Per point and component: coordinates, denominators and log densities.

    ``x`` are transformed points ``(N, 3)``; ``Qr = R @ Q`` is the rotated
    noise eigenbasis ``(N, 3, 3)``; ``lam`` the noise eigenvalues ``(N, 3)``.
    Returns ``z`` (``(N, K, 3)``, offsets ``x - mu_k`` in the eigenbasis),
    ``s`` (``(N, K, 3)``, eigenvalues ``sigma_k^2 + lam``) and ``logN``
    (``(N, K)``).
    """
    d = x[:, None, :] - means[None, :, :]
    z = np.matmul(d, Qr)
    s = variances[None, :, None] + lam[:, None, :]
    logN = -0.5 * (3 * LOG_2PI + np.log(s).sum(axis=2) + (z * z / s).sum(axis=2))
    return z, s, logN


def posterior_means(z, s, Qr, means, variances):
    """Denoised means ``mu_k + W (x - mu_k)`` for every (point, component)."""
    shrink = variances[None, :, None] / s
    return means[None, :, :] + np.matmul(shrink * z, np.swapaxes(Qr, 1, 2))


def posterior_trace(lam, variances):
    """``trace((I - W) sigma_k^2)`` for every (point, component)."""
    v = variances[None, :, None]
    return (v * lam[:, None, :] / (v + lam[:, None, :])).sum(axis=2)


def posterior_std(lam, variances):
    """Square roots of the eigenvalues of ``(I - W) sigma_k^2``, ``(N, K, 3)``."""
    v = variances[None, :, None]
    lam = lam[:, None, :]
    return np.sqrt(np.maximum(v * lam / (v + lam), 0.0))


def gain_matrices(lam, Qr, variances):
    """Materialize ``W`` for every (point, component), ``(N, K, 3, 3)``."""
    g = variances[None, :, None] / (variances[None, :, None] + lam[:, None, :])
    return np.einsum("nia,nka,nja->nkij", Qr, g, Qr)

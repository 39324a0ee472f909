"""Joint multiview registration by EM over a shared isotropic GMM.

Two noise models share this engine:

* ``Mode.PROPOSED``: every observed point carries a known noise covariance;
  clean points are latent. Transforms are updated from one posterior sample
  per (point, component) and the mixture from closed-form posterior moments,
  with a fresh E-step between the two updates (SAGE schedule).
* ``Mode.BASELINE``: the classic JRMPC model where the component variance
  absorbs all noise, iterated with the ECM schedule (one E-step).

Each cloud is processed independently inside an iteration so that peak
memory is one cloud's ``(N, K, 3)`` arrays, not all clouds at once.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from . import gaussian as ga
from .core import (
    DegenerateConfiguration,
    GmmModel,
    InsufficientPoints,
    Mode,
    ObservedCloud,
    RegistrationConfig,
    RigidTransform,
    Schedule,
    ValidationError,
)
from .procrustes import procrustes_from_moments

log = logging.getLogger(__name__)

MOVING_WINDOW = 5
# clouds are batched together while their (N, K, 3) arrays stay below this
BATCH_ELEMENTS = 1 << 20


@dataclass
class CloudEStep:
    """E-step quantities for one cloud.

    ``alpha`` is ``(N, K + 1)`` with the outlier class last. In proposed mode
    ``y_hat`` (``(N, K, 3)``) holds the denoised means in the aligned frame,
    ``post_trace`` the traces of the posterior covariances and ``samples``
    (after :func:`sample_clean_points`) the clean-point draws mapped back to
    the cloud frame. Gains are kept factored as the rotated noise eigenbasis
    ``basis`` and eigenvalues ``lam``; :meth:`gains` materializes them.
    """

    alpha: np.ndarray
    loglik: float
    transform: RigidTransform
    variances: np.ndarray
    points: np.ndarray
    lam: Optional[np.ndarray] = None
    basis: Optional[np.ndarray] = None
    y_hat: Optional[np.ndarray] = None
    post_trace: Optional[np.ndarray] = None
    samples: Optional[np.ndarray] = None

    def gains(self):
        if self.basis is None:
            return None
        return ga.gain_matrices(self.lam, self.basis, self.variances)

    def posterior_covariances(self):
        """``(I - W) sigma_k^2`` for every (point, component)."""
        if self.basis is None:
            return None
        v = self.variances[None, :, None]
        e = v * self.lam[:, None, :] / (v + self.lam[:, None, :])
        return np.einsum("nia,nka,nja->nkij", self.basis, e, self.basis)


@dataclass
class EStepState:
    mode: Mode
    clouds: List[CloudEStep]

    @property
    def alpha(self):
        return [c.alpha for c in self.clouds]

    @property
    def loglik(self):
        return float(sum(c.loglik for c in self.clouds))


@dataclass
class LikelihoodTrace:
    mode: Mode
    values: List[float] = field(default_factory=list)

    @property
    def iterations(self):
        return np.arange(len(self.values))

    def is_non_decreasing(self, slack=1e-8):
        v = np.asarray(self.values)
        return bool(np.all(np.diff(v) >= -slack))


@dataclass
class RegistrationResult:
    transforms: List[RigidTransform]
    gmm: GmmModel
    trace: LikelihoodTrace
    n_iter: int
    converged: bool
    config: RegistrationConfig

    @property
    def loglik(self):
        return self.trace.values[-1]


def noise_bases(clouds):
    """Noise eigen-decompositions, computed once per run."""
    return [ga.noise_eigh(c.noise_covs) for c in clouds]


def _log_weights(gmm):
    with np.errstate(divide="ignore"):
        logp = np.log(gmm.weights[:-1])
        log_out = np.log(gmm.outlier_weight / gmm.hull_volume) if gmm.outlier_weight > 0 else -np.inf
    return logp, log_out


def _cloud_frame(cloud, transform, mode, basis=None):
    x = transform.apply(cloud.points)
    if mode is Mode.PROPOSED:
        lam, Q = basis if basis is not None else ga.noise_eigh(cloud.noise_covs)
        return x, lam, transform.rotation @ Q
    n = len(x)
    return x, np.zeros((n, 3)), np.broadcast_to(np.eye(3), (n, 3, 3))


def _responsibilities(logN, gmm):
    logp, log_out = _log_weights(gmm)
    terms = np.empty((len(logN), gmm.n_components + 1))
    terms[:, :-1] = logN + logp
    terms[:, -1] = log_out
    top = terms.max(axis=1, keepdims=True)
    top[~np.isfinite(top)] = 0.0
    e = np.exp(terms - top)
    tot = e.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore"):
        lse = np.log(tot) + top
    return e / tot, lse[:, 0]


def _estep_cloud(cloud, transform, gmm, mode, basis=None, posterior=True):
    return _estep_group([cloud], [transform], gmm, mode, [basis], posterior)[0]


def _estep_group(clouds, transforms, gmm, mode, bases, posterior=True):
    """E-step on several clouds in one batch of point rows."""
    frames = [_cloud_frame(c, t, mode, b) for c, t, b in zip(clouds, transforms, bases)]
    x = np.concatenate([f[0] for f in frames])
    lam = np.concatenate([f[1] for f in frames])
    Qr = np.concatenate([f[2] for f in frames])
    z, s, logN = ga.component_log_densities(x, lam, Qr, gmm.means, gmm.variances)
    alpha, lse = _responsibilities(logN, gmm)
    want = mode is Mode.PROPOSED and posterior
    if want:
        y_hat = ga.posterior_means(z, s, Qr, gmm.means, gmm.variances)
        post_trace = ga.posterior_trace(lam, gmm.variances)
    out, lo = [], 0
    for cloud, t in zip(clouds, transforms):
        hi = lo + len(cloud.points)
        st = CloudEStep(alpha=alpha[lo:hi], loglik=float(lse[lo:hi].sum()), transform=t,
                        variances=gmm.variances, points=cloud.points)
        if want:
            st.lam, st.basis = lam[lo:hi], Qr[lo:hi]
            st.y_hat, st.post_trace = y_hat[lo:hi], post_trace[lo:hi]
        out.append(st)
        lo = hi
    return out


def _groups(clouds, K):
    """Consecutive index ranges whose ``(N, K, 3)`` arrays fit the batch budget."""
    groups, cur, size = [], [], 0
    for j, c in enumerate(clouds):
        n = len(c.points) * K * 3
        if cur and size + n > BATCH_ELEMENTS:
            groups.append(cur)
            cur, size = [], 0
        cur.append(j)
        size += n
    if cur:
        groups.append(cur)
    return groups


def _estep_all(clouds, transforms, gmm, mode, bases, posterior=True):
    bases = bases or [None] * len(clouds)
    out = []
    for g in _groups(clouds, gmm.n_components):
        out.extend(_estep_group([clouds[j] for j in g], [transforms[j] for j in g], gmm, mode,
                                [bases[j] for j in g], posterior))
    return out


def e_step(clouds, transforms, gmm, mode=Mode.PROPOSED, bases=None):
    """Responsibilities (with the outlier class) and, in proposed mode, the
    gains and denoised means of every (point, component) pair."""
    mode = Mode(mode)
    if len(clouds) != len(transforms):
        raise ValidationError("need one transform per cloud")
    return EStepState(mode, _estep_all(clouds, transforms, gmm, mode, bases))


def _sample_cloud(st, rng, samples_per_point=1):
    std = ga.posterior_std(st.lam, st.variances)
    xi = rng.standard_normal(st.y_hat.shape)
    for _ in range(samples_per_point - 1):
        xi += rng.standard_normal(st.y_hat.shape)
    if samples_per_point > 1:
        xi /= samples_per_point
    y_s = st.y_hat + np.matmul(std * xi, np.swapaxes(st.basis, 1, 2))
    t = st.transform
    st.samples = (y_s - t.translation) @ t.rotation
    return st


def sample_clean_points(state, gmm, transforms, rng, samples_per_point=1):
    """Draw clean points from each pair's posterior and map them back to the
    cloud frame with the transform used in the E-step.

    One child generator is spawned per cloud so the draws do not depend on
    processing order. With ``samples_per_point > 1`` the stored sample is the
    average of the draws, which is all the rigid update needs.
    """
    if state.mode is not Mode.PROPOSED:
        raise ValidationError("sampling only applies to the proposed mode")
    rngs = rng.spawn(len(state.clouds))
    for st, t, r in zip(state.clouds, transforms, rngs):
        if st.transform is not t and not np.array_equal(st.transform.rotation, t.rotation):
            raise ValidationError("state was computed with different transforms")
        _sample_cloud(st, r, samples_per_point)
    return state


def _rigid_cloud(st, means, variances):
    K = len(variances)
    w = st.alpha[:, :K] / variances
    total = w.sum()
    prev = st.transform
    if not total > 0:
        return prev
    wk = w.sum(axis=0)
    m_bar = wk @ means / total
    if st.samples is not None:
        ws = w[:, :, None] * st.samples
        s_bar = ws.sum(axis=(0, 1)) / total
        H = (ws.sum(axis=0) - wk[:, None] * s_bar).T @ (means - m_bar)
    else:
        s_bar = w.sum(axis=1) @ st.points / total
        H = (st.points - s_bar).T @ (w @ (means - m_bar))
    try:
        return procrustes_from_moments(total, s_bar, m_bar, H)
    except DegenerateConfiguration:
        # rotation unidentifiable: keep it, refit the translation
        return RigidTransform(prev.rotation, m_bar - prev.rotation @ s_bar)


def m_rigid(state, gmm):
    """Per-cloud weighted Procrustes of sources onto component means with
    weights ``alpha / sigma_k^2``; sources are the clean-point samples in
    proposed mode and the observed points in baseline mode."""
    if state.mode is Mode.PROPOSED and any(c.samples is None for c in state.clouds):
        raise ValidationError("proposed mode needs samples before the rigid step")
    return [_rigid_cloud(st, gmm.means, gmm.variances) for st in state.clouds]


class _GmmStats:
    """Running sums for the mixture update, centered on the old means."""

    def __init__(self, center):
        self.center = center
        K = len(center)
        self.n = np.zeros(K)
        self.s1 = np.zeros((K, 3))
        self.s2 = np.zeros(K)

    def add_posterior(self, alpha, y_hat, post_trace):
        d = y_hat - self.center
        self.n += alpha.sum(axis=0)
        self.s1 += (alpha[:, :, None] * d).sum(axis=0)
        self.s2 += (alpha * (np.sum(d * d, axis=2) + post_trace)).sum(axis=0)

    def add_points(self, alpha, x):
        d = x[:, None, :] - self.center
        self.n += alpha.sum(axis=0)
        self.s1 += (alpha[:, :, None] * d).sum(axis=0)
        self.s2 += (alpha * np.sum(d * d, axis=2)).sum(axis=0)

    def finalize(self, gmm, fix_weights):
        n = self.n
        ok = n > 1e-300
        shift = np.zeros_like(self.s1)
        shift[ok] = self.s1[ok] / n[ok, None]
        means = np.where(ok[:, None], self.center + shift, gmm.means)
        var = np.where(ok, (self.s2 / np.where(ok, n, 1.0) - np.sum(shift ** 2, axis=1)) / 3.0,
                       gmm.variances)
        var = np.maximum(var, gmm.variance_floor)
        var = np.maximum(var, np.finfo(float).tiny)
        weights = gmm.weights
        if not fix_weights and n.sum() > 0:
            weights = np.empty_like(gmm.weights)
            weights[:-1] = (1.0 - gmm.outlier_weight) * n / n.sum()
            weights[-1] = gmm.outlier_weight
            weights = weights / weights.sum()
        return gmm.replace(means=means, variances=var, weights=weights)


def m_gmm(clouds, transforms, state, gmm, config):
    """Closed-form mixture update.

    Proposed mode expects ``state`` computed at ``transforms`` (the second
    E-step of the SAGE schedule) and uses the posterior moments
    ``E[phi(y)] = y_hat`` and ``E[|phi(y) - mu|^2] = |y_hat - mu|^2 + tr P``.
    Baseline mode uses the transformed observed points.
    """
    K = gmm.n_components
    stats = _GmmStats(gmm.means)
    for cloud, t, st in zip(clouds, transforms, state.clouds):
        if state.mode is Mode.PROPOSED:
            stats.add_posterior(st.alpha[:, :K], st.y_hat, st.post_trace)
        else:
            stats.add_points(st.alpha[:, :K], t.apply(cloud.points))
    return stats.finalize(gmm, config.fix_weights)


def log_likelihood(clouds, transforms, gmm, mode=Mode.PROPOSED, bases=None):
    """Sum over points of log(sum_k p_k N(phi(y); mu_k, s_k I [+ R S R^T]) + p_out / h)."""
    mode = Mode(mode)
    return float(sum(st.loglik for st in _estep_all(clouds, transforms, gmm, mode, bases,
                                                     posterior=False)))


def sage_iteration(clouds, transforms, gmm, config, rng, bases=None):
    """One SAGE iteration: E, (sample), rigid update, E at the new
    transforms, mixture update, then the log-likelihood at the new parameters.

    Returns ``(transforms, gmm, loglik)``.
    """
    return _sage_step(clouds, transforms, gmm, config, rng, bases)[:3]


def _sage_step(clouds, transforms, gmm, config, rng, bases=None, first=None):
    """SAGE iteration that also returns the E-step at the new parameters.

    That final E-step gives the log-likelihood and, passed back as
    ``first``, doubles as the first E-step of the next iteration.
    """
    mode = config.mode
    rngs = rng.spawn(len(clouds)) if mode is Mode.PROPOSED else [None] * len(clouds)
    if first is None:
        first = _estep_all(clouds, transforms, gmm, mode, bases)
    new_t = []
    for st, r in zip(first, rngs):
        if mode is Mode.PROPOSED:
            _sample_cloud(st, r, config.samples_per_point)
        new_t.append(_rigid_cloud(st, gmm.means, gmm.variances))
    K = gmm.n_components
    stats = _GmmStats(gmm.means)
    for cloud, t, st in zip(clouds, new_t, _estep_all(clouds, new_t, gmm, mode, bases)):
        if mode is Mode.PROPOSED:
            stats.add_posterior(st.alpha[:, :K], st.y_hat, st.post_trace)
        else:
            stats.add_points(st.alpha[:, :K], t.apply(cloud.points))
    new_gmm = stats.finalize(gmm, config.fix_weights)
    last = _estep_all(clouds, new_t, new_gmm, mode, bases)
    return new_t, new_gmm, float(sum(st.loglik for st in last)), last


def ecm_iteration(clouds, transforms, gmm, config, rng=None, bases=None):
    """One ECM iteration (single E-step), the schedule of the JRMPC baseline."""
    return _ecm_step(clouds, transforms, gmm, config, bases)[:3]


def _ecm_step(clouds, transforms, gmm, config, bases=None, first=None):
    if config.mode is Mode.PROPOSED:
        raise ValidationError("the proposed mode runs with the SAGE schedule")
    if first is None:
        first = _estep_all(clouds, transforms, gmm, config.mode, bases)
    state = EStepState(config.mode, first)
    new_t = m_rigid(state, gmm)
    new_gmm = m_gmm(clouds, new_t, state, gmm, config)
    last = _estep_all(clouds, new_t, new_gmm, config.mode, bases)
    return new_t, new_gmm, float(sum(st.loglik for st in last)), last


def iterate(clouds, transforms, gmm, config, rng, bases=None):
    if config.resolved_schedule is Schedule.SAGE:
        return sage_iteration(clouds, transforms, gmm, config, rng, bases)
    return ecm_iteration(clouds, transforms, gmm, config, rng, bases)


def _bounding_box(points):
    lo, hi = points.min(axis=0), points.max(axis=0)
    diag = float(np.linalg.norm(hi - lo))
    return lo, hi, diag


def gmm_init(clouds, transforms, config, rng):
    """Means at K distinct transformed points, large equal variances and
    fixed priors with ``p_out / (K p_1) = outlier_fraction``."""
    pts = np.concatenate([t.apply(c.points) for c, t in zip(clouds, transforms)])
    K = config.n_components
    if len(pts) < K:
        raise InsufficientPoints(f"{len(pts)} points for {K} components")
    idx = rng.choice(len(pts), size=K, replace=False)
    lo, hi, diag = _bounding_box(pts)
    scale = diag if diag > 0 else 1.0
    extent = np.maximum(hi - lo, 1e-6 * scale)
    floor = config.variance_floor if config.variance_floor is not None else (1e-4 * scale) ** 2
    var0 = max((scale / 2.0) ** 2, floor)
    g = config.outlier_fraction
    weights = np.empty(K + 1)
    weights[:-1] = 1.0 / (K * (1.0 + g))
    weights[-1] = g / (1.0 + g)
    return GmmModel(means=pts[np.sort(idx)], variances=np.full(K, var0), weights=weights,
                    hull_volume=float(np.prod(extent)), variance_floor=floor)


def _should_stop(values, mode, tol):
    if mode is Mode.PROPOSED:
        if len(values) < MOVING_WINDOW + 1:
            return False
        cur = np.mean(values[-MOVING_WINDOW:])
        prev = np.mean(values[-MOVING_WINDOW - 1:-1])
    else:
        if len(values) < 2:
            return False
        cur, prev = values[-1], values[-2]
    return bool(abs(cur - prev) <= tol * abs(cur))


def run_registration(clouds: Sequence[ObservedCloud], init_transforms, config: RegistrationConfig,
                     rng=None, gmm=None) -> RegistrationResult:
    """Register ``clouds`` starting from ``init_transforms``.

    Iterates until the relative change of the log-likelihood (of its
    5-iteration moving average in the stochastic mode) drops below
    ``config.rel_loglik_tol`` or ``config.max_iters`` is reached. Not
    converging is reported through ``result.converged``, not raised.
    """
    if len(clouds) < 1 or len(clouds) != len(init_transforms):
        raise ValidationError("need one initial transform per cloud")
    if config.mode is Mode.PROPOSED and config.resolved_schedule is not Schedule.SAGE:
        raise ValidationError("the proposed mode runs with the SAGE schedule")
    if rng is None:
        rng = np.random.default_rng(config.rng_seed)
    init_rng, iter_rng = rng.spawn(2)
    transforms = list(init_transforms)
    if gmm is None:
        gmm = gmm_init(clouds, transforms, config, init_rng)
    bases = noise_bases(clouds) if config.mode is Mode.PROPOSED else None
    trace = LikelihoodTrace(config.mode, [log_likelihood(clouds, transforms, gmm, config.mode, bases)])
    converged = False
    n_iter = 0
    sage = config.resolved_schedule is Schedule.SAGE
    state = None
    for n_iter in range(1, config.max_iters + 1):
        if sage:
            transforms, gmm, ll, state = _sage_step(clouds, transforms, gmm, config, iter_rng,
                                                    bases, state)
        else:
            transforms, gmm, ll, state = _ecm_step(clouds, transforms, gmm, config, bases, state)
        trace.values.append(ll)
        if _should_stop(trace.values, config.mode, config.rel_loglik_tol):
            converged = True
            break
    log.debug("%s: %d iterations, loglik %.6g", config.mode.value, n_iter, trace.values[-1])
    return RegistrationResult(transforms, gmm, trace, n_iter, converged, config)


def best_of_restarts(clouds, init_transforms, config, restarts=5, rng=None):
    """Run ``restarts`` registrations with different mixture initializations
    and keep the one with the highest final log-likelihood."""
    if restarts < 1:
        raise ValidationError("restarts must be >= 1")
    if rng is None:
        rng = np.random.default_rng(config.rng_seed)
    best = None
    for child in rng.spawn(restarts):
        res = run_registration(clouds, init_transforms, config, child)
        if best is None or res.loglik > best.loglik:
            best = res
    return best

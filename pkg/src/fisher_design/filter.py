"""Particle filtering with conditional-Gaussian observation updates.

Particles for every candidate parameter value are driven by the *same*
Gaussian deviates: particle ``i`` reads noise stream ``i`` whatever its
``theta``.  Likelihood curves over the parameter grid are then smooth and
reproducible.

By default no weights are carried and no resampling is done: on the Euler
step that lands on an observation, each particle's Gaussian increment is
drawn conditionally on that observation, which keeps particles near the data.
The log-likelihood increment is the log of the ensemble-averaged predictive
density ``N(y; H m_i, H C_i H' + R)`` where ``m_i`` is the particle after the
drift and ``C_i = dt Sigma(x_i)``.  The spread of these predictive densities
is reported as an effective-sample-size diagnostic.

With ``resample=True`` the same predictive densities are used as weights
and the ensemble is systematically resampled after every observation; this
is the standard optimal-proposal particle filter and converges to the exact
filter for linear-Gaussian models.  Resampling uses one uniform per
observation (shared by all thetas) read from the stream just past the
particle block.

Arrays are laid out ``(batch, theta, particle, dim)`` so that many
independent trials can be filtered at once.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp, ndtr

from .exceptions import NumericOverflowError, SingularInnovationError
from .models import ObservationModel
from .noise import standard_normals

_LOG_2PI = np.log(2.0 * np.pi)


def _inv_and_logdet(S):
    """Batched inverse and log-determinant of small SPD matrices (..., k, k)."""
    k = S.shape[-1]
    if k == 1:
        s = S[..., 0, 0]
        if np.any(s <= 0):
            raise SingularInnovationError("innovation variance is not positive")
        return (1.0 / s)[..., None, None], np.log(s)
    if k == 2:
        a, b, c, d = S[..., 0, 0], S[..., 0, 1], S[..., 1, 0], S[..., 1, 1]
        det = a * d - b * c
        if np.any(det <= 0):
            raise SingularInnovationError("innovation covariance is singular")
        inv = np.empty_like(S)
        inv[..., 0, 0] = d / det
        inv[..., 0, 1] = -b / det
        inv[..., 1, 0] = -c / det
        inv[..., 1, 1] = a / det
        return inv, np.log(det)
    sign, logdet = np.linalg.slogdet(S)
    if np.any(sign <= 0):
        raise SingularInnovationError("innovation covariance is singular")
    return np.linalg.inv(S), logdet


def gaussian_update(m, C_diag, H, R_diag, y, z, v):
    """Exact conditional draw and predictive log-density for one linear observation.

    m: predicted means (..., d); C_diag: prior step variances (..., d);
    y: observation broadcastable to (..., k); z: (..., d) and v: (..., k)
    standard normals.  Returns ``(x_new, logpred)`` where
    ``x_new ~ N(m + K(y - Hm), (I - KH) C)``.
    """
    H = np.asarray(H, dtype=float)
    R = np.asarray(R_diag, dtype=float)
    HC = H * C_diag[..., None, :]                      # (..., k, d)
    S = HC @ H.T + np.diag(R)                          # (..., k, k)
    S_inv, logdet = _inv_and_logdet(S)
    K = np.swapaxes(HC, -1, -2) @ S_inv                # (..., d, k)
    resid = y - m @ H.T                                # (..., k)
    maha = np.einsum("...a,...ab,...b->...", resid, S_inv, resid)
    logpred = -0.5 * (maha + logdet + H.shape[0] * _LOG_2PI)
    prior_draw = np.sqrt(C_diag) * z
    innov = resid - prior_draw @ H.T - np.sqrt(R) * v
    x_new = m + prior_draw + np.einsum("...dk,...k->...d", K, innov)
    return x_new, logpred


def kalman_posterior(m, C, H, R, y):
    """Textbook Kalman update for a single Gaussian prior (reference path)."""
    m = np.atleast_1d(np.asarray(m, dtype=float))
    C = np.atleast_2d(np.asarray(C, dtype=float))
    H = np.atleast_2d(np.asarray(H, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    S = H @ C @ H.T + R
    K = C @ H.T @ np.linalg.inv(S)
    return m + K @ (np.atleast_1d(y) - H @ m), (np.eye(len(m)) - K @ H) @ C


class ParticleEnsemble:
    """Coupled ensembles for a grid of parameter values.

    X has shape ``(B, M, N, d)``.  ``streams`` is a ``(B, N)`` array of noise
    stream ids: particle ``n`` of trial ``b`` reads stream ``streams[b, n]``
    for every theta.  Each step consumes one noise vector of length
    ``d + k`` per particle (the last ``k`` only on observation steps).
    """

    def __init__(self, model, thetas, x0, n_particles: int, seed: int, streams,
                 n_obs_channels: int = 0, chunk: int = 8, resample: bool = False,
                 resample_streams=None):
        thetas = np.atleast_1d(np.asarray(thetas, dtype=float))
        streams = np.asarray(streams, dtype=np.uint64)
        if streams.ndim == 1:
            streams = streams[None, :]
        if streams.shape[1] != n_particles:
            raise ValueError(f"need one stream per particle: {streams.shape[1]} != {n_particles}")
        self.model = model
        self.thetas = thetas
        self.seed = int(seed)
        self.streams = streams
        self.B, self.M, self.N, self.d = streams.shape[0], thetas.size, n_particles, model.dim
        self.k = int(n_obs_channels)
        self.noise_dim = self.d + self.k
        x0 = np.asarray(x0, dtype=float).reshape(-1, self.d)
        if x0.shape[0] not in (1, self.B):
            raise ValueError("x0 must be one state or one state per trial")
        self.X = np.broadcast_to(x0[:, None, None, :], (self.B, self.M, self.N, self.d)).copy()
        self.loglik = np.zeros((self.B, self.M))
        self.step = 0
        self.ess = []  # per observation: (B, M) effective sample size fraction
        self._chunk = max(1, int(chunk))
        self._cache_start = -1
        self._cache = None
        self._theta_b = thetas[None, :, None]
        self.resample = bool(resample)
        if resample_streams is None:
            resample_streams = streams[:, 0] + np.uint64(n_particles)
        self.resample_streams = np.asarray(resample_streams, dtype=np.uint64).reshape(self.B)
        self.n_updates = 0

    # noise -----------------------------------------------------------------
    def _noise(self, i):
        if not (self._cache_start <= i < self._cache_start + self._chunk) or self._cache is None:
            self._cache_start = i
            flat = standard_normals(self.seed, self.streams.ravel(), i * self.noise_dim,
                                    self._chunk * self.noise_dim)
            self._cache = flat.reshape(self.B, self.N, self._chunk, self.noise_dim)
        return self._cache[:, :, i - self._cache_start, :]

    def _u(self, u):
        u = np.asarray(u, dtype=float)
        return u.reshape(-1, 1, 1) if u.ndim else u

    # dynamics --------------------------------------------------------------
    def propagate(self, u, dt):
        """Unconditional Euler step for every particle."""
        eps = self._noise(self.step)[:, None, :, :self.d]
        X = self.X
        with np.errstate(over="ignore", invalid="ignore"):
            sd = np.sqrt(self.model.diffusion_diag(X))
            X = self.model.project(X + self.model.drift(X, self._theta_b, self._u(u)) * dt
                                   + np.sqrt(dt) * sd * eps)
        self._check(X)
        self.X = X
        self.step += 1
        return self

    def conditional_update(self, obs: ObservationModel, y, u, dt):
        """Euler step conditioned on observation ``y`` (shape (B, k) or (k,)).

        Returns the per-(trial, theta) log-likelihood increment.
        """
        if obs.n_channels != self.k:
            raise ValueError(f"ensemble was built for {self.k} observation channels, got {obs.n_channels}")
        noise = self._noise(self.step)
        z = noise[:, None, :, :self.d]
        v = noise[:, None, :, self.d:]
        X = self.X
        with np.errstate(over="ignore", invalid="ignore"):
            m = X + self.model.drift(X, self._theta_b, self._u(u)) * dt
            C = dt * self.model.diffusion_diag(X)
        y = np.asarray(y, dtype=float).reshape(-1, 1, 1, self.k)
        X_new, logpred = gaussian_update(m, C, obs.H, obs.R_diag, y, z, v)
        X_new = self.model.project(X_new)
        self._check(X_new)
        inc = logsumexp(logpred, axis=-1) - np.log(self.N)
        w = np.exp(logpred - logpred.max(axis=-1, keepdims=True))
        self.ess.append(w.sum(-1) ** 2 / (w * w).sum(-1) / self.N)
        if self.resample:
            X_new = self._systematic(X_new, w)
        self.X = X_new
        self.n_updates += 1
        self.loglik += inc
        self.step += 1
        return inc

    def _systematic(self, X, w):
        u = ndtr(standard_normals(self.seed, self.resample_streams, self.n_updates, 1))  # (B, 1)
        cdf = np.cumsum(w, axis=-1)
        cdf /= cdf[..., -1:]
        pos = (np.arange(self.N) + u[:, None, :]) / self.N          # (B, 1, N)
        pos = np.broadcast_to(pos, cdf.shape)
        idx = np.empty(cdf.shape, dtype=np.intp)
        for b in range(self.B):
            for m in range(self.M):
                idx[b, m] = np.searchsorted(cdf[b, m], pos[b, m], side="right")
        np.minimum(idx, self.N - 1, out=idx)
        return np.take_along_axis(X, idx[..., None], axis=2)

    def mean(self, theta_index: int = 0) -> np.ndarray:
        """Particle mean per trial for one theta, shape (B, d)."""
        return self.X[:, theta_index].mean(axis=1)

    def _check(self, X):
        if not np.all(np.isfinite(X)):
            b, m, n, _ = np.argwhere(~np.isfinite(X))[0]
            raise NumericOverflowError(
                f"particle {n} (trial {b}, theta={self.thetas[m]}) became non-finite at step {self.step}",
                state=X[b, m, n], step=self.step)


def propagate(ensemble: ParticleEnsemble, model, u, dt) -> ParticleEnsemble:
    if model is not ensemble.model:
        raise ValueError("ensemble was built for a different model")
    return ensemble.propagate(u, dt)


def conditional_update(ensemble: ParticleEnsemble, obs: ObservationModel, y, u, dt):
    inc = ensemble.conditional_update(obs, y, u, dt)
    return ensemble, inc


@dataclass
class LikelihoodCurve:
    thetas: np.ndarray
    loglik: np.ndarray

    def __post_init__(self):
        self.thetas = np.asarray(self.thetas, dtype=float)
        self.loglik = np.asarray(self.loglik, dtype=float)
        if self.thetas.shape != self.loglik.shape:
            raise ValueError("theta grid and log-likelihood values must align")
        if not np.all(np.isfinite(self.loglik)):
            raise ValueError("log-likelihood curve contains non-finite values")


@dataclass
class MleResult:
    estimate: float
    in_range: bool
    curve: LikelihoodCurve


def grid_mle(curve: LikelihoodCurve) -> MleResult:
    """Grid maximiser refined by a 3-point parabola; endpoint maxima are out of range."""
    th, L = curve.thetas, curve.loglik
    if th.size < 3:
        raise ValueError("grid MLE needs at least 3 grid points")
    j = int(np.argmax(L))
    if j == 0 or j == th.size - 1:
        return MleResult(float(th[j]), False, curve)
    denom = L[j - 1] - 2.0 * L[j] + L[j + 1]
    if denom == 0.0:
        return MleResult(float(th[j]), True, curve)
    h = 0.5 * (th[j + 1] - th[j - 1])
    est = th[j] + 0.5 * h * (L[j - 1] - L[j + 1]) / denom
    return MleResult(float(est), True, curve)


def grid_mle_batch(thetas, loglik):
    """Vectorised ``grid_mle`` over the leading axes of ``loglik``."""
    th = np.asarray(thetas, dtype=float)
    L = np.asarray(loglik, dtype=float)
    if th.size < 3:
        raise ValueError("grid MLE needs at least 3 grid points")
    j = np.argmax(L, axis=-1)
    interior = (j > 0) & (j < th.size - 1)
    jc = np.clip(j, 1, th.size - 2)
    Lm = np.take_along_axis(L, (jc - 1)[..., None], -1)[..., 0]
    L0 = np.take_along_axis(L, jc[..., None], -1)[..., 0]
    Lp = np.take_along_axis(L, (jc + 1)[..., None], -1)[..., 0]
    denom = Lm - 2.0 * L0 + Lp
    h = 0.5 * (th[jc + 1] - th[jc - 1])
    with np.errstate(divide="ignore", invalid="ignore"):
        shift = np.where(denom != 0.0, 0.5 * h * (Lm - Lp) / denom, 0.0)
    est = np.where(interior, th[jc] + shift, th[j])
    return est, interior


@dataclass
class FilterResult:
    curve: LikelihoodCurve
    estimates: np.ndarray          # (n_obs, d) particle means of the reference theta
    times: np.ndarray              # observation times
    min_ess: float                 # smallest effective-sample-size fraction seen
    ess: np.ndarray = field(repr=False, default=None)  # (n_obs, M)


def run_filter(model, obs: ObservationModel, observations, thetas, controls, dt: float,
               n_particles: int, x0, seed: int = 0, streams=None, reference_theta: int | None = None,
               chunk: int = 8, resample: bool = False) -> FilterResult:
    """Filter one observation record over a parameter grid.

    ``observations`` is ``(n_obs, k)``; observation ``j`` is taken at time
    ``(j + 1) * obs.period``.  ``controls`` is either a per-step schedule of
    length ``n_obs * steps_per_obs`` or a callable ``(estimate, t) -> u``
    queried after each observation (the value is held in between).
    """
    Y = np.asarray(observations, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    thetas = np.atleast_1d(np.asarray(thetas, dtype=float))
    if reference_theta is None:
        reference_theta = int(np.argmin(np.abs(thetas - 0.5 * (thetas[0] + thetas[-1]))))
    ens, estimates = filter_batch(model, obs, Y[None], thetas, controls, dt, n_particles, x0,
                                  seed, streams=None if streams is None else np.asarray(streams)[None],
                                  reference_theta=reference_theta, chunk=chunk, resample=resample)
    ess = np.array(ens.ess)[:, 0, :] if ens.ess else np.ones((0, thetas.size))
    return FilterResult(
        curve=LikelihoodCurve(thetas, ens.loglik[0]),
        estimates=estimates[0],
        times=obs.period * np.arange(1, Y.shape[0] + 1),
        min_ess=float(ess.min()) if ess.size else 1.0,
        ess=ess,
    )


def filter_batch(model, obs: ObservationModel, Y, thetas, controls, dt, n_particles, x0, seed,
                 streams=None, reference_theta: int = 0, chunk: int = 8, resample: bool = False):
    """Batch core of ``run_filter``: Y is ``(B, n_obs, k)``.

    ``controls``: ``(B, n_steps)`` schedule, a scalar, or a callable
    ``(estimates (B, d), t) -> (B,)`` evaluated after every observation.
    Returns the ensemble and the ``(B, n_obs, d)`` reference-theta estimates.
    """
    Y = np.asarray(Y, dtype=float)
    B, n_obs = Y.shape[:2]
    k_obs = obs.steps_per_observation(dt)
    n_steps = n_obs * k_obs
    if streams is None:
        streams = np.tile(np.arange(n_particles, dtype=np.uint64), (B, 1))
    ens = ParticleEnsemble(model, thetas, x0, n_particles, seed, streams,
                           n_obs_channels=obs.n_channels, chunk=chunk, resample=resample)
    feedback = callable(controls)
    if feedback:
        u = np.asarray(controls(ens.mean(reference_theta), 0.0), dtype=float)
    else:
        sched = np.asarray(controls, dtype=float)
        if sched.ndim == 0:
            sched = np.full((B, n_steps), float(sched))
        sched = np.broadcast_to(sched.reshape(-1, sched.shape[-1]), (B, sched.shape[-1]))
        if sched.shape[1] < n_steps:
            raise ValueError(f"control schedule has {sched.shape[1]} steps, need {n_steps}")
    estimates = np.empty((B, n_obs, model.dim))
    for j in range(n_obs):
        for s in range(k_obs):
            i = j * k_obs + s
            ui = u if feedback else sched[:, i]
            if s == k_obs - 1:
                ens.conditional_update(obs, Y[:, j], ui, dt)
            else:
                ens.propagate(ui, dt)
        estimates[:, j] = ens.mean(reference_theta)
        if feedback:
            u = np.asarray(controls(estimates[:, j], (j + 1) * obs.period), dtype=float)
    return ens, estimates

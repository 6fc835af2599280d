"""Comparison filters: stochastic EnKF, auxiliary bootstrap particle filter
(algebraic "ABS1" and SDE-increment "ABS2" likelihoods) and the exact
discrete Kalman filter used as the linear-Gaussian reference."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import ConfigError, NumericalOverflowError
from .ksfilter import Ensemble, _truth_or_nan, measurement_at
from .models import ObservationModel, ProcessModel, _gauss_logpdf
from .records import RunRecord
from .sde import RngStream, Stream, Trajectory, _first_bad_row, em_step

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class WeightedEnsemble:
    particles: np.ndarray
    weights: np.ndarray
    time_index: int = 0
    degenerate: bool = False

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (np.asarray(self.particles).shape[0],):
            raise ConfigError("one weight per particle is required")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ConfigError("weights must be non-negative and sum to one")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "particles", np.asarray(self.particles, dtype=float))

    @classmethod
    def uniform(cls, particles, time_index: int = 0) -> "WeightedEnsemble":
        particles = np.asarray(particles, dtype=float)
        n = particles.shape[0]
        return cls(particles, np.full(n, 1.0 / n), time_index)

    @property
    def N(self) -> int:
        return self.particles.shape[0]

    @property
    def ess(self) -> float:
        return float(1.0 / np.sum(self.weights ** 2))

    def mean(self) -> np.ndarray:
        return self.weights @ self.particles

    def std(self) -> np.ndarray:
        d = self.particles - self.mean()
        return np.sqrt(np.clip(self.weights @ (d ** 2), 0.0, None))


# -- shared observation terms ---------------------------------------------------------


def observation_terms(obs: ObservationModel, measurement, t: float, dt: float):
    """Return ``(z, predict, R)`` in measurement space.

    SDE-form: ``z = dY``, ``predict(X) = h(X) dt``, ``R = cov * dt``.
    Algebraic: ``z = y``, ``predict(X)`` is ``h(X)`` unwrapped around ``z``,
    ``R = cov(z)`` (moment-matched for mixtures).
    """
    z = np.asarray(measurement, dtype=float)
    if obs.form == "sde":
        R = obs.noise.cov(None) * dt
        return z, (lambda X: np.asarray(obs.observe(X, t), dtype=float) * dt), R
    R = obs.noise.cov(z)

    def pred(X):
        return z - obs.residual(z, np.asarray(obs.observe(X, t), dtype=float))

    return z, pred, R


def _loglik(obs: ObservationModel, z, pred_fn, R, X) -> np.ndarray:
    # far-off particles may overflow to -inf; _normalise treats those as zero weight
    with np.errstate(over="ignore", invalid="ignore"):
        resid = z - pred_fn(X)
        if obs.form == "sde":
            return _gauss_logpdf(resid, R)
        return obs.noise.logpdf(resid, z)


# -- EnKF -------------------------------------------------------------------------------


def enkf_step(ensemble: Ensemble, model: ProcessModel, obs: ObservationModel, measurement,
              t: float, dt: float, rng: RngStream, jitter: float = 1e-9):
    """Forecast by Euler-Maruyama, then a perturbed-observation analysis.

    Returns ``(analysis_ensemble, regularised_flag)``.
    """
    i = ensemble.time_index
    dB = rng.brownian(Stream.PREDICT, i, (ensemble.N, model.dim_noise), dt)
    X = em_step(model, ensemble.particles, t, dt, dB)
    z, pred, R = observation_terms(obs, measurement, t + dt, dt)
    HX = pred(X)
    N = X.shape[0]
    Xc = X - X.mean(axis=0)
    Hc = HX - HX.mean(axis=0)
    Pxh = np.einsum("ji,jl->il", Xc, Hc) / (N - 1)
    S = np.einsum("ji,jl->il", Hc, Hc) / (N - 1) + R
    regularised = False
    scale = max(1.0, float(np.abs(S).max()))
    if not np.all(np.isfinite(S)) or np.linalg.cond(S) > 1e12:
        S = S + jitter * scale * np.eye(S.shape[0])
        regularised = True
        log.debug("EnKF: innovation covariance regularised at step %d", i)
    K = np.linalg.solve(S, Pxh.T).T
    w, v = np.linalg.eigh(R)
    root = v * np.sqrt(np.clip(w, 0.0, None))
    eps = rng.normal(Stream.ENKF_PERTURB, i, (N, R.shape[0])) @ root.T
    innov = obs.residual(z + eps, HX) if obs.form == "algebraic" else (z + eps - HX)
    Xa = X + innov @ K.T
    row = _first_bad_row(Xa)
    if row is not None:
        raise NumericalOverflowError("EnKF analysis overflow", particle_index=row, time_index=i + 1)
    return Ensemble(Xa, i + 1), regularised


# -- auxiliary particle filter ----------------------------------------------------------


def systematic_resample(weights, u: float) -> np.ndarray:
    """Systematic resampling with one uniform ``u`` in [0, 1)."""
    w = np.asarray(weights, dtype=float)
    n = w.size
    cs = np.cumsum(w)
    cs[-1] = 1.0
    positions = (u + np.arange(n)) / n
    return np.minimum(np.searchsorted(cs, positions, side="right"), n - 1)


def _normalise(logw: np.ndarray):
    logw = np.where(np.isnan(logw), -np.inf, logw)
    if not np.any(np.isfinite(logw)):
        return np.full(logw.size, 1.0 / logw.size), True
    w = np.exp(logw - logsumexp(logw))
    w /= w.sum()
    return w, False


def abs_step(wens: WeightedEnsemble, model: ProcessModel, obs: ObservationModel, measurement,
             t: float, dt: float, rng: RngStream) -> WeightedEnsemble:
    """Auxiliary particle filter step with resampling every step.

    First-stage weights use the likelihood at the drift-only propagation of
    each particle; the second stage corrects by the ratio of likelihoods at the
    propagated particle and at its auxiliary point.  The observation model's
    ``form`` selects the algebraic (ABS1) or increment (ABS2) likelihood.
    """
    i = wens.time_index
    X = wens.particles
    N = X.shape[0]
    z, pred, R = observation_terms(obs, measurement, t + dt, dt)
    mu = X + np.asarray(model.drift(X, t), dtype=float) * dt
    ll_mu = _loglik(obs, z, pred, R, mu)
    first, fallback1 = _normalise(np.log(np.clip(wens.weights, 1e-300, None)) + ll_mu)
    first_ess = 1.0 / np.sum(first ** 2)
    idx = systematic_resample(first, float(rng.uniform(Stream.RESAMPLE, i)))
    dB = rng.brownian(Stream.PREDICT, i, (N, model.dim_noise), dt)
    Xn = em_step(model, X[idx], t, dt, dB)
    with np.errstate(invalid="ignore"):
        second, fallback2 = _normalise(_loglik(obs, z, pred, R, Xn) - ll_mu[idx])
    degenerate = fallback1 or fallback2 or first_ess < 1.5
    if degenerate:
        log.debug("ABS: degeneracy at step %d (first-stage ess %.3g)", i + 1, first_ess)
    return WeightedEnsemble(Xn, second, i + 1, degenerate)


# -- Kalman oracle ----------------------------------------------------------------------


def kalman_oracle(A, H, Q, R, x0, P0, measurements):
    """Discrete Kalman filter; ``measurements[i]`` observes the state after the
    ``i``-th prediction.  Returns a list of ``(mean, covariance)`` pairs."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    H = np.atleast_2d(np.asarray(H, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    n, q = A.shape[0], H.shape[0]
    if A.shape != (n, n) or Q.shape != (n, n) or H.shape != (q, n) or R.shape != (q, q):
        raise ConfigError("inconsistent Kalman filter dimensions")
    try:
        np.linalg.cholesky(R)
    except np.linalg.LinAlgError as exc:
        raise ConfigError("measurement noise covariance must be positive definite") from exc
    m = np.atleast_1d(np.asarray(x0, dtype=float)).copy()
    P = np.atleast_2d(np.asarray(P0, dtype=float)).copy()
    out = []
    for z in measurements:
        m = A @ m
        P = A @ P @ A.T + Q
        z = np.atleast_1d(np.asarray(z, dtype=float))
        S = H @ P @ H.T + R
        K = np.linalg.solve(S, H @ P).T
        m = m + K @ (z - H @ m)
        P = P - K @ S @ K.T
        P = 0.5 * (P + P.T)
        out.append((m.copy(), P.copy()))
    return out


def linear_gaussian_matrices(a: float, q: float, r: float, dt: float, exact: bool = False):
    """``(A, H, Q, R)`` for ``dx = a x dt + sqrt(q) dB``, ``dY = x dt + sqrt(r) dW``
    observed through increments of ``Y``.  ``exact`` uses the exact transition
    instead of the Euler-Maruyama one."""
    if exact:
        A = math.exp(a * dt)
        Q = q * dt if a == 0 else q * (math.exp(2 * a * dt) - 1.0) / (2 * a)
    else:
        A, Q = 1.0 + a * dt, q * dt
    return [[A]], [[dt]], [[Q]], [[r * dt]]


# -- runners --------------------------------------------------------------------------


def _record(name, rng, traj, est, std, ess, events, state_names):
    M1, n = est.shape
    return RunRecord(filter_name=name, seed=int(rng.seed) if rng is not None else 0,
                     times=np.asarray(traj.times, dtype=float), estimates=est, stds=std,
                     truth=_truth_or_nan(traj, n), ks_stat=np.full(M1, np.nan),
                     ks_pass=np.zeros(M1, dtype=bool), beta1=np.full(M1, np.nan),
                     innovations=np.full((M1, 1), np.nan), ess=ess, events=events,
                     state_names=tuple(state_names))


def enkf_run(traj: Trajectory, model: ProcessModel, obs: ObservationModel, N: int,
             x0_sampler, rng: RngStream, state_names=()) -> RunRecord:
    sample = x0_sampler.sample if hasattr(x0_sampler, "sample") else x0_sampler
    ens = Ensemble(sample(N, rng), 0)
    M, dt = traj.n_steps, traj.dt
    est = np.empty((M + 1, ens.n))
    std = np.empty((M + 1, ens.n))
    est[0], std[0] = ens.mean(), ens.std()
    regularised = 0
    for i in range(M):
        ens, flag = enkf_step(ens, model, obs, measurement_at(traj, obs, i),
                              float(traj.times[i]), dt, rng)
        regularised += int(flag)
        est[i + 1], std[i + 1] = ens.mean(), ens.std()
    return _record("enkf", rng, traj, est, std, np.full(M + 1, float(N)),
                   {"regularised": regularised}, state_names)


def abs_run(traj: Trajectory, model: ProcessModel, obs: ObservationModel, N: int,
            x0_sampler, rng: RngStream, name: str = "abs", state_names=()) -> RunRecord:
    sample = x0_sampler.sample if hasattr(x0_sampler, "sample") else x0_sampler
    wens = WeightedEnsemble.uniform(sample(N, rng))
    M, dt = traj.n_steps, traj.dt
    n = wens.particles.shape[1]
    est = np.empty((M + 1, n))
    std = np.empty((M + 1, n))
    ess = np.empty(M + 1)
    est[0], std[0], ess[0] = wens.mean(), wens.std(), wens.ess
    degenerate = 0
    for i in range(M):
        try:
            wens = abs_step(wens, model, obs, measurement_at(traj, obs, i),
                            float(traj.times[i]), dt, rng)
        except NumericalOverflowError as exc:
            raise NumericalOverflowError("ABS filter diverged", particle_index=exc.particle_index,
                                         time_index=i + 1) from exc
        degenerate += int(wens.degenerate)
        est[i + 1], std[i + 1], ess[i + 1] = wens.mean(), wens.std(), wens.ess
    return _record(name, rng, traj, est, std, ess, {"degenerate_steps": degenerate}, state_names)


def kalman_run(traj: Trajectory, A, H, Q, R, x0, P0, state_names=()) -> RunRecord:
    """Kalman filter over the increments of the cumulative record ``traj.Y``."""
    dY = np.diff(traj.Y, axis=0)
    out = kalman_oracle(A, H, Q, R, x0, P0, dY)
    m0 = np.atleast_1d(np.asarray(x0, dtype=float))
    P0 = np.atleast_2d(np.asarray(P0, dtype=float))
    est = np.vstack([m0] + [m for m, _ in out])
    std = np.vstack([np.sqrt(np.diag(P0))] + [np.sqrt(np.diag(P)) for _, P in out])
    return _record("kalman", None, traj, est, std, None, {}, state_names)

"""Kushner-Stratonovich Monte Carlo filter with annealed inner iterations.

One time step ``t_i -> t_{i+1}``:

1. Euler-Maruyama prediction of every particle with its own Brownian increment.
2. Initial gain update ``X1 = X + G (dY - h(X) dt)`` where ``G`` is the
   ensemble cross-moment of the state with ``h``.
3. Inner iterations ``k = 1 .. kappa-1``: the gain is recomputed from the
   current iterate and the particles are moved by ``(1 + beta_k) G_k (dY -
   h(X_k) dt)``, either from a fixed anchor (``k <= k_max``) or from the
   current iterate (``k > k_max``).  ``beta_k`` follows an annealing schedule.
4. Optional trapezoidal drift correction.

Observations are handled in whitened SDE form: ``dY - h(X) dt`` has
covariance ``dt * I``.  Algebraic measurements ``y = h(X) + v`` are mapped to
that form with ``dY = sqrt(dt) L^-1 y`` and ``h_w = L^-1 h / sqrt(dt)`` where
``L L^T`` is the measurement noise covariance.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import annealing
from .diagnostics import windowed_innovation_ks
from .errors import ConfigError, InvalidModelError, NumericalOverflowError
from .models import ObservationModel, ProcessModel
from .records import RunRecord
from .sde import RngStream, Stream, Trajectory, _first_bad_row, em_step

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Ensemble:
    particles: np.ndarray
    time_index: int = 0

    def __post_init__(self):
        p = np.asarray(self.particles, dtype=float)
        if p.ndim != 2:
            raise ConfigError("ensemble particles must be an (N, n) array")
        if p.shape[0] < 2:
            raise ConfigError("an ensemble needs N >= 2 particles (one particle has zero gain)")
        row = _first_bad_row(p)
        if row is not None:
            raise NumericalOverflowError("non-finite particle in ensemble",
                                         particle_index=row, time_index=self.time_index)
        object.__setattr__(self, "particles", p)

    @property
    def N(self) -> int:
        return self.particles.shape[0]

    @property
    def n(self) -> int:
        return self.particles.shape[1]

    def mean(self) -> np.ndarray:
        return self.particles.mean(axis=0)

    def std(self) -> np.ndarray:
        return self.particles.std(axis=0)


@dataclass(frozen=True)
class KsConfig:
    N: int = 200
    kappa: int = 10
    k_max: Optional[int] = None
    beta1_mode: str = "fixed"
    beta1: float = 1.0
    alpha: float = 10.0
    rho_range: tuple = (0.0, 20.0)
    rho_evals: int = 64
    schedule: str = "exponential"
    lam: float = 0.5
    anchor: str = "prediction"
    final_correction: bool = False
    ks_window: int = 50
    ks_significance: float = 0.05
    update_substeps: int = 1
    substep_limit: Optional[float] = None
    max_substeps: int = 1000

    def __post_init__(self):
        if self.N < 2:
            raise ConfigError("N must be >= 2")
        if self.kappa < 2:
            raise ConfigError("kappa must be >= 2")
        if not 1 <= self.resolved_k_max < self.kappa:
            raise ConfigError("k_max must satisfy 1 <= k_max < kappa")
        if self.beta1_mode not in ("fixed", "linesearch"):
            raise ConfigError(f"unknown beta1 mode {self.beta1_mode!r}")
        if self.beta1_mode == "fixed" and not self.beta1 > 0:
            raise ConfigError("a fixed beta1 must be positive")
        if self.beta1_mode == "linesearch" and not self.alpha > 1:
            raise ConfigError("alpha must exceed 1")
        if self.schedule not in ("exponential", "lam"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.anchor not in ("prediction", "initial"):
            raise ConfigError(f"unknown anchor {self.anchor!r}")
        lo, hi = self.rho_range
        if not hi > lo:
            raise ConfigError("empty rho search range")
        if self.update_substeps < 1 or self.max_substeps < self.update_substeps:
            raise ConfigError("need 1 <= update_substeps <= max_substeps")
        if self.substep_limit is not None and not self.substep_limit > 0:
            raise ConfigError("substep_limit must be positive")

    @property
    def resolved_k_max(self) -> int:
        return self.kappa - 1 if self.k_max is None else int(self.k_max)


@dataclass
class InnovationRecord:
    """Residuals ``dY - h(X_k) dt`` (N x q) and energies for ``k = 0 .. kappa-1``."""

    residuals: list = field(default_factory=list)
    energies: list = field(default_factory=list)
    betas: list = field(default_factory=list)

    @property
    def mean_energies(self) -> np.ndarray:
        return np.array([float(np.mean(e)) for e in self.energies])


# -- observation plumbing -----------------------------------------------------------


@dataclass(frozen=True)
class StepObservation:
    """Whitened increment ``dY`` with its matching ``h`` for one time step."""

    dY: np.ndarray
    dt: float
    h: Callable[[np.ndarray], np.ndarray]


def _inverse_factor(cov: np.ndarray) -> np.ndarray:
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise InvalidModelError("the KS filter needs a positive definite observation noise") from exc
    return np.linalg.inv(chol)


def step_observation(obs: ObservationModel, measurement, t: float, dt: float) -> StepObservation:
    """``measurement`` is ``Y_{i+1} - Y_i`` for SDE-form models and ``y_{i+1}``
    for algebraic ones; ``t`` is ``t_{i+1}``."""
    z = np.asarray(measurement, dtype=float)
    if obs.form == "sde":
        Linv = _inverse_factor(obs.noise.cov(None))
        return StepObservation(Linv @ z, dt,
                               lambda X: np.asarray(obs.observe(X, t), dtype=float) @ Linv.T)
    Linv = _inverse_factor(obs.noise.cov(z))
    s = math.sqrt(dt)

    def h(X):
        hx = np.asarray(obs.observe(X, t), dtype=float)
        return (z - obs.residual(z, hx)) @ Linv.T / s

    return StepObservation(s * (Linv @ z), dt, h)


def _as_h(obs, t: float = 0.0) -> Callable[[np.ndarray], np.ndarray]:
    if isinstance(obs, ObservationModel):
        return lambda X: np.asarray(obs.observe(X, t), dtype=float)
    if isinstance(obs, StepObservation):
        return obs.h
    return obs


# -- filter operations --------------------------------------------------------------


def ensemble_gain(X: np.ndarray, HX: np.ndarray) -> np.ndarray:
    """Columns ``g^l = mean(h_l(X) X) - mean(h_l(X)) mean(X)``; shape (n, q).

    Summation is done by ``einsum`` in a fixed order so results do not depend
    on BLAS threading.
    """
    X = np.asarray(X, dtype=float)
    HX = np.asarray(HX, dtype=float)
    Xc = X - X.mean(axis=0)
    Hc = HX - HX.mean(axis=0)
    return np.einsum("ji,jl->il", Xc, Hc) / X.shape[0]


def compute_gain(ensemble: Ensemble, obs, t: float = 0.0) -> np.ndarray:
    h = _as_h(obs, t)
    return ensemble_gain(ensemble.particles, h(ensemble.particles))


def predict(ensemble: Ensemble, model: ProcessModel, t: float, dt: float,
            rng: RngStream) -> Ensemble:
    """Advance every particle by one Euler-Maruyama step with its own increment."""
    i = ensemble.time_index
    dB = rng.brownian(Stream.PREDICT, i, (ensemble.N, model.dim_noise), dt)
    try:
        X = em_step(model, ensemble.particles, t, dt, dB)
    except NumericalOverflowError as exc:
        raise NumericalOverflowError("prediction overflow", particle_index=exc.particle_index,
                                     time_index=i) from exc
    return Ensemble(X, i + 1)


def initial_update(ensemble: Ensemble, G: np.ndarray, dY, dt: float, obs,
                   t: float = 0.0) -> Ensemble:
    h = _as_h(obs, t)
    X = ensemble.particles
    resid = np.asarray(dY, dtype=float) - h(X) * dt
    return Ensemble(X + resid @ np.asarray(G).T, ensemble.time_index)


def select_beta1(ensemble1: Ensemble, U1, dY, dt: float, obs, alpha: float = 10.0,
                 rho_range=(0.0, 20.0), n_evals: int = 64, t: float = 0.0) -> float:
    """``alpha * argmin_rho || dY - h(mean(X1) + (1 + rho) mean(U1)) dt ||``.

    A coarse grid over ``rho_range`` is refined by golden-section search
    around the best grid point, using ``n_evals`` objective evaluations.
    """
    lo, hi = (float(v) for v in rho_range)
    if not hi > lo:
        raise ConfigError("empty rho search range")
    if not alpha > 1:
        raise ConfigError("alpha must exceed 1")
    h = _as_h(obs, t)
    dY = np.asarray(dY, dtype=float)
    m = ensemble1.mean()
    U1 = np.asarray(U1, dtype=float)
    u = U1.mean(axis=0) if U1.ndim == 2 else U1
    if not np.any(u):
        log.warning("beta1 line search: zero update direction, objective is flat")
        return alpha * lo

    def objective(rhos):
        rhos = np.atleast_1d(np.asarray(rhos, dtype=float))
        pts = m[None, :] + (1.0 + rhos)[:, None] * u[None, :]
        r = dY[None, :] - h(pts) * dt
        return np.sqrt(np.sum(r ** 2, axis=1))

    n_grid = max(3, min(16, n_evals // 4))
    grid = np.linspace(lo, hi, n_grid)
    vals = objective(grid)
    b = int(np.argmin(vals))
    best_rho, best_val = float(grid[b]), float(vals[b])
    a, c = float(grid[max(b - 1, 0)]), float(grid[min(b + 1, n_grid - 1)])
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    x1 = c - invphi * (c - a)
    x2 = a + invphi * (c - a)
    f1, f2 = float(objective(x1)[0]), float(objective(x2)[0])
    for _ in range(max(0, n_evals - n_grid - 2)):
        if f1 <= f2:
            c, x2, f2 = x2, x1, f1
            x1 = c - invphi * (c - a)
            f1 = float(objective(x1)[0])
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + invphi * (c - a)
            f2 = float(objective(x2)[0])
    for x, f in ((x1, f1), (x2, f2)):
        if f < best_val:
            best_rho, best_val = x, f
    return alpha * best_rho


def inner_iterate(ensemble1: Ensemble, cfg: KsConfig, dY, dt: float, obs,
                  schedule: Optional[annealing.ScheduleState], anchor: Optional[Ensemble] = None,
                  t: float = 0.0):
    """Run inner iterations ``k = 1 .. kappa-1`` starting from the k=1 iterate.

    ``anchor`` is the ensemble that anchored updates start from (defaults to
    ``ensemble1``).  ``schedule=None`` runs every iteration with ``beta = 0``.
    Returns ``(final_ensemble, penultimate_ensemble, InnovationRecord)``.
    """
    h = _as_h(obs, t)
    dY = np.asarray(dY, dtype=float)
    base_anchor = (anchor if anchor is not None else ensemble1).particles
    k_max = cfg.resolved_k_max
    record = InnovationRecord()
    X = ensemble1.particles
    X_prev = X
    for k in range(1, cfg.kappa):
        beta = schedule.beta if schedule is not None else 0.0
        with np.errstate(over="ignore", invalid="ignore"):
            HX = h(X)
            resid = dY - HX * dt
            energy = np.sum(resid ** 2, axis=1)
            G = ensemble_gain(X, HX)
            base = base_anchor if k <= k_max else X
            X_next = base + (1.0 + beta) * (resid @ G.T)
        record.residuals.append(resid)
        record.energies.append(energy)
        record.betas.append(beta)
        row = _first_bad_row(X_next)
        if row is not None:
            raise NumericalOverflowError("inner iteration overflow", particle_index=row,
                                         time_index=ensemble1.time_index, iteration=k)
        if schedule is not None and k < cfg.kappa - 1:
            schedule = annealing.advance(schedule, energy)
        X_prev, X = X, X_next
    return (Ensemble(X, ensemble1.time_index), Ensemble(X_prev, ensemble1.time_index), record)


def finalize_step(previous: Ensemble, inner_result: Ensemble, penultimate: Ensemble,
                  model: ProcessModel, cfg: KsConfig, t: float, dt: float) -> Ensemble:
    """Optionally swap the Euler drift ``b(X_i) dt`` for the trapezoidal
    ``(b(X_i, t_i) + b(X_{kappa-1}, t_{i+1})) dt / 2``."""
    if not cfg.final_correction:
        return inner_result
    b_old = np.asarray(model.drift(previous.particles, t), dtype=float)
    b_new = np.asarray(model.drift(penultimate.particles, t + dt), dtype=float)
    return Ensemble(inner_result.particles + 0.5 * (b_new - b_old) * dt,
                    inner_result.time_index)


# -- priors -------------------------------------------------------------------------


@dataclass(frozen=True)
class Prior:
    """Gaussian physical states followed by uniformly drawn parameters."""

    mean: np.ndarray
    cov: np.ndarray
    param_low: np.ndarray = field(default_factory=lambda: np.zeros(0))
    param_high: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        for name in ("mean", "cov", "param_low", "param_high"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if self.cov.shape != (self.mean.size, self.mean.size):
            raise ConfigError("prior covariance does not match the prior mean")
        if self.param_low.shape != self.param_high.shape or np.any(self.param_high < self.param_low):
            raise ConfigError("parameter ranges must satisfy low <= high")

    @property
    def dim(self) -> int:
        return self.mean.size + self.param_low.size

    def sample(self, N: int, rng: RngStream) -> np.ndarray:
        ns, npar = self.mean.size, self.param_low.size
        w, v = np.linalg.eigh(self.cov)
        root = v * np.sqrt(np.clip(w, 0.0, None))
        z = rng.normal(Stream.INITIAL_ENSEMBLE, 0, (N, ns))
        states = self.mean + z @ root.T
        if npar == 0:
            return states
        u = rng.uniform(Stream.INITIAL_ENSEMBLE, 1, (N, npar))
        params = self.param_low + u * (self.param_high - self.param_low)
        return np.hstack([states, params])


# -- full run -----------------------------------------------------------------------


def measurement_at(traj: Trajectory, obs: ObservationModel, i: int) -> np.ndarray:
    """Measurement consumed by the step ``t_i -> t_{i+1}``."""
    if obs.form == "sde":
        return traj.Y[i + 1] - traj.Y[i]
    return traj.y[i + 1]


def _update(X_pred: Ensemble, so: StepObservation, cfg: KsConfig):
    """Initial update, beta1 selection and inner iterations for one increment."""
    dt = so.dt
    with np.errstate(over="ignore", invalid="ignore"):
        HX = so.h(X_pred.particles)
        resid0 = so.dY - HX * dt
        G0 = ensemble_gain(X_pred.particles, HX)
        X1 = Ensemble(X_pred.particles + resid0 @ G0.T, X_pred.time_index)
    if cfg.beta1_mode == "fixed":
        beta1 = cfg.beta1
    else:
        H1 = so.h(X1.particles)
        U1 = (so.dY - H1 * dt) @ ensemble_gain(X1.particles, H1).T
        beta1 = select_beta1(X1, U1, so.dY, dt, so.h, cfg.alpha, cfg.rho_range, cfg.rho_evals)
    schedule = None
    if beta1 > 0:
        history = (np.sum(resid0 ** 2, axis=1),)
        schedule = annealing.ScheduleState(cfg.schedule, beta1, 1, cfg.lam, history)
    anchor = X_pred if cfg.anchor == "prediction" else X1
    final, penult, record = inner_iterate(X1, cfg, so.dY, dt, so.h, schedule, anchor)
    return final, penult, beta1, record


_MAX_HALVINGS = 30


def step_information(X: Ensemble, so: StepObservation) -> float:
    """Largest eigenvalue of the ensemble covariance of the whitened ``h``."""
    HX = so.h(X.particles)
    Hc = HX - HX.mean(axis=0)
    with np.errstate(over="ignore", invalid="ignore"):
        S = np.einsum("ji,jl->il", Hc, Hc) / HX.shape[0]
    if not np.all(np.isfinite(S)):
        return math.inf
    lam = float(np.linalg.eigvalsh(S)[-1])
    return lam if np.isfinite(lam) else math.inf


def ks_step(ens: Ensemble, model: ProcessModel, so: StepObservation, cfg: KsConfig,
            t: float, rng: RngStream):
    """One full filter step; returns ``(ensemble, beta1, record)``.

    With ``cfg.update_substeps = L > 1`` the increment is assimilated as L
    equal pieces over pseudo-time steps ``dt / L``.  With ``cfg.substep_limit
    = c`` each piece instead takes the fraction ``w`` of the remaining
    increment for which ``(1 + beta1) * lambda_max(cov h(X)) * w * dt <= c``
    on the current ensemble, so pieces grow as the ensemble contracts; at
    most ``max_substeps`` pieces are used, the last one taking whatever is
    left.  Either way the additive update stays contractive when one step
    carries a lot of information.  ``beta1`` is the value of the first piece.
    """
    X_pred = predict(ens, model, t, so.dt, rng)
    current, penult, record, beta1 = X_pred, X_pred, None, None
    amp = 1.0 + (cfg.beta1 if cfg.beta1_mode == "fixed" else cfg.alpha * cfg.rho_range[1])
    adaptive = cfg.substep_limit is not None
    base = 1.0 / cfg.update_substeps
    remaining, pieces = 1.0, 0
    while remaining > 0.0:
        w = min(base, remaining)
        if adaptive:
            lam = step_information(current, so)
            if lam > 0.0:
                w = min(w, cfg.substep_limit / (amp * lam * so.dt))
        pieces += 1
        last = pieces >= cfg.max_substeps
        if last or w >= remaining * (1.0 - 1e-9):
            w = remaining
        retries = _MAX_HALVINGS if adaptive and not last else 0
        for halving in range(retries + 1):
            piece = so if w == 1.0 else StepObservation(so.dY * w, so.dt * w, so.h)
            try:
                out = _update(current, piece, cfg)
            except NumericalOverflowError:
                if halving == retries:
                    raise
                w *= 0.5
                continue
            if (halving == retries
                    or amp * step_information(out[0], so) * w * so.dt <= 2.0 * cfg.substep_limit):
                break
            w *= 0.5
        current, penult, b, record = out
        beta1 = b if beta1 is None else beta1
        remaining = 0.0 if w == remaining else remaining - w
    final = finalize_step(ens, current, penult, model, cfg, t, so.dt)
    return final, beta1, record


def filter_run(trajectory: Trajectory, model: ProcessModel, obs: ObservationModel,
               cfg: KsConfig, x0_sampler, rng: RngStream, name: str = "ks",
               state_names: tuple = ()) -> RunRecord:
    """Run the KS filter over a recorded trajectory.

    ``x0_sampler`` is a :class:`Prior` or a callable ``(N, rng) -> (N, n)``.
    """
    sample = x0_sampler.sample if hasattr(x0_sampler, "sample") else x0_sampler
    M = trajectory.n_steps
    dt = trajectory.dt
    ens = Ensemble(sample(cfg.N, rng), 0)
    n = ens.n
    if n != model.dim_state:
        raise ConfigError("initial ensemble does not match the model dimension")
    est = np.empty((M + 1, n))
    std = np.empty((M + 1, n))
    beta1s = np.full(M + 1, np.nan)
    innov = np.full((M + 1, obs.dim_obs), np.nan)
    est[0], std[0] = ens.mean(), ens.std()
    for i in range(M):
        t = float(trajectory.times[i])
        so = step_observation(obs, measurement_at(trajectory, obs, i), t + dt, dt)
        try:
            ens, beta1, _ = ks_step(ens, model, so, cfg, t, rng)
        except NumericalOverflowError as exc:
            raise NumericalOverflowError("KS filter diverged", particle_index=exc.particle_index,
                                         time_index=i + 1, iteration=exc.iteration) from exc
        est[i + 1], std[i + 1] = ens.mean(), ens.std()
        beta1s[i + 1] = beta1
        innov[i + 1] = (so.dY - so.h(ens.particles).mean(axis=0) * dt) / math.sqrt(dt)
    ks_stat, ks_pass = windowed_innovation_ks(innov[1:], cfg.ks_window, cfg.ks_significance)
    return RunRecord(
        filter_name=name, seed=int(rng.seed), times=np.asarray(trajectory.times, dtype=float),
        estimates=est, stds=std, truth=_truth_or_nan(trajectory, n),
        ks_stat=np.concatenate([[np.nan], ks_stat]),
        ks_pass=np.concatenate([[False], ks_pass]),
        beta1=beta1s, innovations=innov, state_names=tuple(state_names),
    )


def _truth_or_nan(trajectory: Trajectory, n: int) -> np.ndarray:
    states = np.asarray(trajectory.states, dtype=float)
    if states.shape[1] == n:
        return states
    out = np.full((len(states), n), np.nan)
    k = min(n, states.shape[1])
    out[:, :k] = states[:, :k]
    return out

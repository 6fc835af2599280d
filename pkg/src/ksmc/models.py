"""Process and observation model interfaces plus the benchmark problems.

All model callables are vectorised: a state argument of shape ``(..., n)``
returns drift ``(..., n)`` and observations ``(..., q)``.  A diffusion
callable may return either ``(..., n, m)`` or a single ``(n, m)`` matrix that
is shared by every state in the batch (the additive-noise case).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np

from .errors import InvalidModelError, SingularGeometryError

TWO_PI = 2.0 * math.pi
FOUR_PI2 = 4.0 * math.pi ** 2

Matrix = np.ndarray
CovarianceSpec = Union[np.ndarray, Callable[[np.ndarray], np.ndarray]]


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class ProcessModel:
    """Ito process ``dX = b(X, t) dt + f(X, t) dB`` with ``X`` in R^n, ``B`` in R^m."""

    dim_state: int
    dim_noise: int
    drift: Callable[[np.ndarray, float], np.ndarray]
    diffusion: Callable[[np.ndarray, float], np.ndarray]
    name: str = ""

    def __post_init__(self):
        if self.dim_state < 1 or self.dim_noise < 1:
            raise InvalidModelError("process model dimensions must be >= 1")


# -- observation noise -------------------------------------------------------


def _cov_at(spec: CovarianceSpec, z: Optional[np.ndarray]) -> np.ndarray:
    if callable(spec):
        return np.asarray(spec(z), dtype=float)
    return np.asarray(spec, dtype=float)


def _check_psd(mat: np.ndarray, what: str) -> None:
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise InvalidModelError(f"{what} must be a square matrix")
    if not np.allclose(mat, mat.T):
        raise InvalidModelError(f"{what} must be symmetric")
    if np.linalg.eigvalsh(mat).min() < -1e-12 * max(1.0, np.abs(mat).max()):
        raise InvalidModelError(f"{what} must be positive semidefinite")


def _gauss_logpdf(resid: np.ndarray, cov: np.ndarray) -> np.ndarray:
    q = cov.shape[0]
    chol = np.linalg.cholesky(cov)
    white = np.linalg.solve(chol, resid.reshape(-1, q).T).T
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    out = -0.5 * (np.sum(white ** 2, axis=1) + logdet + q * math.log(TWO_PI))
    return out.reshape(resid.shape[:-1])


@dataclass(frozen=True)
class GaussianNoise:
    """Zero-mean Gaussian noise.  ``intensity`` is a matrix or a callable of
    the measurement returning one (measurement-relative noise levels)."""

    intensity: CovarianceSpec

    def __post_init__(self):
        if not callable(self.intensity):
            mat = _frozen(self.intensity)
            _check_psd(mat, "noise intensity")
            object.__setattr__(self, "intensity", mat)

    def cov(self, z=None) -> np.ndarray:
        return _cov_at(self.intensity, z)

    def sample(self, z_clean, normal, uniform=None) -> np.ndarray:
        cov = self.cov(z_clean)
        return _psd_sqrt(cov) @ normal

    def logpdf(self, resid, z=None) -> np.ndarray:
        return _gauss_logpdf(np.asarray(resid, dtype=float), self.cov(z))


@dataclass(frozen=True)
class GlintNoise:
    """Two-component Gaussian mixture ``(1-gamma) N(0, S) + gamma N(0, scale*S)``."""

    base: CovarianceSpec
    scale: float = 100.0
    gamma: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise InvalidModelError("glint probability gamma must lie in [0, 1]")
        if self.scale <= 0.0:
            raise InvalidModelError("glint scale must be positive")
        if not callable(self.base):
            mat = _frozen(self.base)
            _check_psd(mat, "glint base covariance")
            object.__setattr__(self, "base", mat)

    def cov(self, z=None) -> np.ndarray:
        """Moment-matched covariance, used by the gain-based filters."""
        return ((1.0 - self.gamma) + self.gamma * self.scale) * _cov_at(self.base, z)

    def sample(self, z_clean, normal, uniform) -> np.ndarray:
        base = _cov_at(self.base, z_clean)
        factor = math.sqrt(self.scale) if uniform < self.gamma else 1.0
        return factor * (_psd_sqrt(base) @ normal)

    def logpdf(self, resid, z=None) -> np.ndarray:
        base = _cov_at(self.base, z)
        resid = np.asarray(resid, dtype=float)
        parts = []
        if self.gamma < 1.0:
            parts.append(math.log1p(-self.gamma) + _gauss_logpdf(resid, base))
        if self.gamma > 0.0:
            parts.append(math.log(self.gamma) + _gauss_logpdf(resid, self.scale * base))
        return parts[0] if len(parts) == 1 else np.logaddexp(parts[0], parts[1])


def _psd_sqrt(cov: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        w, v = np.linalg.eigh(cov)
        return v * np.sqrt(np.clip(w, 0.0, None))


def relative_std(fraction: float = 0.05, floor: float = 1e-6) -> Callable[[np.ndarray], np.ndarray]:
    """Diagonal covariance whose per-channel std is ``fraction * |z|``, floored."""

    def cov(z):
        std = np.maximum(fraction * np.abs(np.asarray(z, dtype=float)), floor)
        return np.diag(std ** 2)

    return cov


@dataclass(frozen=True)
class ObservationModel:
    """Observation ``dY = h(X, t) dt + dW`` (``form="sde"``) or
    ``y = h(X, t) + v`` (``form="algebraic"``)."""

    dim_obs: int
    observe: Callable[[np.ndarray, float], np.ndarray]
    noise: Union[GaussianNoise, GlintNoise]
    form: str = "sde"
    angular: tuple = ()

    def __post_init__(self):
        if self.dim_obs < 1:
            raise InvalidModelError("observation dimension must be >= 1")
        if self.form not in ("sde", "algebraic"):
            raise InvalidModelError(f"unknown observation form {self.form!r}")
        if self.angular and len(self.angular) != self.dim_obs:
            raise InvalidModelError("angular flags must match the observation dimension")

    def residual(self, z, hx) -> np.ndarray:
        """``z - hx`` with angular channels wrapped into (-pi, pi]."""
        d = np.asarray(z, dtype=float) - np.asarray(hx, dtype=float)
        if any(self.angular):
            d = np.array(d, copy=True)
            for ch, is_angle in enumerate(self.angular):
                if is_angle:
                    d[..., ch] = wrap_angle(d[..., ch])
        return d


def wrap_angle(a):
    a = np.asarray(a, dtype=float)
    w = np.mod(a + math.pi, TWO_PI) - math.pi
    return np.where(w <= -math.pi, w + TWO_PI, w)


# -- augmented (state + parameter) models ------------------------------------


@dataclass(frozen=True)
class AugmentedModel:
    """A benchmark problem: physical states augmented with random-walk parameters.

    ``process`` is the augmented model the filters use.  ``reference_values``
    are the true parameters used to synthesise data; filters never read them.
    Problems without identified parameters have an empty ``parameter_names``.
    """

    process: ProcessModel
    parameter_names: tuple
    parameter_noise: np.ndarray
    reference_values: np.ndarray
    observation: ObservationModel
    algebraic_observation: ObservationModel
    state_names: tuple
    name: str = ""

    def __post_init__(self):
        n_par = len(self.parameter_names)
        if len(self.reference_values) != n_par:
            raise InvalidModelError("one reference value per parameter is required")
        if self.process.dim_state != len(self.state_names):
            raise InvalidModelError("state_names must cover the augmented state")

    @property
    def dim_state(self) -> int:
        return self.process.dim_state

    @property
    def n_base(self) -> int:
        return self.process.dim_state - len(self.parameter_names)

    @property
    def parameter_slice(self) -> slice:
        return slice(self.n_base, self.dim_state)

    def truth_process(self) -> ProcessModel:
        """The same dynamics with the parameter random walk switched off."""
        n_base = self.n_base
        inner = self.process.diffusion

        def diffusion(x, t):
            f = np.array(inner(x, t), dtype=float, copy=True)
            f[..., n_base:, :] = 0.0
            return f

        return replace(self.process, diffusion=diffusion, name=self.process.name + "-truth")


def make_duffing(eps1: float = 0.25, eps2: float = 1.0, eps3: float = 5.0,
                 f_intensity: float = 1.0, sigma_m: float = 0.05,
                 f_mu: Sequence[float] = (0.1, 0.01, 0.1)) -> AugmentedModel:
    """Hardening Duffing oscillator with (k, c, alpha) appended to the state.

    State is ``(x1, x2, k, c, alpha)``; ``c = 2 pi eps1`` and
    ``k = alpha = 4 pi^2 eps2`` are the reference values, ``eps3`` scales the
    known harmonic forcing ``4 pi^2 eps3 cos(2 pi t)``.
    """
    f_mu = np.asarray(f_mu, dtype=float)
    if f_intensity <= 0 or sigma_m <= 0 or f_mu.shape != (3,) or np.any(f_mu <= 0):
        raise InvalidModelError("Duffing noise intensities must all be positive")
    amp = FOUR_PI2 * eps3

    def drift(x, t):
        x = np.asarray(x, dtype=float)
        out = np.zeros_like(x)
        x1, x2 = x[..., 0], x[..., 1]
        k, c, alpha = x[..., 2], x[..., 3], x[..., 4]
        out[..., 0] = x2
        out[..., 1] = -c * x2 - k * x1 - alpha * x1 ** 3 + amp * math.cos(TWO_PI * t)
        return out

    fmat = np.zeros((5, 4))
    fmat[1, 0] = f_intensity
    fmat[2:, 1:] = np.diag(f_mu)
    fmat = _frozen(fmat)

    process = ProcessModel(5, 4, drift, lambda x, t: fmat, name="duffing")
    sde_obs = ObservationModel(1, lambda x, t: np.asarray(x)[..., :1] / sigma_m,
                               GaussianNoise(np.eye(1)), form="sde")
    alg_obs = ObservationModel(1, lambda x, t: np.asarray(x)[..., :1],
                               GaussianNoise(np.eye(1) * sigma_m ** 2), form="algebraic")
    return AugmentedModel(
        process=process,
        parameter_names=("k", "c", "alpha"),
        parameter_noise=_frozen(np.diag(f_mu)),
        reference_values=_frozen([FOUR_PI2 * eps2, TWO_PI * eps1, FOUR_PI2 * eps2]),
        observation=sde_obs,
        algebraic_observation=alg_obs,
        state_names=("x1", "x2", "k", "c", "alpha"),
        name="duffing",
    )


# -- shear frame ---------------------------------------------------------------


def assemble_shear_matrix(k) -> np.ndarray:
    """Tridiagonal story matrix; works for stiffness and damping alike.

    Accepts ``(..., n)`` coefficients and returns ``(..., n, n)``.
    """
    k = np.asarray(k, dtype=float)
    n = k.shape[-1]
    out = np.zeros(k.shape[:-1] + (n, n))
    idx = np.arange(n)
    upper = np.zeros_like(k)
    upper[..., :-1] = k[..., 1:]
    out[..., idx, idx] = k + upper
    out[..., idx[:-1], idx[1:]] = -k[..., 1:]
    out[..., idx[1:], idx[:-1]] = -k[..., 1:]
    return out


def story_forces(k, x) -> np.ndarray:
    """``assemble_shear_matrix(k) @ x`` without forming the matrix."""
    x = np.asarray(x, dtype=float)
    drift_ = np.diff(x, axis=-1, prepend=0.0)
    spring = k * drift_
    out = spring.copy()
    out[..., :-1] -= spring[..., 1:]
    return out


def cubic_interstory_field(kappa_nl: float = 0.0) -> Callable[[np.ndarray], np.ndarray]:
    """Restoring force from springs with cubic inter-story terms ``kappa (x_i - x_{i-1})^3``."""

    def field_(x):
        x = np.asarray(x, dtype=float)
        if kappa_nl == 0.0:
            return np.zeros_like(x)
        d = np.diff(x, axis=-1, prepend=0.0)
        s = kappa_nl * d ** 3
        out = s.copy()
        out[..., :-1] -= s[..., 1:]
        return out

    return field_


def harmonic_forcing(amplitudes=(1.0,) * 5, omegas=(TWO_PI,) * 5) -> Callable[[float], np.ndarray]:
    amplitudes = np.asarray(amplitudes, dtype=float)
    omegas = np.asarray(omegas, dtype=float)
    return lambda t: amplitudes * np.sin(omegas * t)


def make_shear_frame(K: Sequence[float], C: Sequence[float],
                     nonlinear_field: Optional[Callable] = None,
                     forcing: Optional[Callable] = None,
                     sigma: float = 0.1, sigma_m: float = 0.01,
                     f_mu: Optional[Sequence[float]] = None) -> AugmentedModel:
    """Five-story shear frame with unit floor masses; 20 augmented states.

    State layout: displacements x1..x5, velocities v1..v5, stiffnesses
    K1..K5, dampings C1..C5.  All five displacements are observed.
    """
    K = np.asarray(K, dtype=float)
    C = np.asarray(C, dtype=float)
    if K.shape != (5,) or C.shape != (5,):
        raise InvalidModelError("shear frame needs five stiffness and five damping values")
    if np.any(K <= 0):
        raise InvalidModelError("story stiffnesses must be positive")
    if np.any(C < 0):
        raise InvalidModelError("story damping must be non-negative")
    if sigma <= 0 or sigma_m <= 0:
        raise InvalidModelError("noise intensities must be positive")
    f_mu = np.zeros(10) if f_mu is None else np.asarray(f_mu, dtype=float)
    if f_mu.shape != (10,) or np.any(f_mu < 0):
        raise InvalidModelError("parameter noise must be ten non-negative values")
    nl = nonlinear_field if nonlinear_field is not None else cubic_interstory_field(0.0)
    force = forcing if forcing is not None else harmonic_forcing()

    def drift(x, t):
        x = np.asarray(x, dtype=float)
        disp, vel = x[..., 0:5], x[..., 5:10]
        kk, cc = x[..., 10:15], x[..., 15:20]
        out = np.zeros_like(x)
        out[..., 0:5] = vel
        out[..., 5:10] = (-story_forces(cc, vel) - story_forces(kk, disp)
                          - nl(disp) + force(t))
        return out

    fmat = np.zeros((20, 15))
    fmat[5:10, 0:5] = sigma * np.eye(5)
    fmat[10:20, 5:15] = np.diag(f_mu)
    fmat = _frozen(fmat)

    process = ProcessModel(20, 15, drift, lambda x, t: fmat, name="shear_frame")
    sde_obs = ObservationModel(5, lambda x, t: np.asarray(x)[..., 0:5] / sigma_m,
                               GaussianNoise(np.eye(5)), form="sde")
    alg_obs = ObservationModel(5, lambda x, t: np.asarray(x)[..., 0:5],
                               GaussianNoise(np.eye(5) * sigma_m ** 2), form="algebraic")
    names = tuple(f"x{i}" for i in range(1, 6)) + tuple(f"v{i}" for i in range(1, 6))
    pnames = tuple(f"K{i}" for i in range(1, 6)) + tuple(f"C{i}" for i in range(1, 6))
    return AugmentedModel(
        process=process,
        parameter_names=pnames,
        parameter_noise=_frozen(np.diag(f_mu)),
        reference_values=_frozen(np.concatenate([K, C])),
        observation=sde_obs,
        algebraic_observation=alg_obs,
        state_names=names + pnames,
        name="shear_frame",
    )


# -- scalar linear-Gaussian problem -------------------------------------------


def make_linear_gaussian(a: float = -1.0, q: float = 1.0, r: float = 1.0) -> AugmentedModel:
    """``dx = a x dt + sqrt(q) dB``, ``dY = x dt + sqrt(r) dW``."""
    if q <= 0 or r <= 0:
        raise InvalidModelError("linear-Gaussian noise intensities must be positive")
    fmat = _frozen([[math.sqrt(q)]])
    process = ProcessModel(1, 1, lambda x, t: a * np.asarray(x, dtype=float),
                           lambda x, t: fmat, name="linear_gaussian")
    sde_obs = ObservationModel(1, lambda x, t: np.asarray(x, dtype=float)[..., :1],
                               GaussianNoise([[r]]), form="sde")
    alg_obs = ObservationModel(1, lambda x, t: np.asarray(x, dtype=float)[..., :1],
                               GaussianNoise([[r]]), form="algebraic")
    return AugmentedModel(process, (), _frozen(np.zeros((0, 0))), _frozen([]),
                          sde_obs, alg_obs, ("x",), name="linear_gaussian")


# -- target tracking -------------------------------------------------------------

DEFAULT_MANEUVERS = (
    (20.0, (-40.0, 40.0)),
    (30.0, (25.0, -25.0)),
    (60.0, (25.0, -25.0)),
    (80.0, (-30.0, 30.0)),
)


@dataclass(frozen=True)
class TrackerModel:
    """Constant-velocity target observed in bearing and range.

    ``process`` is the filter model ``X' = F X + Gamma w``; ``truth_process``
    additionally applies the scheduled maneuver accelerations.  Both are
    expressed as Euler-Maruyama models valid at step ``dt`` exactly.
    """

    process: ProcessModel
    truth_process: ProcessModel
    observation: ObservationModel
    F: np.ndarray
    Gamma: np.ndarray
    x0: np.ndarray
    dt: float
    maneuvers: tuple = field(default=DEFAULT_MANEUVERS)

    def __iter__(self):
        # allows ``process, observation = make_tracker(...)``
        return iter((self.process, self.observation))


def bearing_range(x, observer=(0.0, 0.0)) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    dx = x[..., 0] - observer[0]
    dy = x[..., 2] - observer[1]
    rng = np.hypot(dx, dy)
    if np.any(rng == 0.0):
        raise SingularGeometryError("target coincides with the observer")
    bearing = np.arctan2(dy, dx)
    bearing = np.where(bearing <= -math.pi, bearing + TWO_PI, bearing)
    return np.stack([bearing, rng], axis=-1)


def make_tracker(dt: float = 1.0, x0=(0.5, 3.0, 1.0, 1.0),
                 accel_schedule=DEFAULT_MANEUVERS, process_noise_intensity: float = 1.0,
                 observer=(0.0, 0.0), noise_cfg: Optional[Mapping] = None) -> TrackerModel:
    """Bearing/range tracking problem.

    ``x0`` is ``(x, vx, y, vy)``.  ``noise_cfg`` keys: ``kind`` ("gaussian" or
    "glint"), ``fraction`` (std as a fraction of the measurement, 0.05),
    ``floor`` (1e-6), ``scale`` (100) and ``gamma`` (0.5) for glint.
    """
    if dt <= 0:
        raise InvalidModelError("dt must be positive")
    if process_noise_intensity < 0:
        raise InvalidModelError("process noise intensity must be non-negative")
    cfg = {"kind": "gaussian", "fraction": 0.05, "floor": 1e-6, "scale": 100.0, "gamma": 0.5}
    cfg.update(noise_cfg or {})
    F = np.array([[1, dt, 0, 0], [0, 1, 0, 0], [0, 0, 1, dt], [0, 0, 0, 1]], dtype=float)
    Gamma = np.array([[0.5 * dt ** 2, 0], [1, 0], [0, 0.5 * dt ** 2], [0, 1]], dtype=float)
    F, Gamma = _frozen(F), _frozen(Gamma)
    A = (F - np.eye(4)) / dt
    fmat = _frozen(Gamma * math.sqrt(process_noise_intensity / dt))
    schedule = tuple((float(t), tuple(float(v) for v in a)) for t, a in accel_schedule)

    def drift(x, t):
        return np.asarray(x, dtype=float) @ A.T

    def truth_drift(x, t):
        out = drift(x, t)
        for ts, acc in schedule:
            if abs(t - ts) < 0.5 * dt:
                out = out + (Gamma @ np.asarray(acc)) / dt
        return out

    def diffusion(x, t):
        return fmat

    process = ProcessModel(4, 2, drift, diffusion, name="tracker")
    truth = ProcessModel(4, 2, truth_drift, diffusion, name="tracker-truth")
    base = relative_std(cfg["fraction"], cfg["floor"])
    if cfg["kind"] == "gaussian":
        noise = GaussianNoise(base)
    elif cfg["kind"] == "glint":
        noise = GlintNoise(base, scale=float(cfg["scale"]), gamma=float(cfg["gamma"]))
    else:
        raise InvalidModelError(f"unknown tracker noise kind {cfg['kind']!r}")
    obs_xy = (float(observer[0]), float(observer[1]))
    observation = ObservationModel(2, lambda x, t: bearing_range(x, obs_xy), noise,
                                   form="algebraic", angular=(True, False))
    return TrackerModel(process, truth, observation, F, Gamma,
                        _frozen(x0), float(dt), schedule)

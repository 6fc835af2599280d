"""Brownian increments, Euler-Maruyama stepping and synthetic data generation.

Random numbers come from :class:`RngStream`, a counter-based source: every
draw is addressed by ``(stream, time_index, particle_index, draw_index)`` and
is a pure function of the seed and that address.  Batches for one time index
are produced in a single call (row ``j`` of the batch is particle ``j``), so
vectorised and per-particle evaluation give the same numbers.
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, NumericalOverflowError, OutputError
from .models import ObservationModel, ProcessModel


class Stream(IntEnum):
    TRUTH_PROCESS = 1
    TRUTH_OBS_SDE = 2
    TRUTH_OBS_ALG = 3
    TRUTH_GLINT = 4
    INITIAL_ENSEMBLE = 10
    PREDICT = 11
    ENKF_PERTURB = 12
    RESAMPLE = 13


@dataclass(frozen=True)
class RngStream:
    seed: int

    def __post_init__(self):
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ConfigError("seed must be a 64-bit unsigned integer")

    def generator(self, stream: int, time_index: int) -> np.random.Generator:
        # Philox counter words: [draw, draw-carry, time_index, stream]
        bitgen = np.random.Philox(key=int(self.seed),
                                  counter=[0, 0, int(time_index), int(stream)])
        return np.random.Generator(bitgen)

    def normal(self, stream: int, time_index: int, shape) -> np.ndarray:
        return self.generator(stream, time_index).standard_normal(shape)

    def uniform(self, stream: int, time_index: int, shape=None):
        return self.generator(stream, time_index).random(shape)

    def draw(self, stream: int, time_index: int, particle_index: int,
             draw_index: int, width: int) -> float:
        """Single standard normal at an address; equals the matching batch entry."""
        rows = self.normal(stream, time_index, (particle_index + 1, width))
        return float(rows[particle_index, draw_index])

    def brownian(self, stream: int, time_index: int, shape, dt: float) -> np.ndarray:
        return math.sqrt(dt) * self.normal(stream, time_index, shape)


def _first_bad_row(arr: np.ndarray) -> Optional[int]:
    bad = ~np.isfinite(arr)
    if not bad.any():
        return None
    if arr.ndim == 1:
        return 0
    return int(np.argmax(bad.reshape(arr.shape[0], -1).any(axis=1)))


def em_step(model: ProcessModel, state, t: float, dt: float, dB) -> np.ndarray:
    """One Euler-Maruyama step ``x + b(x, t) dt + f(x, t) dB``.

    ``state`` is ``(n,)`` or ``(N, n)``; ``dB`` matches with trailing ``m``.
    """
    if dt <= 0:
        raise ConfigError("dt must be positive")
    state = np.asarray(state, dtype=float)
    dB = np.asarray(dB, dtype=float)
    # overflow is reported below as a typed error, so silence numpy's warnings
    with np.errstate(over="ignore", invalid="ignore"):
        f = np.asarray(model.diffusion(state, t), dtype=float)
        if f.ndim == 2:
            noise = dB @ f.T
        else:
            noise = np.einsum("...ij,...j->...i", f, dB)
        out = state + np.asarray(model.drift(state, t), dtype=float) * dt + noise
    row = _first_bad_row(out)
    if row is not None:
        raise NumericalOverflowError("non-finite state after Euler-Maruyama step",
                                     particle_index=row)
    return out


@dataclass
class Trajectory:
    """Synthetic truth on a uniform grid.

    ``Y`` is the cumulative SDE-form observation record (``Y[0] = 0``); ``y``
    holds algebraic measurements, ``y[i]`` being taken at ``times[i]``.
    """

    times: np.ndarray
    states: np.ndarray
    Y: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        lengths = {len(self.times), len(self.states), len(self.Y), len(self.y)}
        if len(lengths) != 1:
            raise ConfigError("trajectory sequences must have equal lengths")
        if len(self.times) > 1:
            steps = np.diff(self.times)
            if np.any(steps <= 0):
                raise ConfigError("trajectory times must be strictly increasing")
            if not np.allclose(steps, steps[0], rtol=1e-9, atol=1e-12):
                raise ConfigError("trajectory times must be uniformly spaced")

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    @property
    def n_steps(self) -> int:
        return len(self.times) - 1

    def subsample(self, every: int) -> "Trajectory":
        """Coarser trajectory keeping every ``every``-th point (Y stays cumulative)."""
        sl = slice(None, None, every)
        return Trajectory(self.times[sl], self.states[sl], self.Y[sl], self.y[sl])


def n_steps_for(T: float, dt: float) -> int:
    steps = T / dt
    m = int(round(steps))
    if m < 1 or abs(steps - m) > 1e-6 * max(1.0, steps):
        raise ConfigError(f"T={T} is not an integer multiple of dt={dt}")
    return m


def generate_truth(model: ProcessModel, x0, T: float, dt: float, refine: int,
                   rng: RngStream, observation: Optional[ObservationModel] = None,
                   algebraic_observation: Optional[ObservationModel] = None) -> Trajectory:
    """Simulate the truth on a grid of step ``dt / refine`` and subsample at ``dt``.

    The cumulative record ``Y`` integrates ``h`` of the SDE-form observation
    with the trapezoidal rule on the fine grid and adds a Brownian path of the
    observation noise.  ``y`` holds algebraic measurements at each output time.
    Fine increments within output step ``i`` are addressed ``(i, substep, draw)``.
    """
    if refine < 1:
        raise ConfigError("refine must be >= 1")
    M = n_steps_for(T, dt)
    h = dt / refine
    x = np.array(x0, dtype=float)
    n = model.dim_state
    if x.shape != (n,):
        raise ConfigError(f"x0 must have shape ({n},)")
    q = observation.dim_obs if observation is not None else 0
    qa = algebraic_observation.dim_obs if algebraic_observation is not None else 0
    obs_chol = None
    if observation is not None:
        cov = observation.noise.cov(None)
        w, v = np.linalg.eigh(cov)
        obs_chol = v * np.sqrt(np.clip(w, 0.0, None))

    times = np.arange(M + 1) * dt
    states = np.empty((M + 1, n))
    Y = np.zeros((M + 1, q))
    y = np.full((M + 1, qa), np.nan)
    states[0] = x

    def measure(i, xi, ti):
        if algebraic_observation is None:
            return
        clean = np.asarray(algebraic_observation.observe(xi, ti), dtype=float)
        normal = rng.normal(Stream.TRUTH_OBS_ALG, i, (qa,))
        u = rng.uniform(Stream.TRUTH_GLINT, i)
        y[i] = clean + algebraic_observation.noise.sample(clean, normal, u)

    measure(0, x, 0.0)
    h_prev = (np.asarray(observation.observe(x, 0.0), dtype=float)
              if observation is not None else None)
    for i in range(M):
        dB = rng.brownian(Stream.TRUTH_PROCESS, i, (refine, model.dim_noise), h)
        dW = rng.brownian(Stream.TRUTH_OBS_SDE, i, (refine, q), h) if q else None
        integral = np.zeros(q)
        for s in range(refine):
            t = times[i] + s * h
            try:
                x = em_step(model, x, t, h, dB[s])
            except NumericalOverflowError as exc:
                raise NumericalOverflowError("truth trajectory diverged",
                                             time_index=i) from exc
            if observation is not None:
                h_next = np.asarray(observation.observe(x, t + h), dtype=float)
                integral += 0.5 * (h_prev + h_next) * h
                h_prev = h_next
        states[i + 1] = x
        if observation is not None:
            Y[i + 1] = Y[i] + integral + obs_chol @ dW.sum(axis=0)
        measure(i + 1, x, times[i + 1])
    return Trajectory(times, states, Y, y)


# -- persistence ------------------------------------------------------------------


def config_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _fmt(v: float) -> str:
    return repr(float(v))


def save_trajectory(traj: Trajectory, path, seed: int, cfg_hash: str) -> Path:
    """Write ``t, x_*, Y_*, y_*`` columns plus a ``.meta`` sidecar."""
    path = Path(path)
    n, q, qa = traj.states.shape[1], traj.Y.shape[1], traj.y.shape[1]
    header = (["t"] + [f"x_{k}" for k in range(1, n + 1)]
              + [f"Y_{k}" for k in range(1, q + 1)] + [f"y_{k}" for k in range(1, qa + 1)])
    try:
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for i in range(len(traj.times)):
                row = [traj.times[i], *traj.states[i], *traj.Y[i], *traj.y[i]]
                w.writerow([_fmt(v) for v in row])
        meta = path.with_suffix(".meta")
        meta.write_text(f"seed={int(seed)}\nconfig_hash={cfg_hash}\n"
                        f"n={n}\nq={q}\nq_alg={qa}\n")
    except OSError as exc:
        raise OutputError(f"cannot write trajectory to {path}: {exc}") from exc
    return path


def load_trajectory(path):
    """Inverse of :func:`save_trajectory`; returns ``(trajectory, meta_dict)``."""
    path = Path(path)
    meta = {}
    for line in path.with_suffix(".meta").read_text().splitlines():
        if "=" in line:
            key, value = line.split("=", 1)
            meta[key.strip()] = value.strip()
    n, q, qa = int(meta["n"]), int(meta["q"]), int(meta["q_alg"])
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    data = np.array([[float(v) for v in r] for r in rows], dtype=float).reshape(-1, 1 + n + q + qa)
    traj = Trajectory(data[:, 0], data[:, 1:1 + n], data[:, 1 + n:1 + n + q],
                      data[:, 1 + n + q:])
    return traj, meta

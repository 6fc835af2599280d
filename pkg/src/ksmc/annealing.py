"""Schedules for the annealing-type parameter used in the inner iterations.

Two variants are provided: a fast exponential decay ``beta_{k+1} = beta_k /
exp(k + 1)`` and a conservative Lam-Delosme style schedule driven by the
statistics of the innovation energy across the ensemble.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ScheduleState:
    variant: str
    beta: float
    k: int = 1
    lam: float = 0.5
    energy_history: tuple = ()
    degenerate: bool = False

    def __post_init__(self):
        if self.variant not in ("exponential", "lam"):
            raise ConfigError(f"unknown schedule variant {self.variant!r}")
        if not self.beta > 0.0:
            raise ConfigError("the annealing parameter must be positive")
        if self.variant == "lam" and not 0.0 < self.lam < 1.0:
            raise ConfigError("lambda must lie in (0, 1)")


def next_beta_exponential(state: ScheduleState) -> ScheduleState:
    if state.variant != "exponential":
        raise ConfigError("exponential update applied to a non-exponential schedule")
    return replace(state, beta=state.beta / math.exp(state.k + 1), k=state.k + 1)


def lam_statistics(previous, current):
    """``rho = E[(E_k - E_{k-1})^2]`` and ``sigma = std(E_k)`` over the ensemble."""
    previous = np.asarray(previous, dtype=float)
    current = np.asarray(current, dtype=float)
    rho = float(np.mean((current - previous) ** 2))
    sigma = float(np.std(current))
    return rho, sigma


def next_beta_lam(state: ScheduleState, innovation_energies) -> ScheduleState:
    """Advance ``1/beta`` by ``lam * rho / (2 sigma^3)``.

    ``innovation_energies`` holds the per-particle energies ``I_k^T I_k`` of the
    current iterate; the previous snapshot is taken from ``energy_history``.
    A zero spread leaves ``beta`` unchanged and marks the state degenerate.
    """
    if state.variant != "lam":
        raise ConfigError("Lam update applied to a non-Lam schedule")
    energies = np.asarray(innovation_energies, dtype=float)
    if not state.energy_history:
        raise ConfigError("the Lam schedule needs two energy snapshots")
    rho, sigma = lam_statistics(state.energy_history[-1], energies)
    history = state.energy_history + (energies,)
    if not sigma > 0.0:
        log.warning("Lam schedule: zero energy spread, holding beta at %g", state.beta)
        return replace(state, k=state.k + 1, energy_history=history, degenerate=True)
    inv = 1.0 / state.beta + state.lam * rho / (2.0 * sigma ** 3)
    return replace(state, beta=1.0 / inv, k=state.k + 1, energy_history=history)


def advance(state: ScheduleState, innovation_energies=None) -> ScheduleState:
    if state.variant == "exponential":
        return next_beta_exponential(state)
    return next_beta_lam(state, innovation_energies)

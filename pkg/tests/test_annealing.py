import math

import numpy as np
import pytest

from ksmc.annealing import (ScheduleState, advance, lam_statistics, next_beta_exponential,
                            next_beta_lam)
from ksmc.errors import ConfigError


def test_exponential_first_step():
    s = next_beta_exponential(ScheduleState("exponential", 1.0, 1))
    assert s.beta == pytest.approx(0.1353352832366127, rel=1e-14)
    assert s.k == 2


def test_exponential_five_steps_telescope():
    s = ScheduleState("exponential", 1.0, 1)
    for _ in range(5):
        s = advance(s)
    assert s.beta == pytest.approx(math.exp(-20.0), rel=1e-12)
    assert s.beta == pytest.approx(2.06e-9, rel=1e-2)


@pytest.mark.parametrize("beta", [0.0, -1.0])
def test_non_positive_beta_rejected(beta):
    with pytest.raises(ConfigError):
        ScheduleState("exponential", beta)


def test_unknown_variant_and_lambda_rejected():
    with pytest.raises(ConfigError):
        ScheduleState("linear", 1.0)
    with pytest.raises(ConfigError):
        ScheduleState("lam", 1.0, lam=1.0)


def test_variant_mismatch_rejected():
    with pytest.raises(ConfigError):
        next_beta_exponential(ScheduleState("lam", 1.0, energy_history=(np.ones(2),)))
    with pytest.raises(ConfigError):
        next_beta_lam(ScheduleState("exponential", 1.0), np.ones(2))


def test_lam_stationary_energies_keep_beta():
    e = np.array([1.0, 2.0, 4.0])
    s = next_beta_lam(ScheduleState("lam", 0.7, 1, 0.5, (e,)), e)
    assert s.beta == 0.7 and s.k == 2 and not s.degenerate


def test_lam_hand_evaluation():
    current = np.array([-1.0, 1.0])                  # population std 1
    previous = current - math.sqrt(2.0)              # mean squared increment 2
    assert lam_statistics(previous, current) == pytest.approx((2.0, 1.0))
    s = next_beta_lam(ScheduleState("lam", 1.0, 1, 0.5, (previous,)), current)
    assert s.beta == pytest.approx(2.0 / 3.0, rel=1e-14)
    assert len(s.energy_history) == 2


def test_lam_zero_spread_holds_beta_and_flags(caplog):
    s = next_beta_lam(ScheduleState("lam", 0.4, 1, 0.5, (np.zeros(3),)), np.full(3, 2.0))
    assert s.beta == 0.4 and s.degenerate
    assert "zero energy spread" in caplog.text


def test_lam_needs_history():
    with pytest.raises(ConfigError):
        next_beta_lam(ScheduleState("lam", 1.0), np.ones(3))


def test_lam_decreases_toward_zero_on_fluctuating_energies():
    rng = np.random.default_rng(0)
    s = ScheduleState("lam", 1.0, 1, 0.5, (rng.exponential(size=50),))
    betas = [s.beta]
    for _ in range(40):
        s = next_beta_lam(s, rng.exponential(size=50))
        betas.append(s.beta)
    assert np.all(np.diff(betas) <= 0)
    assert betas[-1] < 0.1 * betas[0]

import math

import numpy as np
import pytest

from ksmc.errors import ConfigError, NumericalOverflowError
from ksmc.models import GaussianNoise, ObservationModel, ProcessModel
from ksmc.sde import (RngStream, Stream, Trajectory, config_hash, em_step, generate_truth,
                      load_trajectory, n_steps_for, save_trajectory)


def _process(drift, diffusion, n=1, m=1):
    return ProcessModel(n, m, drift, diffusion)


ZERO = _process(lambda x, t: np.zeros_like(np.asarray(x, dtype=float)), lambda x, t: np.zeros((1, 1)))
OU = _process(lambda x, t: -np.asarray(x, dtype=float), lambda x, t: np.ones((1, 1)))


# -- RngStream ------------------------------------------------------------------------------


def test_draws_are_a_function_of_the_address():
    a, b = RngStream(42), RngStream(42)
    np.testing.assert_array_equal(a.normal(Stream.PREDICT, 7, (5, 2)), b.normal(Stream.PREDICT, 7, (5, 2)))
    assert not np.array_equal(a.normal(Stream.PREDICT, 7, 5), a.normal(Stream.PREDICT, 8, 5))
    assert not np.array_equal(a.normal(Stream.PREDICT, 7, 5), a.normal(Stream.TRUTH_PROCESS, 7, 5))
    assert not np.array_equal(a.normal(Stream.PREDICT, 7, 5), RngStream(43).normal(Stream.PREDICT, 7, 5))


def test_single_draw_matches_batch_entry():
    r = RngStream(9)
    batch = r.normal(Stream.PREDICT, 3, (10, 4))
    assert r.draw(Stream.PREDICT, 3, 6, 2, 4) == batch[6, 2]


def test_brownian_increment_scaling():
    r = RngStream(1)
    np.testing.assert_allclose(r.brownian(Stream.PREDICT, 0, 4, 0.25),
                               0.5 * r.normal(Stream.PREDICT, 0, 4))


def test_seed_range_is_checked():
    with pytest.raises(ConfigError):
        RngStream(-1)


def test_distinct_time_indices_are_uncorrelated():
    r = RngStream(5)
    a = r.normal(Stream.PREDICT, 0, 20000)
    b = r.normal(Stream.PREDICT, 1, 20000)
    assert abs(np.corrcoef(a, b)[0, 1]) < 4 / math.sqrt(20000)


# -- em_step --------------------------------------------------------------------------------


def test_em_zero_dynamics_leaves_state():
    x = np.array([1.5])
    np.testing.assert_array_equal(em_step(ZERO, x, 0.0, 0.1, np.array([0.3])), x)


def test_em_deterministic_decay():
    m = _process(lambda x, t: -np.asarray(x), lambda x, t: np.zeros((1, 1)))
    assert em_step(m, np.array([1.0]), 0.0, 0.1, np.zeros(1))[0] == pytest.approx(0.9)


def test_em_increment_variance_is_dt():
    m = _process(lambda x, t: np.zeros_like(x), lambda x, t: np.ones((1, 1)))
    n, dt = 10000, 0.01
    dB = RngStream(11).brownian(Stream.TRUTH_PROCESS, 0, (n, 1), dt)
    inc = em_step(m, np.zeros((n, 1)), 0.0, dt, dB)[:, 0]
    se = dt * math.sqrt(2.0 / (n - 1))
    assert abs(inc.var(ddof=1) - dt) < 3 * se


def test_em_is_affine_in_the_increment():
    m = _process(lambda x, t: np.sin(x), lambda x, t: np.array([[2.0, -1.0]]), m=2)
    x, d1, d2 = np.array([0.4]), np.array([0.1, 0.2]), np.array([-0.3, 0.5])
    diff = em_step(m, x, 0.0, 0.1, d1 + d2) - em_step(m, x, 0.0, 0.1, d1)
    np.testing.assert_allclose(diff, np.array([[2.0, -1.0]]) @ d2)


def test_em_state_dependent_diffusion_batches():
    m = _process(lambda x, t: np.zeros_like(x), lambda x, t: np.asarray(x)[..., None], n=1, m=1)
    X = np.array([[1.0], [2.0]])
    np.testing.assert_allclose(em_step(m, X, 0.0, 0.1, np.array([[0.5], [0.5]])), [[1.5], [3.0]])


def test_em_overflow_names_particle():
    m = _process(lambda x, t: np.where(np.asarray(x) > 1, np.inf, 0.0), lambda x, t: np.zeros((1, 1)))
    with pytest.raises(NumericalOverflowError) as info:
        em_step(m, np.array([[0.0], [0.5], [2.0]]), 0.0, 0.1, np.zeros((3, 1)))
    assert info.value.particle_index == 2


def test_em_rejects_non_positive_dt():
    with pytest.raises(ConfigError):
        em_step(ZERO, np.zeros(1), 0.0, 0.0, np.zeros(1))


# -- truth generation ---------------------------------------------------------------------------


def _obs(scale=1.0, noise=0.0):
    return ObservationModel(1, lambda x, t: np.asarray(x)[..., :1] / scale,
                            GaussianNoise([[noise]]), form="sde")


def test_constant_truth_gives_linear_record():
    tr = generate_truth(ZERO, [2.0], 1.0, 0.1, 4, RngStream(0), _obs(0.5))
    np.testing.assert_array_equal(tr.states, np.full((11, 1), 2.0))
    np.testing.assert_allclose(tr.Y[:, 0], 4.0 * tr.times, atol=1e-12)


def test_refine_one_equals_direct_em():
    rng = RngStream(17)
    tr = generate_truth(OU, [1.0], 0.5, 0.05, 1, rng)
    x = np.array([1.0])
    for i in range(10):
        x = em_step(OU, x, 0.05 * i, 0.05, rng.brownian(Stream.TRUTH_PROCESS, i, (1, 1), 0.05)[0])
        np.testing.assert_array_equal(tr.states[i + 1], x)


def test_ou_stationary_variance():
    tr = generate_truth(OU, [0.0], 2000.0, 0.5, 20, RngStream(3))
    x = tr.states[200:, 0]
    rho = math.exp(-0.5)
    se = 0.5 * math.sqrt(2.0 / x.size * (1 + rho ** 2) / (1 - rho ** 2))
    # Euler-Maruyama at h = 0.025 has stationary variance 1 / (2 - h)
    assert abs(x.var() - 1.0 / (2 - 0.025)) < 3 * se
    assert abs(x.var() - 0.5) < 3 * se + 0.01


def test_observation_noise_variance_in_record():
    tr = generate_truth(ZERO, [0.0], 200.0, 0.1, 2, RngStream(8), _obs(1.0, noise=4.0))
    dY = np.diff(tr.Y[:, 0])
    se = 0.4 * math.sqrt(2.0 / (dY.size - 1))
    assert abs(dY.var(ddof=1) - 0.4) < 3 * se


def test_trapezoid_record_is_second_order():
    # x1 = x0 + v t is exact under Euler; h = x1^2 makes the quadrature error visible
    m = _process(lambda x, t: np.stack([x[..., 1], np.zeros_like(x[..., 1])], axis=-1),
                 lambda x, t: np.zeros((2, 1)), n=2)
    obs = ObservationModel(1, lambda x, t: np.asarray(x)[..., :1] ** 2, GaussianNoise([[0.0]]))
    Ys = [generate_truth(m, [0.3, 1.7], 1.0, 0.1, r, RngStream(0), obs).Y for r in (1, 2, 4)]
    e1 = np.abs(Ys[0] - Ys[1]).max()
    e2 = np.abs(Ys[1] - Ys[2]).max()
    assert 3.5 < e1 / e2 < 4.5


def test_algebraic_measurements_recorded():
    alg = ObservationModel(1, lambda x, t: np.asarray(x)[..., :1], GaussianNoise([[0.0]]),
                           form="algebraic")
    tr = generate_truth(OU, [1.0], 1.0, 0.1, 2, RngStream(4), algebraic_observation=alg)
    np.testing.assert_array_equal(tr.y, tr.states)
    assert tr.Y.shape == (11, 0)


def test_truth_is_bit_identical_on_repeat():
    a = generate_truth(OU, [0.2], 2.0, 0.1, 8, RngStream(21), _obs(1.0, 1.0))
    b = generate_truth(OU, [0.2], 2.0, 0.1, 8, RngStream(21), _obs(1.0, 1.0))
    np.testing.assert_array_equal(a.states, b.states)
    np.testing.assert_array_equal(a.Y, b.Y)


def test_truth_overflow_is_reported():
    m = _process(lambda x, t: np.asarray(x) ** 3, lambda x, t: np.zeros((1, 1)))
    with pytest.raises(NumericalOverflowError):
        generate_truth(m, [10.0], 10.0, 0.5, 1, RngStream(0))


def test_truth_argument_checks():
    with pytest.raises(ConfigError):
        generate_truth(OU, [0.0], 1.0, 0.1, 0, RngStream(0))
    with pytest.raises(ConfigError):
        generate_truth(OU, [0.0, 1.0], 1.0, 0.1, 1, RngStream(0))
    with pytest.raises(ConfigError):
        n_steps_for(1.0, 0.3)
    assert n_steps_for(5.0, 0.01) == 500


# -- trajectories and persistence ---------------------------------------------------------------


def test_trajectory_invariants():
    with pytest.raises(ConfigError):
        Trajectory(np.array([0.0, 1.0]), np.zeros((3, 1)), np.zeros((2, 0)), np.zeros((2, 0)))
    with pytest.raises(ConfigError):
        Trajectory(np.array([0.0, 1.0, 3.0]), np.zeros((3, 1)), np.zeros((3, 0)), np.zeros((3, 0)))
    with pytest.raises(ConfigError):
        Trajectory(np.array([0.0, 0.0]), np.zeros((2, 1)), np.zeros((2, 0)), np.zeros((2, 0)))


def test_subsample_keeps_cumulative_record():
    tr = generate_truth(OU, [0.0], 1.0, 0.1, 1, RngStream(2), _obs())
    sub = tr.subsample(5)
    assert sub.dt == pytest.approx(0.5)
    np.testing.assert_array_equal(sub.Y, tr.Y[::5])


def test_save_and_load_round_trip(tmp_path):
    alg = ObservationModel(1, lambda x, t: np.asarray(x)[..., :1], GaussianNoise([[0.1]]),
                           form="algebraic")
    tr = generate_truth(OU, [0.3], 1.0, 0.1, 4, RngStream(6), _obs(0.2, 1.0), alg)
    h = config_hash("problem = x\n")
    path = save_trajectory(tr, tmp_path / "truth.csv", 6, h)
    back, meta = load_trajectory(path)
    for name in ("times", "states", "Y", "y"):
        np.testing.assert_array_equal(getattr(back, name), getattr(tr, name))
    assert meta["seed"] == "6" and meta["config_hash"] == h
    first = path.read_bytes()
    save_trajectory(back, path, 6, h)
    assert path.read_bytes() == first

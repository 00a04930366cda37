import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dualflow.flow import fm_loss, interpolate, sample_noise, target_velocity, v_to_x0

vec = arrays(np.float64, 5, elements=st.floats(-10, 10))


def test_interpolate_midpoint():
    np.testing.assert_array_equal(interpolate([1.0, -1.0], [0.0, 0.0], 0.5), [0.5, -0.5])


def test_interpolate_endpoints():
    x0, eps = np.array([1.5, -2.0]), np.array([0.3, 0.7])
    np.testing.assert_array_equal(interpolate(x0, eps, 1.0), x0)
    np.testing.assert_array_equal(interpolate(x0, eps, 0.0), eps)


def test_interpolate_shape_mismatch():
    with pytest.raises(ValueError):
        interpolate(np.ones(2), np.ones(3), 0.5)


def test_interpolate_variance_monte_carlo():
    rng = np.random.default_rng(0)
    mu, sigma, t = 1.0, 0.5, 0.3
    x0 = mu + sigma * rng.standard_normal(400_000)
    xt = interpolate(x0, rng.standard_normal(x0.shape), t)
    assert xt.var() == pytest.approx(t * t * sigma * sigma + (1 - t) ** 2, rel=0.01)


def test_target_velocity_cases():
    np.testing.assert_array_equal(target_velocity([1.0], [0.0]), [1.0])
    x = np.array([0.2, -0.4])
    np.testing.assert_array_equal(target_velocity(x, x), 0.0)


@settings(max_examples=50)
@given(vec, vec, st.floats(0, 1))
def test_velocity_carries_x_t_to_x0(x0, eps, t):
    xt = interpolate(x0, eps, t)
    np.testing.assert_allclose(xt + (1 - t) * target_velocity(x0, eps), x0, atol=1e-12 * (1 + np.abs(x0).max()))


def test_fm_loss_cases():
    assert fm_loss([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert fm_loss([2.0], [0.0]) == 4.0
    rng = np.random.default_rng(1)
    v, u = rng.standard_normal((4, 6)), rng.standard_normal((4, 6))
    assert fm_loss(v, u) == pytest.approx(np.mean([fm_loss(v[i], u[i]) for i in range(4)]), abs=1e-15)


# dyadic grid values: squared differences can't underflow to zero
grid_vec = arrays(np.float64, 5, elements=st.integers(-80, 80).map(lambda k: k / 8))


@settings(max_examples=50)
@given(grid_vec, grid_vec)
def test_fm_loss_nonnegative_zero_iff_equal(a, b):
    loss = fm_loss(a, b)
    assert loss >= 0
    assert (loss == 0) == bool(np.array_equal(a, b))


def test_v_to_x0_cases():
    assert interpolate(2.0, 1.0, 0.25) == 1.25
    assert v_to_x0(1.25, 0.25, 1.0) == 2.0
    assert v_to_x0(0.7, 1.0, 123.0) == 0.7


def test_round_trip_exact_on_random_draws():
    rng = np.random.default_rng(2)
    x0 = rng.standard_normal((10_000, 3))
    eps = sample_noise(rng, x0.shape)
    t = rng.uniform(0, 1, (10_000, 1))
    back = v_to_x0(interpolate(x0, eps, t), t, target_velocity(x0, eps))
    assert np.max(np.abs(back - x0)) < 1e-12


def test_noise_reproducible():
    a = sample_noise(np.random.default_rng(5), (3, 2))
    b = sample_noise(np.random.default_rng(5), (3, 2))
    np.testing.assert_array_equal(a, b)


def test_time_out_of_range():
    with pytest.raises(ValueError):
        interpolate(1.0, 0.0, 1.5)

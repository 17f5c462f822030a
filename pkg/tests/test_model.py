"""Core model: state mapping, drift/diffusion coefficients, conservation."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fluctsel import model
from fluctsel.model import (ConfigurationError, InitialCondition, ModelParams,
                            SimplexState, Trajectory, marginals, to_state)

RNG = np.random.default_rng(20260809)


def random_params(rng, sigma_max=1.0):
    tl = rng.random() * 3
    return ModelParams(sigma=rng.random() * sigma_max, gamma=0.2 + rng.random(),
                       theta_l=tl, theta_h=tl + rng.random() * 3,
                       r=rng.random(), n_scale=int(rng.integers(1, 9)))


def random_state(rng):
    v = rng.random(4) + 1e-3
    return v / v.sum()


unit = st.floats(min_value=0.0, max_value=1.0)


# ---------------------------------------------------------------------------
# types and state mapping
# ---------------------------------------------------------------------------

def test_to_state_examples():
    np.testing.assert_allclose(to_state(InitialCondition(1.0, 1.0, 0.0)),
                               [0, 0, 1, 0])
    np.testing.assert_allclose(to_state(InitialCondition(0.5, 0.5, 0.5)),
                               [0.25, 0.25, 0.25, 0.25])
    np.testing.assert_allclose(to_state(InitialCondition(0.4, 1.0, 0.0)),
                               [0, 0.6, 0.4, 0])


def test_initial_condition_rejects_out_of_range():
    with pytest.raises(ValueError):
        InitialCondition(x=1.2, p=0.5, q=0.5)
    with pytest.raises(ValueError):
        InitialCondition(x=0.5, p=-0.1, q=0.5)


def test_marginals_examples():
    m = marginals(np.array([0.25, 0.25, 0.25, 0.25]))
    assert (m.x_h, m.x_l, m.x_0, m.x_1, m.d) == (0.5, 0.5, 0.5, 0.5, 0.0)
    m = marginals(np.array([0.0, 0.0, 1.0, 0.0]))
    assert (m.x_h, m.x_l, m.x_0, m.x_1, m.d) == (1.0, 0.0, 1.0, 0.0, 0.0)
    m = marginals(np.array([0.0, 0.5, 0.5, 0.0]))
    assert (m.x_h, m.x_l, m.x_0, m.x_1, m.d) == (0.5, 0.5, 0.5, 0.5, 0.25)


@given(x=unit, p=unit, q=unit)
def test_roundtrip_recovers_initial_condition(x, p, q):
    init = InitialCondition(x=x, p=p, q=q)
    state = to_state(init)
    m = marginals(state)
    assert m.x_h == pytest.approx(x, abs=1e-15)
    if m.x_h > 1e-9:
        assert state[2] / m.x_h == pytest.approx(p, abs=1e-12)
    if m.x_l > 1e-9:
        assert state[0] / m.x_l == pytest.approx(q, abs=1e-12)


def test_simplex_state_validation():
    SimplexState(0.25, 0.25, 0.25, 0.25)
    with pytest.raises(ValueError):
        SimplexState(0.5, 0.5, 0.5, -0.5)
    with pytest.raises(ValueError):
        SimplexState(0.3, 0.3, 0.3, 0.3)


def test_model_params_validation():
    with pytest.raises(ConfigurationError):
        ModelParams(sigma=0.1, gamma=1.0, theta_l=2.0, theta_h=1.0, r=0.5)
    with pytest.raises(ConfigurationError):
        ModelParams(sigma=0.1, gamma=0.0, theta_l=0.0, theta_h=1.0, r=0.5)
    with pytest.raises(ConfigurationError):
        ModelParams(sigma=-0.1, gamma=1.0, theta_l=0.0, theta_h=1.0, r=0.5)
    with pytest.raises(ConfigurationError):
        ModelParams(sigma=0.1, gamma=1.0, theta_l=0.0, theta_h=1.0, r=1.5)


def test_trajectory_validation():
    with pytest.raises(ValueError):
        Trajectory(times=np.array([0.0, 0.0]),
                   states=np.tile([0.25, 0.25, 0.25, 0.25], (2, 1)),
                   env=None, seed=0)
    with pytest.raises(ValueError):
        Trajectory(times=np.array([0.0, 1.0]),
                   states=np.tile([0.25, 0.25, 0.25, 0.25], (2, 1)),
                   env=np.array([1]), seed=0)


# ---------------------------------------------------------------------------
# drift coefficients
# ---------------------------------------------------------------------------

def test_drift_prelimit_no_forces():
    p = ModelParams(sigma=0.0, gamma=1.0, theta_l=0.0, theta_h=0.0, r=0.5)
    np.testing.assert_array_equal(
        model.drift_prelimit(np.full(4, 0.25), +1, p), np.zeros(4))


def test_drift_prelimit_uniform_selection():
    p = ModelParams(sigma=1.0, gamma=1.0, theta_l=0.0, theta_h=0.0, r=0.5,
                    n_scale=1)
    got = model.drift_prelimit(np.full(4, 0.25), +1, p)
    np.testing.assert_allclose(got, [0.125, -0.125, 0.125, -0.125])


def test_drift_limit_uniform_is_mutation_only():
    p = ModelParams(sigma=0.7, gamma=1.0, theta_l=0.3, theta_h=1.5, r=0.2)
    got = model.drift_limit(np.full(4, 0.25), p)
    mut = model._mutation_drift(np.full(4, 0.25), p)
    np.testing.assert_allclose(got, mut, atol=1e-15)


def test_drift_limit_absorbing_vertex():
    p = ModelParams(sigma=0.9, gamma=1.0, theta_l=0.0, theta_h=0.0, r=0.5)
    np.testing.assert_allclose(
        model.drift_limit(np.array([0.0, 0.0, 1.0, 0.0]), p), np.zeros(4),
        atol=1e-15)


def test_drift_limit_worked_example():
    # sigma^2/gamma = 1, mutation off, state (0.1, 0.2, 0.3, 0.4)
    p = ModelParams(sigma=1.0, gamma=1.0, theta_l=0.0, theta_h=0.0, r=0.5)
    got = model.drift_limit(np.array([0.1, 0.2, 0.3, 0.4]), p)
    np.testing.assert_allclose(got, [0.012, -0.016, 0.036, -0.032],
                               atol=1e-15)


def test_drift_sums_vanish_on_random_inputs():
    # rounding scales with the largest rate present (sigma*N selection term)
    for _ in range(200):
        p = random_params(RNG)
        s = random_state(RNG)
        tol = 1e-15 * (1.0 + p.sigma * p.n_scale + p.theta_h)
        for z in (-1, +1):
            assert abs(model.drift_prelimit(s, z, p).sum()) < tol
        assert abs(model.drift_limit(s, p).sum()) < 1e-15 * (1 + p.theta_h)


# ---------------------------------------------------------------------------
# diffusion coefficients
# ---------------------------------------------------------------------------

def test_diffusion_vertex_vanishes():
    p = ModelParams(sigma=0.8, gamma=0.5, theta_l=0.0, theta_h=1.0, r=0.5)
    m = model.diffusion_limit(np.array([1.0, 0.0, 0.0, 0.0]), p)
    np.testing.assert_array_equal(m, np.zeros((4, 7)))


def test_diffusion_column_sums_vanish():
    for _ in range(100):
        p = random_params(RNG)
        m = model.diffusion_limit(random_state(RNG), p)
        np.testing.assert_allclose(m.sum(axis=0), np.zeros(7), atol=1e-15)


def covariance_closed_form(s, params):
    """Quadratic-covariation density: resampling plus environment part."""
    m = marginals(s)
    res = np.diag(s) - np.outer(s, s)
    sign = np.array([1.0, -1.0, 1.0, -1.0])
    opposite = np.array([m.x_1, m.x_0, m.x_1, m.x_0])
    w = sign * s * opposite
    return res + 2.0 * params.sigma_sq_over_gamma * np.outer(w, w)


def test_diffusion_matches_covariance_closed_form():
    for _ in range(100):
        p = random_params(RNG)
        s = random_state(RNG)
        m = model.diffusion_limit(s, p)
        np.testing.assert_allclose(m @ m.T, covariance_closed_form(s, p),
                                   atol=1e-12)


def test_diffusion_clamps_negative_products():
    # slightly off-simplex states must not produce NaNs
    s = np.array([1.0000000001, -1e-10, 0.0, 0.0])
    out = model.resampling_coefficients(s)
    assert np.all(np.isfinite(out))


@settings(max_examples=50)
@given(st.integers(0, 2 ** 32 - 1))
def test_batched_coefficients_match_scalar(seed):
    rng = np.random.default_rng(seed)
    p = random_params(rng)
    batch = np.stack([random_state(rng) for _ in range(5)])
    drift_b = model.drift_limit(batch, p)
    diff_b = model.diffusion_limit(batch, p)
    for i in range(5):
        np.testing.assert_allclose(drift_b[i], model.drift_limit(batch[i], p))
        np.testing.assert_allclose(diff_b[i],
                                   model.diffusion_limit(batch[i], p))

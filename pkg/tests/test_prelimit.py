"""Pre-limit simulator: environment statistics, martingales, convergence."""
import numpy as np
import pytest

from fluctsel import limit, prelimit
from fluctsel.model import ConfigurationError, InitialCondition, ModelParams
from fluctsel.montecarlo import substream
from fluctsel.prelimit import (TelegraphEnv, _occupation_step,
                               convergence_study, count_flips, final_states,
                               simulate_prelimit, step_env, switch_rate)


def params_for(sigma=0.0, theta_l=0.1, theta_h=1.0, r=0.5, n_scale=4,
               gamma=1.0):
    return ModelParams(sigma=sigma, gamma=gamma, theta_l=theta_l,
                       theta_h=theta_h, r=r, n_scale=n_scale)


def test_telegraph_env_validation():
    TelegraphEnv(sign=1, switch_rate=3.0)
    with pytest.raises(ValueError):
        TelegraphEnv(sign=0, switch_rate=3.0)
    with pytest.raises(ValueError):
        TelegraphEnv(sign=1, switch_rate=-1.0)


def test_step_env_zero_rate_keeps_sign():
    rng = substream(0, "t")
    env = TelegraphEnv(sign=-1, switch_rate=0.0)
    assert step_env(env, 10.0, rng).sign == -1


def test_step_env_flip_probability():
    # P(odd number of switches over dt) = (1 - exp(-2 rate dt)) / 2
    rate, dt = 2.0, 0.4
    rng = substream(1, "flips")
    flips = 0
    n = 20000
    for _ in range(n):
        if step_env(TelegraphEnv(1, rate), dt, rng).sign == -1:
            flips += 1
    expect = (1 - np.exp(-2 * rate * dt)) / 2
    se = np.sqrt(expect * (1 - expect) / n)
    assert abs(flips / n - expect) <= 3 * se


def test_occupation_balance_and_flip_rate():
    # long-run occupation of +1 is 1/2; flips over [0, T] ~ Poisson(rate*T)
    rate, dt, steps, batch = 3.0, 0.25, 40, 2000
    rng = substream(2, "occ")
    signs = np.ones(batch)
    occ_total = np.zeros(batch)
    flips_total = np.zeros(batch, dtype=np.int64)
    for _ in range(steps):
        occ, signs, flips = _occupation_step(signs, rate, dt, rng)
        occ_total += occ
        flips_total += flips
    horizon = dt * steps
    frac_plus = (occ_total / horizon + 1) / 2
    se = frac_plus.std(ddof=1) / np.sqrt(batch)
    assert abs(frac_plus.mean() - 0.5) <= 3 * se
    mean_flips = flips_total.mean()
    se = flips_total.std(ddof=1) / np.sqrt(batch)
    assert abs(mean_flips - rate * horizon) <= 3 * se


def test_count_flips_matches_switch_rate():
    params = params_for(n_scale=6, gamma=1.0)
    horizon = 30.0
    flips = [count_flips(params, horizon, dt=0.01, seed=s) for s in range(30)]
    expect = switch_rate(params) * horizon
    se = np.std(flips, ddof=1) / np.sqrt(len(flips))
    assert abs(np.mean(flips) - expect) <= 3 * se


def test_thinned_occupation_law_unchanged():
    # candidate-rate thinning must reproduce the plain switch statistics
    rate, dt, steps, batch = 2.0, 0.25, 40, 3000
    rng = substream(3, "cand")
    acc = substream(3, "acc")
    signs = np.ones(batch)
    flips_total = np.zeros(batch, dtype=np.int64)
    for _ in range(steps):
        _, signs, flips = _occupation_step(signs, rate, dt, rng, acc,
                                           candidate_rate=8.0)
        flips_total += flips
    expect = rate * dt * steps
    se = flips_total.std(ddof=1) / np.sqrt(batch)
    assert abs(flips_total.mean() - expect) <= 3 * se


def test_simulate_prelimit_deterministic():
    params = params_for(sigma=0.4)
    init = InitialCondition(x=0.5, p=0.8, q=0.2)
    t1 = simulate_prelimit(params, init, 0.05, seed=11)
    t2 = simulate_prelimit(params, init, 0.05, seed=11)
    np.testing.assert_array_equal(t1.states, t2.states)
    np.testing.assert_array_equal(t1.env, t2.env)
    t3 = simulate_prelimit(params, init, 0.05, seed=12)
    assert not np.array_equal(t1.states, t3.states)


def test_simulate_prelimit_simplex_and_env():
    params = params_for(sigma=0.5, n_scale=6)
    init = InitialCondition(x=0.4, p=0.9, q=0.1)
    traj = simulate_prelimit(params, init, 0.2, seed=5)
    assert np.all(traj.states >= 0)
    np.testing.assert_allclose(traj.states.sum(axis=1), 1.0, atol=1e-12)
    assert set(np.unique(traj.env)) <= {-1, 1}


def test_absorbing_vertex_is_fixed():
    params = ModelParams(sigma=0.6, gamma=1.0, theta_l=0.0, theta_h=0.0,
                         r=0.5, n_scale=4)
    init = InitialCondition(x=1.0, p=1.0, q=0.5)
    traj = simulate_prelimit(params, init, 0.1, seed=3)
    np.testing.assert_array_equal(traj.states[-1], [0.0, 0.0, 1.0, 0.0])


def test_dt_guard_names_product():
    params = params_for(sigma=1.0, n_scale=16)
    init = InitialCondition(x=0.5, p=0.5, q=0.5)
    with pytest.raises(ConfigurationError, match="sigma"):
        simulate_prelimit(params, init, 1.0, dt=0.01, seed=0)


def test_neutral_martingale_mean():
    params = params_for(sigma=0.0, theta_l=0.1, theta_h=1.0)
    init = InitialCondition(x=0.3, p=0.5, q=0.5)
    states = final_states(params, init, 0.5, 10000, dt=5e-3, seed=21)
    xh = states[:, 2] + states[:, 3]
    se = xh.std(ddof=1) / np.sqrt(len(xh))
    assert abs(xh.mean() - 0.3) <= 3 * se


def test_convergence_study_neutral_exact_zero():
    params = params_for(sigma=0.0)
    init = InitialCondition(x=0.5, p=1.0, q=0.0)
    study = convergence_study(params, init, 0.3, [2, 4], 500, seed=9, dt=5e-3)
    for row in study.rows:
        for stat, (delta, se) in row.deltas.items():
            assert delta <= 3 * se, stat          # exact-zero coupling
            assert delta == 0.0
    assert not study.fast_noise_warning


def test_convergence_study_warns_outside_fast_regime():
    params = params_for(sigma=1.2, gamma=1.0)       # 2 sigma^2/gamma = 2.88
    init = InitialCondition(x=0.5, p=0.9, q=0.1)
    study = convergence_study(params, init, 0.1, [2], 200, seed=9, dt=2e-3)
    assert study.fast_noise_warning
    assert len(study.rows) == 1


def test_convergence_study_validates_inputs():
    params = params_for()
    init = InitialCondition(x=0.5, p=0.5, q=0.5)
    with pytest.raises(ConfigurationError):
        convergence_study(params, init, 0.1, [0, 4], 200, seed=1)
    with pytest.raises(ConfigurationError):
        convergence_study(params, init, 0.1, [2, 4], 50, seed=1)

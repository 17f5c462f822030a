"""Limiting diffusion: martingales, moments, fixation, aggregate dynamics."""
import numpy as np
import pytest

from fluctsel import limit, model
from fluctsel.limit import (check_aggregate_consistency,
                            disequilibrium_integral, estimate_fixation,
                            final_states, simulate_limit, snapshot_moments)
from fluctsel.model import ConfigurationError, InitialCondition, ModelParams
from fluctsel.moments import MomentSpec, first_moment, total_integral


def params_for(sigma=0.0, theta_l=0.1, theta_h=1.0, r=0.5, gamma=1.0):
    return ModelParams(sigma=sigma, gamma=gamma, theta_l=theta_l,
                       theta_h=theta_h, r=r)


def test_simulate_limit_deterministic_and_on_simplex():
    params = params_for(sigma=0.4)
    init = InitialCondition(x=0.5, p=0.8, q=0.2)
    t1 = simulate_limit(params, init, 0.05, seed=4)
    t2 = simulate_limit(params, init, 0.05, seed=4)
    np.testing.assert_array_equal(t1.states, t2.states)
    assert t1.env is None
    assert np.all(t1.states >= 0)
    np.testing.assert_allclose(t1.states.sum(axis=1), 1.0, atol=1e-12)


def test_dt_guard():
    params = params_for(theta_h=30.0)
    init = InitialCondition(x=0.5, p=0.5, q=0.5)
    with pytest.raises(ConfigurationError, match="guard"):
        simulate_limit(params, init, 1.0, dt=0.01, seed=0)


def test_neutral_martingale_mean():
    params = params_for(sigma=0.0)
    init = InitialCondition(x=0.3, p=0.5, q=0.5)
    states = final_states(params, init, 0.5, 10000, dt=5e-3, seed=31)
    xh = states[:, 2] + states[:, 3]
    se = xh.std(ddof=1) / np.sqrt(len(xh))
    assert abs(xh.mean() - 0.3) <= 3 * se


def test_mutation_balance_attracts_type_frequency():
    # theta_l = theta_h = theta, sigma = 0: E[x_0(t)] -> r at t = 20/theta
    params = ModelParams(sigma=0.0, gamma=1.0, theta_l=1.0, theta_h=1.0,
                         r=0.3)
    init = InitialCondition(x=0.5, p=0.9, q=0.9)
    states = final_states(params, init, 20.0, 4000, dt=0.02, seed=32)
    x0 = states[:, 0] + states[:, 2]
    se = x0.std(ddof=1) / np.sqrt(len(x0))
    assert abs(x0.mean() - 0.3) <= 3 * se


def test_symmetric_type_frequency_stays_half():
    # r = 1/2 with symmetric start: full 0 <-> 1 symmetry holds with selection
    params = ModelParams(sigma=np.sqrt(0.2), gamma=1.0, theta_l=0.2,
                         theta_h=1.0, r=0.5)
    init = InitialCondition(x=0.5, p=0.5, q=0.5)
    states = final_states(params, init, 1.0, 6000, dt=2e-3, seed=33)
    x0 = states[:, 0] + states[:, 2]
    se = x0.std(ddof=1) / np.sqrt(len(x0))
    assert abs(x0.mean() - 0.5) <= 3 * se


def test_neutral_first_moment_curve():
    params = params_for(sigma=0.0, theta_l=0.5, theta_h=2.0, r=0.4)
    init = InitialCondition(x=0.5, p=0.8, q=0.3)
    times = [0.5, 1.0]
    snaps = snapshot_moments(params, init, times, 6000, dt=2e-3, seed=34)
    for j, t in enumerate(times):
        xh0 = snaps[j][:, 2]
        closed = first_moment(MomentSpec(targets=(("h", 0),), time=t),
                              init, params)
        se = xh0.std(ddof=1) / np.sqrt(len(xh0))
        assert abs(xh0.mean() - closed) <= 3 * se


# ---------------------------------------------------------------------------
# fixation
# ---------------------------------------------------------------------------

def test_fixation_trivial_endpoints():
    params = params_for(sigma=0.3)
    one = estimate_fixation(params, InitialCondition(1.0, 0.5, 0.5),
                            replicas=1000, dt=5e-3, seed=1)
    assert one.p_fix == 1.0 and one.absorbed_fraction == 1.0
    zero = estimate_fixation(params, InitialCondition(0.0, 0.5, 0.5),
                             replicas=1000, dt=5e-3, seed=1)
    assert zero.p_fix == 0.0


def test_fixation_neutral_equals_initial_frequency():
    params = params_for(sigma=0.0, theta_l=0.3, theta_h=1.2, r=0.4)
    init = InitialCondition(x=0.3, p=0.6, q=0.4)
    est = estimate_fixation(params, init, replicas=3000, dt=5e-3, seed=2)
    assert est.absorbed_fraction > 0.99
    assert abs(est.p_fix - 0.3) <= 3 * est.stderr


def test_fixation_validates_inputs():
    params = params_for()
    init = InitialCondition(x=0.5, p=0.5, q=0.5)
    with pytest.raises(ConfigurationError):
        estimate_fixation(params, init, replicas=10, seed=0)
    with pytest.raises(ConfigurationError):
        estimate_fixation(params, init, replicas=2000, eps_absorb=0.5, seed=0)


def test_fixation_censoring_flagged():
    params = params_for(sigma=0.0)
    init = InitialCondition(x=0.5, p=0.5, q=0.5)
    est = estimate_fixation(params, init, replicas=1000, dt=2e-3,
                            t_cap=0.05, seed=3)
    assert est.censoring_warning
    assert est.absorbed_fraction < 0.99


# ---------------------------------------------------------------------------
# aggregate consistency
# ---------------------------------------------------------------------------

def test_aggregate_consistency_rejects_short_paths():
    params = params_for()
    traj = simulate_limit(params, InitialCondition(0.5, 0.5, 0.5), 0.05,
                          dt=1e-3, seed=5)
    with pytest.raises(ValueError):
        check_aggregate_consistency(traj, params)


def test_aggregate_consistency_neutral_qv():
    # sigma = 0: quadratic variation of x_h against x_h * x_l
    params = params_for(sigma=0.0, theta_l=0.5, theta_h=1.0)
    init = InitialCondition(x=0.5, p=0.7, q=0.3)
    traj = simulate_limit(params, init, 30.0, dt=1e-3, seed=6)
    report = check_aggregate_consistency(traj, params)
    assert abs(report.x_h.qv_ratio - 1.0) <= 3 * report.x_h.qv_ratio_se
    assert abs(report.x_0.qv_ratio - 1.0) <= 3 * report.x_0.qv_ratio_se


def test_aggregate_consistency_zero_drift_when_d_vanishes():
    # p = q makes D = 0 at start and the x_h drift stays proportional to D
    params = ModelParams(sigma=np.sqrt(0.3), gamma=1.0, theta_l=0.4,
                         theta_h=0.4, r=0.5)
    init = InitialCondition(x=0.5, p=0.5, q=0.5)
    traj = simulate_limit(params, init, 20.0, dt=1e-3, seed=7)
    report = check_aggregate_consistency(traj, params)
    assert abs(report.x_h.total_increment - report.x_h.predicted_increment) \
        <= 3 * report.x_h.increment_se


def test_aggregate_consistency_drift_coefficient():
    params = ModelParams(sigma=np.sqrt(0.3), gamma=1.0, theta_l=0.05,
                         theta_h=0.1, r=0.5)
    init = InitialCondition(x=0.5, p=1.0, q=0.0)
    traj = simulate_limit(params, init, 40.0, dt=1e-3, seed=8)
    report = check_aggregate_consistency(traj, params)
    # the single-path regression is noisy; the criterion is its own 3 SE
    assert report.x_h.coefficient is not None
    assert abs(report.x_h.coefficient - 1.0) <= 3 * report.x_h.coefficient_se
    assert abs(report.x_0.coefficient - 1.0) <= 3 * report.x_0.coefficient_se


# ---------------------------------------------------------------------------
# time-integrated disequilibrium
# ---------------------------------------------------------------------------

def test_disequilibrium_integral_matches_total_integral():
    params = params_for(sigma=0.0, theta_l=0.1, theta_h=1.0, r=0.5)
    init = InitialCondition(x=0.5, p=1.0, q=0.0)
    val, se = disequilibrium_integral(params, init, 20.0, 20000, dt=5e-3,
                                      seed=9)
    closed = total_integral(init, params)
    assert abs(val - closed) <= 3 * se

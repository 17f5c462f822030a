"""Euler-Maruyama simulation of the limiting diffusion and derived estimates.

The limit dynamics combine four-type Wright-Fisher resampling, two-way
mutation at modifier-dependent rates, a selection drift of strength
``sigma^2/gamma``, and one shared noise driver of strength
``sigma*sqrt(2/gamma)`` induced by the averaged environment.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import model
from .model import (ConfigurationError, InitialCondition, ModelParams,
                    Trajectory, to_state)
from .montecarlo import (map_batches, mean_and_se, replica_batches, substream)

DT_GUARD = 0.1
ABSORB_WARN_FRACTION = 0.99

# components below BOUNDARY_LAYER * dt take the two-point boundary kernel
BOUNDARY_LAYER = 4.0


def default_dt(params: ModelParams) -> float:
    """Step resolving resampling noise and the stiffest drift present."""
    return min(1e-3, 0.01 / (params.sigma_sq_over_gamma + params.theta_h + 1.0))


def check_dt(dt: float, params: ModelParams) -> None:
    stiff = params.sigma_sq_over_gamma + params.theta_h + 1.0
    if dt <= 0:
        raise ConfigurationError(f"dt must be positive, got {dt}")
    if dt * stiff >= DT_GUARD:
        raise ConfigurationError(
            f"dt * (sigma^2/gamma + theta_h + 1) = {dt * stiff:.4g} "
            f"exceeds the stability guard {DT_GUARD}")


def boundary_step(x, mu, prop, dt, rng_boundary):
    """Finish an Euler proposal with the two-point boundary kernel.

    Components below BOUNDARY_LAYER * dt replace their Gaussian proposal by a
    two-point variable on {0, mu + dt} with mean mu (the conditional mean) and
    variance mu * dt, the local resampling variance.  This keeps every
    component's conditional mean exact, realizes absorption at 0 without the
    systematic clamp inflation of plain projected Euler, and leaves an exact
    zero absorbing whenever its drift vanishes.  The remaining components are
    rescaled among themselves to restore the unit sum.
    """
    layer = x < BOUNDARY_LAYER * dt
    u = rng_boundary.random(x.shape)
    top = mu + dt
    two_point = np.where(u * top < mu, top, 0.0)
    prop = np.where(layer, two_point, prop)
    np.maximum(prop, 0.0, out=prop)
    layer_mass = np.where(layer, prop, 0.0).sum(axis=-1, keepdims=True)
    bulk_mass = np.where(layer, 0.0, prop).sum(axis=-1, keepdims=True)
    scale = (1.0 - layer_mass) / np.where(bulk_mass > 0, bulk_mass, 1.0)
    return np.where(layer, prop, prop * scale)


def _step(x: np.ndarray, params: ModelParams, dt: float, sqrt_dt: float,
          rng: np.random.Generator,
          rng_boundary: np.random.Generator) -> np.ndarray:
    g = rng.standard_normal((x.shape[0], 7))
    b = model.drift_limit(x, params)
    m = model.diffusion_limit(x, params)
    mu = x + b * dt
    prop = mu + np.einsum("bij,bj->bi", m, g) * sqrt_dt
    return boundary_step(x, mu, prop, dt, rng_boundary)


def simulate_limit(params: ModelParams, init: InitialCondition,
                   horizon: float, dt: float | None = None, seed: int = 0,
                   record_every: int = 1) -> Trajectory:
    """Single trajectory of the limiting diffusion on a regular grid."""
    if horizon <= 0:
        raise ConfigurationError("horizon must be positive")
    if dt is None:
        dt = default_dt(params)
    check_dt(dt, params)
    rng = substream(seed, "limit-path")
    rng_b = substream(seed, "limit-path-boundary")
    n_steps = int(round(horizon / dt))
    x = to_state(init)[None, :].copy()
    times = [0.0]
    states = [x[0].copy()]
    sqrt_dt = np.sqrt(dt)
    for k in range(1, n_steps + 1):
        x = _step(x, params, dt, sqrt_dt, rng, rng_b)
        if k % record_every == 0 or k == n_steps:
            times.append(k * dt)
            states.append(x[0].copy())
    return Trajectory(np.array(times), np.array(states), env=None, seed=seed)


def snapshot_moments(params: ModelParams, init: InitialCondition,
                     times, replicas: int, dt: float | None = None,
                     seed: int = 0) -> np.ndarray:
    """(len(times), replicas, 4) ensemble states at the requested times.

    Replica batches run on counter-derived substreams and are concatenated
    in batch order, so the result is independent of threading.
    """
    if dt is None:
        dt = default_dt(params)
    check_dt(dt, params)
    times = np.asarray(times, dtype=float)
    snap_steps = np.round(times / dt).astype(int)
    n_steps = int(snap_steps.max())
    x0 = to_state(init)
    sqrt_dt = np.sqrt(dt)

    def one_batch(batch_idx, start, count):
        rng = substream(seed, "limit", batch_idx)
        rng_b = substream(seed, "limit-boundary", batch_idx)
        x = np.tile(x0, (count, 1))
        out = np.empty((len(times), count, 4))
        for j in np.nonzero(snap_steps == 0)[0]:
            out[j] = x
        for k in range(1, n_steps + 1):
            x = _step(x, params, dt, sqrt_dt, rng, rng_b)
            for j in np.nonzero(snap_steps == k)[0]:
                out[j] = x
        return out

    parts = map_batches(one_batch, replica_batches(replicas))
    return np.concatenate(parts, axis=1)


def final_states(params: ModelParams, init: InitialCondition, horizon: float,
                 replicas: int, dt: float | None = None,
                 seed: int = 0) -> np.ndarray:
    """(replicas, 4) ensemble states at the horizon."""
    return snapshot_moments(params, init, [horizon], replicas, dt, seed)[0]


@dataclass
class FixationEstimate:
    p_fix: float
    stderr: float
    replicas: int
    absorbed_fraction: float
    outcomes: np.ndarray = field(repr=False, default=None)

    @property
    def censoring_warning(self) -> bool:
        return self.absorbed_fraction < ABSORB_WARN_FRACTION


def estimate_fixation(params: ModelParams, init: InitialCondition,
                      replicas: int, eps_absorb: float = 1e-4,
                      t_cap: float = 200.0, dt: float | None = None,
                      seed: int = 0) -> FixationEstimate:
    """Monte Carlo fixation probability of the h allele.

    Each replica runs until x_h <= eps (lost), x_h >= 1-eps (fixed), or
    t_cap; capped replicas contribute their current x_h and are counted as
    censored.  The standard error uses the binomial formula; censoring
    below 1% is within the reporting precision it implies.
    """
    if replicas < 1000:
        raise ConfigurationError("need at least 1000 fixation replicas")
    if not 0.0 < eps_absorb <= 0.01:
        raise ConfigurationError(
            f"eps_absorb must lie in (0, 0.01], got {eps_absorb}")
    if dt is None:
        dt = default_dt(params)
    check_dt(dt, params)
    n_steps = int(round(t_cap / dt))
    x0 = to_state(init)
    sqrt_dt = np.sqrt(dt)

    def one_batch(batch_idx, start, count):
        rng = substream(seed, "fixation", batch_idx)
        rng_b = substream(seed, "fixation-boundary", batch_idx)
        x = np.tile(x0, (count, 1))
        outcome = np.full(count, np.nan)
        active = np.ones(count, dtype=bool)

        def settle():
            xh = x[active, 2] + x[active, 3]
            lost = xh <= eps_absorb
            fixed = xh >= 1.0 - eps_absorb
            done = lost | fixed
            if done.any():
                idx = np.nonzero(active)[0][done]
                outcome[idx] = fixed[done].astype(float)
                active[idx] = False

        settle()
        for _ in range(n_steps):
            if not active.any():
                break
            x[active] = _step(x[active], params, dt, sqrt_dt, rng, rng_b)
            settle()
        censored = active.sum()
        if censored:
            xh = x[active, 2] + x[active, 3]
            outcome[active] = xh
        return outcome, censored

    parts = map_batches(one_batch, replica_batches(replicas))
    outcomes = np.concatenate([p[0] for p in parts])
    censored = sum(p[1] for p in parts)
    p_fix = float(outcomes.mean())
    stderr = float(np.sqrt(max(p_fix * (1 - p_fix), 0.0) / replicas))
    return FixationEstimate(p_fix, stderr, replicas,
                            1.0 - censored / replicas, outcomes=outcomes)


@dataclass
class DriftCheck:
    """Regression of realized increments on the aggregate drift."""

    coefficient: float | None
    coefficient_se: float | None
    total_increment: float
    predicted_increment: float
    increment_se: float
    qv_realized: float
    qv_predicted: float
    qv_ratio: float
    qv_ratio_se: float


@dataclass
class AggregateConsistency:
    x_h: DriftCheck
    x_0: DriftCheck
    n_steps: int


def _drift_check(delta, b, v, dts) -> DriftCheck:
    den = float(np.sum(b * b * dts))
    if den > 0:
        coef = float(np.sum(b * delta) / den)
        coef_se = float(np.sqrt(np.sum(b * b * v * dts)) / den)
    else:
        coef, coef_se = None, None
    qv_pred = float(np.sum(v * dts))
    qv = float(np.sum(delta * delta))
    qv_se = float(np.sqrt(2.0 * np.sum((v * dts) ** 2)))
    return DriftCheck(
        coefficient=coef,
        coefficient_se=coef_se,
        total_increment=float(delta.sum()),
        predicted_increment=float(np.sum(b * dts)),
        increment_se=float(np.sqrt(qv_pred)),
        qv_realized=qv,
        qv_predicted=qv_pred,
        qv_ratio=qv / qv_pred if qv_pred > 0 else float("nan"),
        qv_ratio_se=qv_se / qv_pred if qv_pred > 0 else float("nan"),
    )


def check_aggregate_consistency(traj: Trajectory,
                                params: ModelParams) -> AggregateConsistency:
    """Check a path against the aggregate h-frequency and type-0 dynamics.

    Along the path, increments of x_h must have drift
    (sigma^2/gamma) * D * (x_1 - x_0) and quadratic variation
    x_h*x_l + (2 sigma^2/gamma) * D^2 per unit time; x_0 has drift
    (sigma^2/gamma) x_0 x_1 (x_1 - x_0) + theta_l (r - x_0)
    + (theta_h - theta_l)(r x_h1 - (1-r) x_h0) and quadratic variation
    x_0*x_1 + (2 sigma^2/gamma) (x_0 x_1)^2.
    """
    if len(traj) < 1001:
        raise ValueError("trajectory too short: need at least 1000 steps")
    s = traj.states
    dts = np.diff(traj.times)
    m = model.marginals(s[:-1])
    c = params.sigma_sq_over_gamma
    r = params.r

    delta_h = np.diff(s[:, 2] + s[:, 3])
    b_h = c * m.d * (m.x_1 - m.x_0)
    v_h = m.x_h * m.x_l + 2.0 * c * m.d ** 2

    delta_0 = np.diff(s[:, 0] + s[:, 2])
    b_0 = (c * m.x_0 * m.x_1 * (m.x_1 - m.x_0)
           + params.theta_l * (r - m.x_0)
           + (params.theta_h - params.theta_l)
           * (r * s[:-1, 3] - (1 - r) * s[:-1, 2]))
    v_0 = m.x_0 * m.x_1 + 2.0 * c * (m.x_0 * m.x_1) ** 2

    return AggregateConsistency(
        x_h=_drift_check(delta_h, b_h, v_h, dts),
        x_0=_drift_check(delta_0, b_0, v_0, dts),
        n_steps=len(dts),
    )


def disequilibrium_integral(params: ModelParams, init: InitialCondition,
                            horizon: float, replicas: int,
                            dt: float | None = None,
                            seed: int = 0) -> tuple[float, float]:
    """Monte Carlo time integral of E[D * (x_1 - x_0)] over [0, horizon].

    Per-path trapezoid integration of the disequilibrium-weighted type
    imbalance; returns (estimate, standard error).  With selection off this
    converges to the closed-form total integral as horizon grows.
    """
    if dt is None:
        dt = default_dt(params)
    check_dt(dt, params)
    n_steps = int(round(horizon / dt))
    x0 = to_state(init)
    sqrt_dt = np.sqrt(dt)

    def integrand(x):
        m = model.marginals(x)
        return m.d * (m.x_1 - m.x_0)

    def one_batch(batch_idx, start, count):
        rng = substream(seed, "d-integral", batch_idx)
        rng_b = substream(seed, "d-integral-boundary", batch_idx)
        x = np.tile(x0, (count, 1))
        acc = 0.5 * integrand(x) * dt
        for k in range(1, n_steps + 1):
            x = _step(x, params, dt, sqrt_dt, rng, rng_b)
            w = 0.5 if k == n_steps else 1.0
            acc += w * integrand(x) * dt
        return acc

    parts = map_batches(one_batch, replica_batches(replicas))
    return mean_and_se(np.concatenate(parts))

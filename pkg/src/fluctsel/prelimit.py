"""Pre-limit system: Euler-Maruyama with an exactly embedded fast environment.

The environment sign flips between -1 and +1 at rate ``n_scale^2 * gamma / 2``
per direction.  Within each Euler step the switch times are sampled exactly
and the selection drift uses the signed occupation integral of the
environment over the step, so the fast switching is never aliased by the
step size.  For growing ``n_scale`` the law of the path approaches the
limiting diffusion of :mod:`fluctsel.limit`.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import limit, model
from .model import (ConfigurationError, InitialCondition, ModelParams,
                    Trajectory, to_state)
from .montecarlo import (map_batches, mean_and_se, replica_batches, substream,
                         variance_and_se)

DT_GUARD = 0.1


@dataclass(frozen=True)
class TelegraphEnv:
    """Two-state environment sign with its per-direction switch rate."""

    sign: int
    switch_rate: float

    def __post_init__(self):
        if self.sign not in (-1, 1):
            raise ValueError(f"sign must be -1 or +1, got {self.sign}")
        if self.switch_rate < 0:
            raise ValueError("switch_rate must be >= 0")


def switch_rate(params: ModelParams) -> float:
    return params.n_scale ** 2 * params.gamma / 2.0


def step_env(env: TelegraphEnv, dt: float,
             rng: np.random.Generator) -> TelegraphEnv:
    """Advance the environment by dt using exact exponential holding times."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    sign = env.sign
    if env.switch_rate > 0:
        remaining = dt
        while True:
            hold = rng.exponential(1.0 / env.switch_rate)
            if hold >= remaining:
                break
            remaining -= hold
            sign = -sign
    return TelegraphEnv(sign, env.switch_rate)


def _occupation_step(signs: np.ndarray, rate: float, dt: float,
                     rng: np.random.Generator,
                     rng_accept: np.random.Generator | None = None,
                     candidate_rate: float | None = None):
    """Signed occupation integral of the environment over one step.

    Returns (occ, signs, flips): occ[i] is the exact integral of the sign
    over [0, dt] for replica i, signs the end-of-step signs, flips the
    per-replica switch counts.  Holding times are exponential; the
    memoryless property lets each step start a fresh clock.

    With ``candidate_rate >= rate``, switch candidates arrive at the faster
    rate and each one flips the sign with probability rate/candidate_rate
    (Poisson thinning, so the law is unchanged).  Runs that share the
    candidate and acceptance streams but differ in ``rate`` then see nested
    flip sets, which couples environments across n_scale values and keeps
    the random-stream consumption identical for all of them.
    """
    n = signs.shape[0]
    occ = np.zeros(n)
    flips = np.zeros(n, dtype=np.int64)
    if rate <= 0:
        return signs * dt, signs.copy(), flips
    cand = rate if candidate_rate is None else candidate_rate
    if cand < rate:
        raise ValueError("candidate_rate must dominate the switch rate")
    accept_p = rate / cand
    signs = signs.copy()
    remaining = np.full(n, dt)
    active = np.ones(n, dtype=bool)
    while active.any():
        hold = rng.exponential(1.0 / cand, size=n)
        if candidate_rate is not None:
            # always consume acceptance draws so coupled runs stay aligned
            accepted = rng_accept.random(n) < accept_p
        else:
            accepted = np.ones(n, dtype=bool)
        seg = np.minimum(hold, remaining)
        occ[active] += signs[active] * seg[active]
        flip = active & (hold < remaining) & accepted
        signs[flip] = -signs[flip]
        flips[flip] += 1
        remaining = remaining - seg
        active = remaining > 1e-18
    return occ, signs, flips


def default_dt(params: ModelParams) -> float:
    """Resolves both the resampling noise and the stiff selection term."""
    stiff = params.sigma * params.n_scale + params.theta_h + 1.0
    return min(1e-3, 0.01 / stiff)


def check_dt(dt: float, params: ModelParams) -> None:
    stiff = params.sigma * params.n_scale + params.theta_h + 1.0
    if dt <= 0:
        raise ConfigurationError(f"dt must be positive, got {dt}")
    if dt * stiff >= DT_GUARD:
        raise ConfigurationError(
            f"dt * (sigma*N + theta_h + 1) = {dt * stiff:.4g} exceeds the "
            f"stability guard {DT_GUARD}")


def _selection_coefficients(x: np.ndarray, params: ModelParams) -> np.ndarray:
    m = model.marginals(x)
    rate = params.sigma * params.n_scale
    return rate * np.stack([
        x[..., 0] * m.x_1,
        -x[..., 1] * m.x_0,
        x[..., 2] * m.x_1,
        -x[..., 3] * m.x_0,
    ], axis=-1)


def _step_batch(x, signs, params, dt, sqrt_dt, rng_gauss, rng_env,
                rng_boundary, rng_env_accept=None, env_candidate_rate=None):
    occ, signs, flips = _occupation_step(signs, switch_rate(params), dt,
                                         rng_env, rng_env_accept,
                                         env_candidate_rate)
    g = rng_gauss.standard_normal((x.shape[0], 6))
    mu = (x + _selection_coefficients(x, params) * occ[:, None]
          + model._mutation_drift(x, params) * dt)
    noise = np.einsum("bij,bj->bi", model.resampling_coefficients(x), g)
    prop = mu + noise * sqrt_dt
    x = limit.boundary_step(x, mu, prop, dt, rng_boundary)
    return x, signs, flips


def simulate_prelimit(params: ModelParams, init: InitialCondition,
                      horizon: float, dt: float | None = None,
                      seed: int = 0) -> Trajectory:
    """Single pre-limit trajectory; records the environment sign per step.

    The initial sign is drawn uniformly (the switching law is symmetric).
    """
    if horizon <= 0:
        raise ConfigurationError("horizon must be positive")
    if dt is None:
        dt = default_dt(params)
    check_dt(dt, params)
    rng_gauss = substream(seed, "prelimit-path-gauss")
    rng_env = substream(seed, "prelimit-path-env")
    rng_b = substream(seed, "prelimit-path-boundary")
    n_steps = int(round(horizon / dt))
    x = to_state(init)[None, :].copy()
    signs = np.array([1 if rng_env.random() < 0.5 else -1], dtype=float)
    times = [0.0]
    states = [x[0].copy()]
    env = [int(signs[0])]
    sqrt_dt = np.sqrt(dt)
    for k in range(1, n_steps + 1):
        x, signs, _ = _step_batch(x, signs, params, dt, sqrt_dt,
                                  rng_gauss, rng_env, rng_b)
        times.append(k * dt)
        states.append(x[0].copy())
        env.append(int(signs[0]))
    return Trajectory(np.array(times), np.array(states),
                      env=np.array(env), seed=seed)


def final_states(params: ModelParams, init: InitialCondition, horizon: float,
                 replicas: int, dt: float | None = None, seed: int = 0,
                 env_candidate_rate: float | None = None,
                 env_sign_flip: bool = False) -> np.ndarray:
    """(replicas, 4) pre-limit ensemble at the horizon.

    Batch substreams carry no n_scale tag, so runs at different n_scale
    share their Gaussian increments.  Passing the same env_candidate_rate
    (at least the fastest switch rate involved) additionally couples the
    environment paths across n_scale by nested thinning; both devices leave
    each run's law untouched and only correlate the ensembles, which
    stabilizes convergence-trend comparisons.
    """
    if dt is None:
        dt = default_dt(params)
    check_dt(dt, params)
    n_steps = int(round(horizon / dt))
    x0 = to_state(init)
    sqrt_dt = np.sqrt(dt)

    def one_batch(batch_idx, start, count):
        rng_gauss = substream(seed, "prelimit-gauss", batch_idx)
        rng_env = substream(seed, "prelimit-env", batch_idx)
        rng_b = substream(seed, "prelimit-boundary", batch_idx)
        rng_acc = substream(seed, "prelimit-env-accept", batch_idx)
        x = np.tile(x0, (count, 1))
        signs = np.where(rng_env.random(count) < 0.5, 1.0, -1.0)
        if env_sign_flip:
            # same switch times, negated sign path: antithetic environment
            signs = -signs
        for _ in range(n_steps):
            x, signs, _ = _step_batch(x, signs, params, dt, sqrt_dt,
                                      rng_gauss, rng_env, rng_b,
                                      rng_acc, env_candidate_rate)
        return x

    parts = map_batches(one_batch, replica_batches(replicas))
    return np.concatenate(parts, axis=0)


def count_flips(params: ModelParams, horizon: float, dt: float,
                seed: int = 0) -> int:
    """Total environment switches along one path over [0, horizon]."""
    rng = substream(seed, "env-flips")
    signs = np.array([1.0])
    total = 0
    n_steps = int(round(horizon / dt))
    for _ in range(n_steps):
        _, signs, flips = _occupation_step(signs, switch_rate(params), dt, rng)
        total += int(flips[0])
    return total


@dataclass
class ConvergenceRow:
    """Per-n_scale moments at the horizon plus paired discrepancies.

    Discrepancies are measured replica-by-replica against a limit reference
    driven by the same resampling Gaussians, so delta standard errors reflect
    the coupled differences rather than two independent ensembles.
    """

    n_scale: int
    mean_xh: float
    mean_xh_se: float
    var_xh: float
    var_xh_se: float
    mean_x0: float
    mean_x0_se: float
    var_x0: float
    var_x0_se: float
    deltas: dict = field(default_factory=dict)


@dataclass
class ConvergenceStudy:
    rows: list[ConvergenceRow]
    reference: ConvergenceRow
    fast_noise_warning: bool
    monotone: dict = field(default_factory=dict)

    def delta_table(self) -> list[dict]:
        out = []
        for row in self.rows:
            entry = {"n_scale": row.n_scale}
            for stat, (dv, se) in row.deltas.items():
                entry[f"delta_{stat}"] = dv
                entry[f"joint_se_{stat}"] = se
            out.append(entry)
        return out


def _summary_row(states: np.ndarray, n_scale: int) -> ConvergenceRow:
    m = model.marginals(states)
    mean_xh, mean_xh_se = mean_and_se(m.x_h)
    var_xh, var_xh_se = variance_and_se(m.x_h)
    mean_x0, mean_x0_se = mean_and_se(m.x_0)
    var_x0, var_x0_se = variance_and_se(m.x_0)
    return ConvergenceRow(n_scale, mean_xh, mean_xh_se, var_xh, var_xh_se,
                          mean_x0, mean_x0_se, var_x0, var_x0_se)


def _coupled_limit_states(params: ModelParams, init: InitialCondition,
                          horizon: float, replicas: int, dt: float,
                          seed: int, w_sign: float = 1.0) -> np.ndarray:
    """Limit ensemble driven by the pre-limit batches' resampling Gaussians.

    The six pairwise-resampling increments come from the same substreams the
    pre-limit ensemble uses, while the averaged-environment driver and the
    boundary kernel use their own streams.  The marginal law is the exact
    limit dynamics; the coupling only correlates the two ensembles so that
    paired moment discrepancies carry far less Monte Carlo noise.
    """
    limit.check_dt(dt, params)
    n_steps = int(round(horizon / dt))
    x0 = to_state(init)
    sqrt_dt = np.sqrt(dt)

    def one_batch(batch_idx, start, count):
        rng_shared = substream(seed, "prelimit-gauss", batch_idx)
        rng_w = substream(seed, "limit-wcol", batch_idx)
        rng_b = substream(seed, "prelimit-boundary", batch_idx)
        x = np.tile(x0, (count, 1))
        for _ in range(n_steps):
            g6 = rng_shared.standard_normal((count, 6))
            g1 = w_sign * rng_w.standard_normal(count)
            mu = x + model.drift_limit(x, params) * dt
            noise = np.einsum("bij,bj->bi", model.resampling_coefficients(x),
                              g6)
            noise += model.environment_noise_column(x, params) * g1[:, None]
            prop = mu + noise * sqrt_dt
            x = limit.boundary_step(x, mu, prop, dt, rng_b)
        return x

    parts = map_batches(one_batch, replica_batches(replicas))
    return np.concatenate(parts, axis=0)


def _paired_deltas(pre_arms, ref_arms) -> dict:
    """|moment difference| with paired standard errors for x_h and x_0.

    Each argument is a list of coupled ensemble arms (plain, or plain plus
    its antithetic partner); pairing happens replica-by-replica and the
    arms of one system are averaged within each pair.
    """
    out = {}
    mp = [model.marginals(a) for a in pre_arms]
    mr = [model.marginals(a) for a in ref_arms]
    for stat, field_ in (("mean_xh", "x_h"), ("mean_x0", "x_0")):
        a = np.mean([getattr(m, field_) for m in mp], axis=0)
        b = np.mean([getattr(m, field_) for m in mr], axis=0)
        d, se = mean_and_se(a - b)
        out[stat] = (abs(d), se)
    for stat, field_ in (("var_xh", "x_h"), ("var_x0", "x_0")):
        sq_a = np.mean([(getattr(m, field_) - getattr(m, field_).mean()) ** 2
                        for m in mp], axis=0)
        sq_b = np.mean([(getattr(m, field_) - getattr(m, field_).mean()) ** 2
                        for m in mr], axis=0)
        d, se = mean_and_se(sq_a - sq_b)
        out[stat] = (abs(d), se)
    return out


def convergence_study(params: ModelParams, init: InitialCondition,
                      horizon: float, n_values, replicas: int, seed: int = 0,
                      dt: float | None = None,
                      antithetic: bool = True) -> ConvergenceStudy:
    """Moment discrepancies of the pre-limit system against the limit.

    Pre-limit ensembles at every n_scale share their Gaussian streams with
    each other and with a coupled limit-reference ensemble, so the tabulated
    discrepancies Delta(N) = |m_prelimit(N) - m_limit| carry paired standard
    errors.  With ``antithetic`` (default) each system also runs a partner
    arm with the environment sign path (resp. the averaged-environment
    driver) negated, cancelling the odd-order noise of the discrepancies;
    ``replicas`` then counts total paths per system, split into two arms.
    Without selection the coupled systems coincide pathwise and every
    discrepancy is exactly zero.  Reports a non-increasing-trend flag per
    statistic.  A fast-noise warning is set when 2*sigma^2/gamma >= 1; the
    study itself still runs (the bound only gates the duality oracle).
    """
    n_values = sorted(int(n) for n in n_values)
    if any(n < 1 for n in n_values):
        raise ConfigurationError("all n_scale values must be >= 1")
    if replicas < 100:
        raise ConfigurationError("need at least 100 replicas")
    if dt is None:
        dt = min(default_dt(params_with_n(params, n)) for n in n_values)
        dt = min(dt, limit.default_dt(params))
    for n in n_values:
        check_dt(dt, params_with_n(params, n))
    limit.check_dt(dt, params)

    arm_replicas = replicas // 2 if antithetic else replicas
    w_signs = (1.0, -1.0) if antithetic else (1.0,)
    ref_arms = [_coupled_limit_states(params, init, horizon, arm_replicas,
                                      dt, seed, w_sign=w)
                for w in w_signs]
    reference = _summary_row(np.concatenate(ref_arms, axis=0), 0)

    cand_rate = switch_rate(params_with_n(params, max(n_values)))
    flips = (False, True) if antithetic else (False,)
    rows = []
    for n in n_values:
        arms = [final_states(params_with_n(params, n), init, horizon,
                             arm_replicas, dt=dt, seed=seed,
                             env_candidate_rate=cand_rate, env_sign_flip=f)
                for f in flips]
        row = _summary_row(np.concatenate(arms, axis=0), n)
        row.deltas = _paired_deltas(arms, ref_arms)
        rows.append(row)

    monotone = {}
    for stat in ("mean_xh", "var_xh", "mean_x0", "var_x0"):
        deltas = [row.deltas[stat][0] for row in rows]
        monotone[stat] = all(b <= a for a, b in zip(deltas, deltas[1:]))

    return ConvergenceStudy(
        rows=rows,
        reference=reference,
        fast_noise_warning=2.0 * params.sigma_sq_over_gamma >= 1.0,
        monotone=monotone,
    )


def params_with_n(params: ModelParams, n_scale: int) -> ModelParams:
    return ModelParams(sigma=params.sigma, gamma=params.gamma,
                       theta_l=params.theta_l, theta_h=params.theta_h,
                       r=params.r, n_scale=n_scale)

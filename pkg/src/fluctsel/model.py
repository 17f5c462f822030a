"""Core data model and coefficient functions for the two-locus modifier system.

The population carries a modifier locus with alleles ``l`` (low mutation rate
``theta_l``) and ``h`` (high rate ``theta_h``), and a selected locus with types
``0`` and ``1``.  States live on the 3-simplex of type frequencies, ordered
``(x_l0, x_l1, x_h0, x_h1)`` throughout the package.

Two dynamical regimes are covered: the pre-limit system driven by a fast
telegraph environment of intensity ``sigma * n_scale``, and its limit, a
four-type Wright-Fisher diffusion with an extra correlated noise of strength
``sigma * sqrt(2/gamma)`` and a quadratic selection drift ``sigma^2/gamma``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

STATE_LABELS = ("x_l0", "x_l1", "x_h0", "x_h1")

SIMPLEX_TOL = 1e-12


class FluctselError(Exception):
    """Base class for package errors."""


class ConfigurationError(FluctselError):
    """Raised for invalid parameter combinations or numerics settings."""


@dataclass(frozen=True)
class ModelParams:
    """Model constants.

    sigma:   selection intensity (>= 0)
    gamma:   environmental switch-rate scale (> 0)
    theta_l: mutation rate on the l background (>= 0)
    theta_h: mutation rate on the h background (>= theta_l)
    r:       probability a mutation produces type 0 (in [0, 1])
    n_scale: pre-limit speed parameter N (integer >= 1, pre-limit only)
    """

    sigma: float
    gamma: float
    theta_l: float
    theta_h: float
    r: float
    n_scale: int = 1

    def __post_init__(self):
        if not 0.0 <= self.theta_l <= self.theta_h:
            raise ConfigurationError(
                f"need 0 <= theta_l <= theta_h, got theta_l={self.theta_l}, "
                f"theta_h={self.theta_h}")
        if not 0.0 <= self.r <= 1.0:
            raise ConfigurationError(f"r must lie in [0, 1], got {self.r}")
        if self.sigma < 0.0:
            raise ConfigurationError(f"sigma must be >= 0, got {self.sigma}")
        if self.gamma <= 0.0:
            raise ConfigurationError(f"gamma must be > 0, got {self.gamma}")
        if int(self.n_scale) != self.n_scale or self.n_scale < 1:
            raise ConfigurationError(
                f"n_scale must be an integer >= 1, got {self.n_scale}")

    @property
    def sigma_sq_over_gamma(self) -> float:
        return self.sigma ** 2 / self.gamma


@dataclass(frozen=True)
class SimplexState:
    """Four type frequencies on the 3-simplex."""

    x_l0: float
    x_l1: float
    x_h0: float
    x_h1: float

    def __post_init__(self):
        arr = self.array
        validate_state(arr)

    @property
    def array(self) -> np.ndarray:
        return np.array([self.x_l0, self.x_l1, self.x_h0, self.x_h1])

    @classmethod
    def from_array(cls, arr) -> "SimplexState":
        arr = np.asarray(arr, dtype=float)
        return cls(*arr.tolist())


def validate_state(arr, tol: float = SIMPLEX_TOL) -> None:
    """Raise ValueError unless ``arr`` is a frequency vector on the simplex."""
    arr = np.asarray(arr, dtype=float)
    if arr.shape[-1] != 4:
        raise ValueError(f"state must have 4 components, got shape {arr.shape}")
    if np.any(arr < -tol) or np.any(arr > 1.0 + tol):
        raise ValueError(f"state components outside [0, 1]: {arr}")
    sums = arr.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > tol):
        raise ValueError(f"state components must sum to 1 within {tol}: {arr}")


@dataclass(frozen=True)
class InitialCondition:
    """(x, p, q) parametrization of the starting point.

    x: initial frequency of the h allele
    p: initial fraction of type 0 among h individuals
    q: initial fraction of type 0 among l individuals
    """

    x: float
    p: float
    q: float

    def __post_init__(self):
        for name in ("x", "p", "q"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")


def to_state(init: InitialCondition) -> np.ndarray:
    """Map (x, p, q) to the frequency vector (x_l0, x_l1, x_h0, x_h1)."""
    x, p, q = init.x, init.p, init.q
    return np.array([q * (1 - x), (1 - q) * (1 - x), p * x, (1 - p) * x])


class Marginals(NamedTuple):
    x_h: np.ndarray
    x_l: np.ndarray
    x_0: np.ndarray
    x_1: np.ndarray
    d: np.ndarray


def marginals(state) -> Marginals:
    """Allele marginals and linkage disequilibrium D = x_h0*x_l1 - x_h1*x_l0.

    Accepts a single state (4,) or a batch (..., 4); returns arrays (or
    scalars) of matching shape.
    """
    s = np.asarray(state, dtype=float)
    x_h = s[..., 2] + s[..., 3]
    x_0 = s[..., 0] + s[..., 2]
    d = s[..., 2] * s[..., 1] - s[..., 3] * s[..., 0]
    return Marginals(x_h, 1.0 - x_h, x_0, 1.0 - x_0, d)


def recover_initial_condition(state) -> InitialCondition:
    """Inverse of ``to_state`` where defined (p, q need x_h > 0, x_l > 0)."""
    s = np.asarray(state, dtype=float)
    m = marginals(s)
    x_h = float(m.x_h)
    p = float(s[2] / m.x_h) if m.x_h > 0 else 0.0
    q = float(s[0] / m.x_l) if m.x_l > 0 else 0.0
    return InitialCondition(x=x_h, p=p, q=q)


def _mutation_drift(s, params: ModelParams) -> np.ndarray:
    r = params.r
    flow_l = params.theta_l * (r * s[..., 1] - (1 - r) * s[..., 0])
    flow_h = params.theta_h * (r * s[..., 3] - (1 - r) * s[..., 2])
    return np.stack([flow_l, -flow_l, flow_h, -flow_h], axis=-1)


def drift_prelimit(state, z, params: ModelParams) -> np.ndarray:
    """dt-coefficients of the pre-limit system at environment sign z.

    ``z`` may be a scalar +-1 or an array broadcastable against the batch.
    Components sum to zero exactly (selection conserves mass pairwise, and
    each mutation flow enters with both signs).
    """
    s = np.asarray(state, dtype=float)
    m = marginals(s)
    zz = np.asarray(z, dtype=float)
    rate = params.sigma * params.n_scale
    sel = np.stack([
        rate * zz * s[..., 0] * m.x_1,
        -rate * zz * s[..., 1] * m.x_0,
        rate * zz * s[..., 2] * m.x_1,
        -rate * zz * s[..., 3] * m.x_0,
    ], axis=-1)
    return sel + _mutation_drift(s, params)


def drift_limit(state, params: ModelParams) -> np.ndarray:
    """dt-coefficients of the limiting diffusion."""
    s = np.asarray(state, dtype=float)
    m = marginals(s)
    c = params.sigma_sq_over_gamma
    diff = m.x_1 - m.x_0
    sel = np.stack([
        c * s[..., 0] * m.x_1 * diff,
        -c * s[..., 1] * m.x_0 * diff,
        c * s[..., 2] * m.x_1 * diff,
        -c * s[..., 3] * m.x_0 * diff,
    ], axis=-1)
    return sel + _mutation_drift(s, params)


def resampling_coefficients(state) -> np.ndarray:
    """(..., 4, 6) noise matrix of the six pairwise resampling drivers.

    Column k couples one unordered pair of types with coefficient
    sqrt(x_a * x_b) and opposite signs, so every column sums to zero.
    Products are clamped at 0 before the square root: an Euler step can
    leave the simplex by O(dt) and the clamp preserves absorption.
    """
    s = np.asarray(state, dtype=float)
    def root(i, j):
        return np.sqrt(np.maximum(s[..., i] * s[..., j], 0.0))

    zero = np.zeros(np.broadcast_shapes(s[..., 0].shape))
    c01, c02, c03 = root(0, 1), root(0, 2), root(0, 3)
    c12, c13, c23 = root(1, 2), root(1, 3), root(2, 3)
    cols = [
        np.stack([c01, -c01, zero, zero], axis=-1),
        np.stack([c02, zero, -c02, zero], axis=-1),
        np.stack([c03, zero, zero, -c03], axis=-1),
        np.stack([zero, c12, -c12, zero], axis=-1),
        np.stack([zero, c13, zero, -c13], axis=-1),
        np.stack([zero, zero, c23, -c23], axis=-1),
    ]
    return np.stack(cols, axis=-1)


def environment_noise_column(state, params: ModelParams) -> np.ndarray:
    """(..., 4) coefficients of the shared environment driver in the limit."""
    s = np.asarray(state, dtype=float)
    m = marginals(s)
    amp = params.sigma * np.sqrt(2.0 / params.gamma)
    return amp * np.stack([
        s[..., 0] * m.x_1,
        -s[..., 1] * m.x_0,
        s[..., 2] * m.x_1,
        -s[..., 3] * m.x_0,
    ], axis=-1)


def diffusion_limit(state, params: ModelParams) -> np.ndarray:
    """(..., 4, 7) noise matrix of the limiting diffusion.

    Columns 0..5 are the pairwise resampling drivers, column 6 the shared
    environment driver.  Each column sums to zero.
    """
    return np.concatenate(
        [resampling_coefficients(state),
         environment_noise_column(state, params)[..., None]],
        axis=-1)


@dataclass
class Trajectory:
    """A simulated path: grid times, states, optional environment signs."""

    times: np.ndarray
    states: np.ndarray
    env: np.ndarray | None
    seed: int

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.states = np.asarray(self.states, dtype=float)
        if self.states.shape != (len(self.times), 4):
            raise ValueError("states must have shape (len(times), 4)")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")
        if self.env is not None:
            self.env = np.asarray(self.env)
            if self.env.shape != self.times.shape:
                raise ValueError("env must match times in length")

    def __len__(self) -> int:
        return len(self.times)

    def state_at(self, i: int) -> SimplexState:
        return SimplexState.from_array(self.states[i])

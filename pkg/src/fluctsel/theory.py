"""Closed-form fixation-probability correction for the h allele.

For small ``sigma^2/gamma`` the fixation probability of the high-mutation
allele is ``x + (sigma^2/gamma) * correction + o(sigma^2/gamma)``.  The
correction is implemented twice, from two published algebraic forms, with no
shared subexpressions: the pair acts as a transcription-error detector for
the long formula (they must agree to 1e-12 everywhere).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import InitialCondition

IDENTITY_TOL = 1e-12


@dataclass(frozen=True)
class CorrectionInput:
    """Inputs of the correction formula.

    Unlike ModelParams, theta_l <= theta_h is not required: the sign-flip
    symmetry check needs the swapped ordering.
    """

    init: InitialCondition
    theta_l: float
    theta_h: float
    r: float

    def __post_init__(self):
        if self.theta_l < 0 or self.theta_h < 0:
            raise ValueError("mutation rates must be >= 0")
        if not 0.0 <= self.r <= 1.0:
            raise ValueError(f"r must lie in [0, 1], got {self.r}")

    @property
    def args(self):
        return (self.init.x, self.init.p, self.init.q,
                self.r, self.theta_l, self.theta_h)


def correction_direct(x, p, q, r, theta_l, theta_h):
    """Bracketed x(1-x)[...] form of the correction.  Array-friendly."""
    x = np.asarray(x, dtype=float)
    p, q, r = np.asarray(p, float), np.asarray(q, float), np.asarray(r, float)
    tl, th = np.asarray(theta_l, float), np.asarray(theta_h, float)
    bracket = (
        (2 * r - 1) * (q - r) * (1 + 2 * tl) / ((1 + tl) * (3 + 2 * tl))
        - (2 * r - 1) * (p - r) * (1 + 2 * th) / ((1 + th) * (3 + 2 * th))
        + 2 * ((1 - x) * (q - r) ** 2 / (3 + 2 * tl)
               - x * (p - r) ** 2 / (3 + 2 * th)
               + (2 * x - 1) * (p - r) * (q - r) / (3 + tl + th)
               + r * (1 - r) * (1 / (3 + 2 * tl) - 1 / (3 + 2 * th)))
    )
    return x * (1 - x) * bracket


def correction_factored(x, p, q, r, theta_l, theta_h):
    """Same quantity via the factorization in (p-q), (theta_h-theta_l)."""
    x = np.asarray(x, dtype=float)
    p, q, r = np.asarray(p, float), np.asarray(q, float), np.asarray(r, float)
    tl, th = np.asarray(theta_l, float), np.asarray(theta_h, float)
    term_pq = (p - q) * (
        (1 - 2 * r) * (1 + 2 * tl) / ((3 + 2 * tl) * (1 + tl))
        + 2 * (1 - x) * (r - q) / (3 + 2 * tl)
        + 2 * x * (r - p) / (3 + 2 * th)
    )
    term_rp = -(1 - 2 * r) * (r - p) * (th - tl) * (
        -2 * (7 + 2 * tl + 2 * th)
        / ((2 + th) * (3 + 2 * th) * (2 + tl) * (3 + 2 * tl))
        + (2 - th * tl) / ((2 + tl) * (1 + tl) * (2 + th) * (1 + th))
    )
    term_qp = (2 * (r - q) * (r - p) * (th - tl) / (3 + th + tl)
               * ((1 - x) / (3 + 2 * tl) + x / (3 + 2 * th)))
    term_bal = 4 * r * (1 - r) * (th - tl) / ((3 + 2 * tl) * (3 + 2 * th))
    return x * (1 - x) * (term_pq + term_rp + term_qp + term_bal)


def fixation_correction(c: CorrectionInput) -> float:
    return float(correction_direct(*c.args))


def fixation_correction_factored(c: CorrectionInput) -> float:
    return float(correction_factored(*c.args))


def balanced_correction(x, r, theta_l, theta_h):
    """Correction when p = q = r (both backgrounds at mutational balance)."""
    x, r = np.asarray(x, float), np.asarray(r, float)
    tl, th = np.asarray(theta_l, float), np.asarray(theta_h, float)
    return (4 * x * (1 - x) * r * (1 - r) * (th - tl)
            / ((3 + 2 * tl) * (3 + 2 * th)))


def approx_fixation(c: CorrectionInput, sigma: float, gamma: float) -> float:
    """Small-noise fixation probability x + (sigma^2/gamma)*correction.

    Valid for small sigma^2/gamma (the caller judges); the result is clipped
    to [0, 1].
    """
    val = c.init.x + sigma ** 2 / gamma * fixation_correction(c)
    return float(np.clip(val, 0.0, 1.0))


@dataclass
class SymmetryFailure:
    check: str
    inputs: dict
    value: float


@dataclass
class SymmetryReport:
    draws: int
    checks_run: int
    failures: list[SymmetryFailure] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures


def symmetry_battery(seed: int, draws: int, correction_fn=None,
                     tol: float = IDENTITY_TOL) -> SymmetryReport:
    """Randomized battery of the four structural symmetries of the correction.

    a) sign flip under (theta_h <-> theta_l, p <-> q, x <-> 1-x)
    b) zero at p = q = r in {0, 1}
    c) no r-dependence when theta_h = theta_l = 0
    d) zero when theta_h = theta_l and p = q

    A failing check records the counterexample input.  ``correction_fn`` is
    injectable so a deliberately perturbed formula can serve as a negative
    control in tests.
    """
    if draws < 1:
        raise ValueError(f"draws must be >= 1, got {draws}")
    if correction_fn is None:
        correction_fn = correction_direct
    rng = np.random.default_rng(seed)
    x, p, q, r = rng.random((4, draws))
    tl, th = rng.random((2, draws)) * 10.0
    report = SymmetryReport(draws=draws, checks_run=4)

    def record(check, mask, values, **named):
        for i in np.nonzero(mask)[0][:5]:
            inputs = {k: float(v[i]) for k, v in named.items()}
            report.failures.append(
                SymmetryFailure(check, inputs, float(values[i])))

    # a) sign flip under the h <-> l relabeling
    base = correction_fn(x, p, q, r, tl, th)
    flipped = correction_fn(1 - x, q, p, r, th, tl)
    resid = np.abs(base + flipped)
    record("sign_flip", resid > tol, resid, x=x, p=p, q=q, r=r,
           theta_l=tl, theta_h=th)

    # b) zero at p = q = r in {0, 1}
    for edge in (0.0, 1.0):
        e = np.full(draws, edge)
        vals = np.abs(correction_fn(x, e, e, e, tl, th))
        record(f"zero_at_pqr_{edge:g}", vals > tol, vals, x=x,
               theta_l=tl, theta_h=th)

    # c) r-independence when both mutation rates vanish
    zeros = np.zeros(draws)
    r_grid = np.linspace(0.0, 1.0, 7)
    vals = np.stack([correction_fn(x, p, q, np.full(draws, rr), zeros, zeros)
                     for rr in r_grid])
    spread = vals.max(axis=0) - vals.min(axis=0)
    record("r_independent_at_theta0", spread > tol, spread, x=x, p=p, q=q)

    # d) zero when theta_h = theta_l and p = q
    vals = np.abs(correction_fn(x, p, p, r, tl, tl))
    record("zero_at_equal_theta_equal_pq", vals > tol, vals, x=x, p=p, r=r,
           theta=tl)

    return report

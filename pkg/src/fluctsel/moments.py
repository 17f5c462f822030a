"""Neutral-evolution moments: closed forms and a genealogical Monte Carlo oracle.

Under neutral dynamics (selection off) the type-frequency moments follow from
the genealogy of a small sample: lineages coalesce pairwise at rate 1, and
mutations fall on branches as Poisson marks at the rate tied to the lineage's
modifier allele.  The closed forms below give the first moments and the three
time-integrated mixed moments whose weighted sum equals the fixation
correction; the oracle re-derives any such moment by direct simulation of the
sample genealogy, independently of the formulas.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import InitialCondition, ModelParams, to_state
from .montecarlo import substream

# target sets for the three integrands, as ((locusA, locusB), ...) with
# locusB None meaning unconstrained
INTEGRAL_TARGETS = {
    "i1": ((("l", None), ("h", 0)), (("h", None), ("l", 0))),
    "i2": ((("h", None), ("h", 0), ("l", 0)), (("l", None), ("h", 0), ("l", 0))),
    "i3": ((("h", None), ("l", 0), ("l", 0)), (("l", None), ("h", 0), ("h", 0))),
}

SIMPSON_STEP = 0.05
SIMPSON_HORIZON = 20.0


@dataclass(frozen=True)
class MomentSpec:
    """A product moment E[prod_k X_{a_k b_k}(t)].

    targets: up to three (a, b) factors with a in {"l", "h"} and
             b in {0, 1, None}; None leaves the selected locus free.
    time:    evaluation time t >= 0.
    """

    targets: tuple
    time: float

    def __post_init__(self):
        if not 1 <= len(self.targets) <= 3:
            raise ValueError("between 1 and 3 target factors are supported")
        for a, b in self.targets:
            if a not in ("l", "h") or b not in (0, 1, None):
                raise ValueError(f"bad target factor ({a!r}, {b!r})")
        if self.time < 0:
            raise ValueError("time must be >= 0")


def first_moment(spec: MomentSpec, init: InitialCondition,
                 params: ModelParams) -> float:
    """E[X_a(t)] or E[X_ab(t)] under neutral evolution.

    The modifier marginal is constant; a constrained selected locus relaxes
    to the mutation balance r at rate theta_a.
    """
    if len(spec.targets) != 1:
        raise ValueError("first_moment needs exactly one target factor")
    (a, b), t = spec.targets[0], spec.time
    x, p, q = init.x, init.p, init.q
    r = params.r
    if a == "h":
        mass, start, theta = x, p, params.theta_h
    else:
        mass, start, theta = 1.0 - x, q, params.theta_l
    if b is None:
        return float(mass)
    type0 = mass * (r + np.exp(-theta * t) * (start - r))
    return float(type0 if b == 0 else mass - type0)


def _i1(x, p, q, r, tl, th):
    return x * (1 - x) * ((p - r) / (1 + th) - (q - r) / (1 + tl))


def _i2(x, p, q, r, tl, th):
    return x * (1 - x) * (2 * x - 1) * (
        r ** 2 / 3 + r * (p - r) / (3 + th) + r * (q - r) / (3 + tl)
        + (p - r) * (q - r) / (3 + th + tl))


def _i3_no_coalescence(x, p, q, r, tl, th):
    return x * (1 - x) * (
        (1 - 2 * x) * r ** 2 / 3
        + (1 - x) * (2 * r * (q - r) / (3 + tl) + (q - r) ** 2 / (3 + 2 * tl))
        - x * (2 * r * (p - r) / (3 + th) + (p - r) ** 2 / (3 + 2 * th)))


def _i3_coal_no_mutation(x, p, q, r, tl, th):
    # coalesced pair, ancestral branch unmutated on both sides
    return ((r * tl + q) / ((3 + 2 * tl) * (1 + tl))
            - (r * th + p) / ((3 + 2 * th) * (1 + th)))


def _i3_coal_with_mutation(x, p, q, r, tl, th):
    # coalesced pair with marks on one or both branches
    return (2 * tl * (q - r) / ((1 + tl) * (3 + tl) * (3 + 2 * tl))
            - 2 * th * (p - r) / ((1 + th) * (3 + th) * (3 + 2 * th))
            + r / (3 + 2 * th) - r / (3 + 2 * tl))


def _i3(x, p, q, r, tl, th):
    return (_i3_no_coalescence(x, p, q, r, tl, th)
            + x * (1 - x) * _i3_coal_no_mutation(x, p, q, r, tl, th)
            + x * (1 - x) * r * _i3_coal_with_mutation(x, p, q, r, tl, th))


def _total(x, p, q, r, tl, th):
    return (_i1(x, p, q, r, tl, th) + 2 * _i2(x, p, q, r, tl, th)
            + 2 * _i3(x, p, q, r, tl, th))


def _args(init: InitialCondition, params: ModelParams):
    return (init.x, init.p, init.q, params.r, params.theta_l, params.theta_h)


def integral_i1(init: InitialCondition, params: ModelParams) -> float:
    """Integral over all time of E[X_l X_h0 - X_h X_l0] (neutral)."""
    return float(_i1(*_args(init, params)))


def integral_i2(init: InitialCondition, params: ModelParams) -> float:
    """Integral of E[X_h X_h0 X_l0 - X_l X_h0 X_l0] (neutral)."""
    return float(_i2(*_args(init, params)))


def integral_i3(init: InitialCondition, params: ModelParams) -> float:
    """Integral of E[X_h X_l0^2 - X_l X_h0^2] (neutral).

    Sum of a no-coalescence part and two coalescence parts (ancestor
    unmutated vs. marked), each its own internal function.
    """
    return float(_i3(*_args(init, params)))


def total_integral(init: InitialCondition, params: ModelParams) -> float:
    """Integral of E[(X_h0 X_l1 - X_h1 X_l0)(X_1 - X_0)] = I1 + 2*I2 + 2*I3.

    Equals the closed-form fixation correction exactly; the identity is the
    strongest transcription check in the package.
    """
    return float(_total(*_args(init, params)))


def total_integral_values(x, p, q, r, theta_l, theta_h):
    """Array-friendly version of total_integral for identity sweeps."""
    return _total(np.asarray(x, float), np.asarray(p, float),
                  np.asarray(q, float), np.asarray(r, float),
                  np.asarray(theta_l, float), np.asarray(theta_h, float))


# ---------------------------------------------------------------------------
# coalescent oracle
# ---------------------------------------------------------------------------

@dataclass
class OracleEstimate:
    value: float
    se: float
    replicas: int


def _draw_types(u, x0_cum):
    return np.searchsorted(x0_cum, u, side="right").clip(0, 3)


class _Replicas:
    """Shared per-replica genealogy, root draws, and branch marks.

    Branch marks are drawn for both mutation-rate variants (l and h) so that
    several target sets can be scored against identical randomness.
    """

    def __init__(self, n, t, R, init, params, seed):
        rng_gene = substream(seed, "genealogy")
        rng_root = substream(seed, "roots")
        rng_mark = substream(seed, "marks")
        self.n, self.t, self.R = n, float(t), R
        self.params = params

        x0 = to_state(init)
        cum = np.cumsum(x0)
        cum[-1] = 1.0
        self.root_types = _draw_types(rng_root.random((R, n)), cum)

        t1 = np.inf * np.ones(R)
        t2 = np.inf * np.ones(R)
        pair = np.zeros(R, dtype=np.int64)
        if n >= 2:
            npairs = n * (n - 1) // 2
            t1 = rng_gene.exponential(1.0 / npairs, size=R)
            if n == 3:
                pair = rng_gene.integers(0, 3, size=R)
                t2 = t1 + rng_gene.exponential(1.0, size=R)
        self.c1 = t1 < self.t
        self.c2 = t2 < self.t
        self.t1, self.t2, self.pair = t1, t2, pair

        # segment lengths; unused segments get length 0
        t_ = self.t
        if n == 1:
            lengths = {"tip0": np.full(R, t_)}
        elif n == 2:
            tb = np.where(self.c1, t1, t_)
            lengths = {"tip0": tb, "tip1": tb,
                       "stem": np.where(self.c1, t_ - t1, 0.0)}
        else:
            tb_pair = np.where(self.c1, t1, t_)
            tip_k = np.where(self.c2, t2, t_)
            lengths = {
                "tip_i": tb_pair, "tip_j": tb_pair, "tip_k": tip_k,
                "mid": np.where(self.c1, np.where(self.c2, t2 - t1, t_ - t1),
                                0.0),
                "root": np.where(self.c2, t_ - t2, 0.0),
            }
        self.segments = {}
        for name, L in lengths.items():
            marked_l = rng_mark.poisson(params.theta_l * L) > 0
            marked_h = rng_mark.poisson(params.theta_h * L) > 0
            value = np.where(rng_mark.random(R) < params.r, 0, 1)
            self.segments[name] = (marked_l, marked_h, value)

    def _seg(self, name, is_h):
        marked_l, marked_h, value = self.segments[name]
        return np.where(is_h, marked_h, marked_l), value

    def score(self, targets) -> np.ndarray:
        """Indicator per replica that the sample realizes ``targets``."""
        n = self.n
        if len(targets) != n:
            raise ValueError("target length must match the replica batch")
        want_a = np.array([1 if a == "h" else 0 for a, _ in targets])
        want_b = np.array([-1 if b is None else b for _, b in targets])
        if n == 1:
            return self._score1(want_a, want_b)
        if n == 2:
            return self._score2(want_a, want_b)
        return self._score3(want_a, want_b)

    def _tip_value(self, seg_chain, root_b):
        """B value at a tip below the given root->tip segment chain.

        Each chain entry carries its own mutation-rate selector: a segment
        mutates at the rate of the family it belongs to, which for
        uncoalesced tips is the tip's own modifier type.
        """
        b = root_b
        for name, active, is_h in seg_chain:
            marked, value = self._seg(name, is_h)
            use = marked if active is None else (marked & active)
            b = np.where(use, value, b)
        return b

    def _ok_b(self, b, want):
        return (want < 0) | (b == want)

    def _score1(self, want_a, want_b):
        root = self.root_types[:, 0]
        ok = (root // 2) == want_a[0]
        is_h = np.full(self.R, want_a[0] == 1)
        b = self._tip_value([("tip0", None, is_h)], root % 2)
        return (ok & self._ok_b(b, want_b[0])).astype(float)

    def _score2(self, want_a, want_b):
        same_family = self.c1
        ok = np.ones(self.R, dtype=bool)
        if want_a[0] != want_a[1]:
            ok &= ~same_family
        # roots: family 0 is lineage 0's family; lineage 1 uses root slot 1
        # when separate, otherwise shares slot 0
        root0 = self.root_types[:, 0]
        root1 = np.where(same_family, root0, self.root_types[:, 1])
        ok &= (root0 // 2) == want_a[0]
        ok &= (root1 // 2) == want_a[1]
        is_h0 = np.full(self.R, want_a[0] == 1)
        is_h1 = np.full(self.R, want_a[1] == 1)
        # the stem exists only on coalesced genealogies, where consistency
        # already forces both tips onto one modifier background
        b0 = self._tip_value([("stem", same_family, is_h0),
                              ("tip0", None, is_h0)], root0 % 2)
        b1 = self._tip_value([("stem", same_family, is_h0),
                              ("tip1", None, is_h1)], root1 % 2)
        ok &= self._ok_b(b0, want_b[0]) & self._ok_b(b1, want_b[1])
        return ok.astype(float)

    def _score3(self, want_a, want_b):
        pair_members = np.array([[0, 1], [0, 2], [1, 2]])
        singles = np.array([2, 1, 0])
        i_idx = pair_members[self.pair, 0]
        j_idx = pair_members[self.pair, 1]
        k_idx = singles[self.pair]
        R = self.R
        rows = np.arange(R)

        wa = want_a[np.stack([i_idx, j_idx, k_idx], axis=1)]
        wb = want_b[np.stack([i_idx, j_idx, k_idx], axis=1)]

        ok = np.ones(R, dtype=bool)
        pair_merged = self.c1
        all_merged = self.c2
        ok &= ~(pair_merged & (wa[:, 0] != wa[:, 1]))
        ok &= ~(all_merged & (wa[:, 2] != wa[:, 0]))

        # canonical family slots: 0 = family of the lowest-index lineage
        # no coalescence: slots (0, 1, 2) by lineage index
        # pair merged only: slot 0 = pair family if it contains lineage 0
        # all merged: slot 0
        u = self.root_types
        root_i = np.where(pair_merged,
                          np.where(i_idx == 0, u[rows, 0],
                                   np.where(all_merged, u[rows, 0],
                                            u[rows, 1])),
                          u[rows, i_idx])
        root_j = np.where(pair_merged, root_i, u[rows, j_idx])
        slot_k = np.where(i_idx == 0, 1, 0)
        root_k = np.where(all_merged, root_i,
                          np.where(pair_merged, u[rows, slot_k],
                                   u[rows, k_idx]))

        ok &= (root_i // 2) == wa[:, 0]
        ok &= (root_j // 2) == wa[:, 1]
        ok &= (root_k // 2) == wa[:, 2]

        # shared segments (root stem, pair stem) are only active on merged
        # genealogies, where the consistency masks above force one modifier
        # background; tip branches always mutate at their own tip's rate
        is_h_i = wa[:, 0] == 1
        is_h_j = wa[:, 1] == 1
        is_h_k = wa[:, 2] == 1
        b_i = self._tip_value([("root", all_merged, is_h_i),
                               ("mid", pair_merged, is_h_i),
                               ("tip_i", None, is_h_i)], root_i % 2)
        b_j = self._tip_value([("root", all_merged, is_h_i),
                               ("mid", pair_merged, is_h_i),
                               ("tip_j", None, is_h_j)], root_j % 2)
        b_k = self._tip_value([("root", all_merged, is_h_k),
                               ("tip_k", None, is_h_k)], root_k % 2)

        ok &= self._ok_b(b_i, wb[:, 0])
        ok &= self._ok_b(b_j, wb[:, 1])
        ok &= self._ok_b(b_k, wb[:, 2])
        return ok.astype(float)


def oracle_scores(target_sets, time, init: InitialCondition,
                  params: ModelParams, replicas: int, seed: int) -> np.ndarray:
    """(replicas, len(target_sets)) indicator scores on shared genealogies.

    All target sets must have the same number of factors; sharing the
    genealogy and root draws makes differences of estimates much tighter.
    """
    n = len(target_sets[0])
    if any(len(ts) != n for ts in target_sets):
        raise ValueError("all target sets must have the same length")
    reps = _Replicas(n, time, replicas, init, params, seed)
    return np.stack([reps.score(ts) for ts in target_sets], axis=1)


def coalescent_oracle(spec: MomentSpec, init: InitialCondition,
                      params: ModelParams, replicas: int,
                      seed: int) -> OracleEstimate:
    """Monte Carlo estimate of a product moment from sample genealogies."""
    if replicas < 1000:
        raise ValueError("need at least 1000 oracle replicas")
    scores = oracle_scores([spec.targets], spec.time, init, params,
                           replicas, seed)[:, 0]
    return OracleEstimate(float(scores.mean()),
                          float(scores.std(ddof=1) / np.sqrt(replicas)),
                          replicas)


def oracle_difference(targets_pos, targets_neg, time,
                      init: InitialCondition, params: ModelParams,
                      replicas: int, seed: int) -> OracleEstimate:
    """Estimate E[pos] - E[neg] at one time on shared genealogies."""
    scores = oracle_scores([targets_pos, targets_neg], time, init, params,
                           replicas, seed)
    diff = scores[:, 0] - scores[:, 1]
    return OracleEstimate(float(diff.mean()),
                          float(diff.std(ddof=1) / np.sqrt(replicas)),
                          replicas)


def integrate_oracle_difference(targets_pos, targets_neg,
                                init: InitialCondition, params: ModelParams,
                                replicas: int, seed: int,
                                horizon: float = SIMPSON_HORIZON,
                                step: float = SIMPSON_STEP) -> OracleEstimate:
    """Simpson-rule time integral of an oracle-estimated moment difference.

    Independent replica batches per grid point; integrands of 2+ lineages
    decay at least like exp(-t), so the default horizon leaves a tail
    below 3e-9.
    """
    m = int(round(horizon / step))
    if m % 2 == 1:
        m += 1
    grid = np.arange(m + 1) * step
    weights = np.ones(m + 1)
    weights[1:-1:2] = 4.0
    weights[2:-1:2] = 2.0
    weights *= step / 3.0

    total, var = 0.0, 0.0
    for j, t in enumerate(grid):
        est = oracle_difference(targets_pos, targets_neg, t, init, params,
                                replicas, substream_seed(seed, j))
        total += weights[j] * est.value
        var += (weights[j] * est.se) ** 2
    return OracleEstimate(total, float(np.sqrt(var)), replicas)


def substream_seed(seed: int, index: int) -> int:
    """Derived integer seed for the index-th grid point."""
    return (int(seed) * 1000003 + index) & 0x7FFFFFFF

"""Function-valued dual jump process, used as an independent moment oracle.

The dual of the limiting diffusion acts on real tables over the four types
raised to a coordinate count n: coalescence merges two coordinates (rate 1
per unordered pair), thinned mutation mixes a coordinate (rate theta_max per
coordinate), and three selection transitions append coordinates weighted by
the fitness-covariance kernel chi (values +-1/4 for the two-point fitness
law).  Running the dual from a table phi for time t and pairing the result
with the initial frequencies reproduces E[<X_t^n, phi>].

Tables are stored in symmetrized form, one entry per type multiset, after
integrating out the uniformly random coordinate labels of every jump; this
is exact for all moment estimates (the pairing never distinguishes
coordinate order), keeps the all-ones table bit-exactly invariant, and
reduces the n = 12 table from 4^12 dense entries to 455.

Rate convention: the coordinate-pair selection transition fires once per
ordered pair, i.e. at twice the per-unordered-pair rate of coalescence.
This is forced by the generator: the averaged selection operator carries the
full double sum over distinct coordinate pairs, and only the ordered count
reproduces the drift and covariance of the limiting diffusion (the package
tests pin this identity to machine precision).
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from math import comb, factorial

import numpy as np

from .model import ConfigurationError, InitialCondition, to_state
from .montecarlo import map_batches, mean_and_se, replica_batches, substream

N_MAX_DEFAULT = 12

_COAL, _MUT, _PAIR, _SINGLE_A, _SINGLE_B = range(5)


def chi(v_k: int, v_l: int) -> float:
    """Averaged fitness product of two selected-locus types: +-1/4."""
    return 0.25 if v_k == v_l else -0.25


@dataclass(frozen=True)
class DualConfig:
    """Parameters of the dual jump process.

    theta_max is the thinning ceiling of the mutation transition; any value
    >= theta_h gives the same law, and the default uses theta_h itself.
    The bound 2*sigma_sq_over_gamma < 1 is required.
    """

    sigma_sq_over_gamma: float
    theta_l: float
    theta_h: float
    r: float
    theta_max: float | None = None
    n_max: int = N_MAX_DEFAULT

    def __post_init__(self):
        if self.sigma_sq_over_gamma < 0:
            raise ConfigurationError("sigma_sq_over_gamma must be >= 0")
        if 2.0 * self.sigma_sq_over_gamma >= 1.0:
            raise ConfigurationError(
                f"the dual requires 2*sigma^2/gamma < 1, got "
                f"{2.0 * self.sigma_sq_over_gamma:.4g}")
        if not 0.0 <= self.theta_l or not 0.0 <= self.theta_h:
            raise ConfigurationError("mutation rates must be >= 0")
        if not 0.0 <= self.r <= 1.0:
            raise ConfigurationError(f"r must lie in [0, 1], got {self.r}")
        if self.theta_max is None:
            object.__setattr__(self, "theta_max",
                               max(self.theta_h, self.theta_l))
        if self.theta_max < max(self.theta_h, self.theta_l):
            raise ConfigurationError(
                "theta_max must dominate both mutation rates")
        if self.n_max < 1:
            raise ConfigurationError("n_max must be >= 1")


@dataclass
class DualState:
    """Coordinate count and the symmetrized table (one entry per multiset)."""

    n: int
    xi: np.ndarray
    truncations: int = 0

    def __post_init__(self):
        self.xi = np.asarray(self.xi, dtype=float)
        if self.xi.shape != (multiset_count(self.n),):
            raise ValueError(
                f"xi must have {multiset_count(self.n)} entries for n={self.n}")


def multiset_count(n: int) -> int:
    return comb(n + 3, 3)


class _Space:
    """Multiset enumeration for one coordinate count."""

    _cache: dict = {}

    def __new__(cls, n: int):
        if n not in cls._cache:
            obj = super().__new__(cls)
            obj.n = n
            obj.msets = np.array(
                [m for m in itertools.product(range(n + 1), repeat=4)
                 if sum(m) == n], dtype=np.int64)
            obj.index = {tuple(m): i for i, m in enumerate(obj.msets)}
            obj.coef = np.array(
                [factorial(n) // np.prod([factorial(int(c)) for c in m])
                 for m in obj.msets], dtype=float)
            cls._cache[n] = obj
        return cls._cache[n]

    def idx(self, m) -> int:
        return self.index[tuple(int(v) for v in m)]


def _ordered_draw_weights(m, picks):
    """(types tuple, integer weight) for ordered without-replacement draws."""
    out = []

    def rec(counts, chosen, weight):
        if len(chosen) == picks:
            out.append((tuple(chosen), weight))
            return
        for c in range(4):
            if counts[c] > 0:
                counts[c] -= 1
                rec(counts, chosen + [c], weight * (counts[c] + 1))
                counts[c] += 1

    rec(list(m), [], 1)
    return out


class _Kernels:
    """Per-n gather/weight arrays for the five jump types (cached)."""

    _cache: dict = {}

    @classmethod
    def get(cls, n: int) -> "_Kernels":
        if n not in cls._cache:
            cls._cache[n] = cls(n)
        return cls._cache[n]

    def __init__(self, n: int):
        self.n = n
        sp = _Space(n)

        if n >= 2:
            down = _Space(n - 1)
            src = np.zeros((len(down.msets), 4), dtype=np.int64)
            wgt = np.zeros((len(down.msets), 4))
            for j, m in enumerate(down.msets):
                for i in range(4):
                    if m[i] > 0:
                        mp = m.copy(); mp[i] += 1
                        src[j, i] = sp.idx(mp)
                        wgt[j, i] = m[i]
            self.coal = (src, wgt, float(n - 1))

        # mutation: per (multiset, type) sources with one type-0/type-1 swap
        src0 = np.zeros((len(sp.msets), 4), dtype=np.int64)
        src1 = np.zeros((len(sp.msets), 4), dtype=np.int64)
        cnt = np.zeros((len(sp.msets), 4))
        for j, m in enumerate(sp.msets):
            for c in range(4):
                if m[c] > 0:
                    a = c // 2
                    m0 = m.copy(); m0[c] -= 1; m0[2 * a] += 1
                    m1 = m.copy(); m1[c] -= 1; m1[2 * a + 1] += 1
                    src0[j, c] = sp.idx(m0)
                    src1[j, c] = sp.idx(m1)
                    cnt[j, c] = m[c]
        self.mut = (src0, src1, cnt, float(n))

        self.pair = self._growth_kernel(n, picks=4) if n >= 2 else None
        self.single_a = self._growth_kernel(n, picks=3)
        self.single_b = self._growth_kernel(n, picks=2)

    @staticmethod
    def _growth_kernel(n, picks):
        """Joint ordered-draw kernel for a selection transition.

        picks=4: chi pair (e, f) plus fresh pair (c, d); term1 excludes the
        fresh coordinates, term2 the chi pair.
        picks=3: chi coordinate e against fresh d, with fresh c; term1
        excludes {e, d}, term2 {c, d}.
        picks=2: diagonal chi (constant 1/4); term1 excludes the fresh c,
        term2 the chosen coordinate e.
        """
        grow = {4: 2, 3: 2, 2: 1}[picks]
        up = _Space(n + grow)
        base = _Space(n)
        rows = len(up.msets)
        width = 4 ** picks
        src1 = np.zeros((rows, width), dtype=np.int64)
        src2 = np.zeros((rows, width), dtype=np.int64)
        wgt = np.zeros((rows, width))
        chi_w = np.zeros((rows, width))
        nn = n + grow
        denom = 1.0
        for i in range(picks):
            denom *= nn - i
        for j, m in enumerate(up.msets):
            for slot, (types, w) in enumerate(_ordered_draw_weights(m, picks)):
                mm = m.copy()
                if picks == 4:
                    e, f, c, d = types
                    x = chi(e % 2, f % 2)
                    m1 = mm.copy(); m1[c] -= 1; m1[d] -= 1
                    m2 = mm.copy(); m2[e] -= 1; m2[f] -= 1
                elif picks == 3:
                    e, c, d = types
                    x = chi(e % 2, d % 2)
                    m1 = mm.copy(); m1[e] -= 1; m1[d] -= 1
                    m2 = mm.copy(); m2[c] -= 1; m2[d] -= 1
                else:
                    e, c = types
                    x = 0.25
                    m1 = mm.copy(); m1[c] -= 1
                    m2 = mm.copy(); m2[e] -= 1
                src1[j, slot] = base.idx(m1)
                src2[j, slot] = base.idx(m2)
                wgt[j, slot] = w
                chi_w[j, slot] = x
        return src1, src2, wgt, chi_w, denom


def apply_coalescence(state: DualState) -> DualState:
    if state.n < 2:
        raise ValueError("coalescence needs at least two coordinates")
    src, wgt, denom = _Kernels.get(state.n).coal
    out = (state.xi[src] * wgt).sum(axis=1) / denom
    return DualState(state.n - 1, out, state.truncations)


def apply_mutation(state: DualState, cfg: DualConfig) -> DualState:
    src0, src1, cnt, denom = _Kernels.get(state.n).mut
    if cfg.theta_max == 0:
        return DualState(state.n, state.xi.copy(), state.truncations)
    w_type = np.array([cfg.theta_l, cfg.theta_l, cfg.theta_h, cfg.theta_h])
    w_type = w_type / cfg.theta_max
    mixed = cfg.r * state.xi[src0] + (1.0 - cfg.r) * state.xi[src1]
    inner = w_type[None, :] * mixed + (1.0 - w_type)[None, :] * state.xi[:, None]
    out = (cnt * inner).sum(axis=1) / denom
    return DualState(state.n, out, state.truncations)


def _apply_growth(state: DualState, kernel, grow: int) -> DualState:
    src1, src2, wgt, chi_w, denom = kernel
    out = (wgt * (chi_w * state.xi[src1]
                  + (1.0 - chi_w) * state.xi[src2])).sum(axis=1) / denom
    return DualState(state.n + grow, out, state.truncations)


def apply_selection_pair(state: DualState) -> DualState:
    if state.n < 2:
        raise ValueError("the pair transition needs two coordinates")
    return _apply_growth(state, _Kernels.get(state.n).pair, 2)


def apply_selection_single_a(state: DualState) -> DualState:
    return _apply_growth(state, _Kernels.get(state.n).single_a, 2)


def apply_selection_single_b(state: DualState) -> DualState:
    return _apply_growth(state, _Kernels.get(state.n).single_b, 1)


def transition_rates(n: int, cfg: DualConfig) -> np.ndarray:
    """Total rates of the five jump categories at coordinate count n."""
    s = cfg.sigma_sq_over_gamma
    return np.array([
        n * (n - 1) / 2.0,          # coalescence, per unordered pair
        n * cfg.theta_max,          # thinned mutation, per coordinate
        n * (n - 1) * s,            # selection pair, per ordered pair
        2.0 * n * n * s,            # selection single vs fresh pair
        n * s,                      # selection single, diagonal
    ])


def _apply(kind: int, state: DualState, cfg: DualConfig) -> DualState:
    if kind == _COAL:
        return apply_coalescence(state)
    if kind == _MUT:
        return apply_mutation(state, cfg)
    grown = {_PAIR: 2, _SINGLE_A: 2, _SINGLE_B: 1}[kind]
    if state.n + grown > cfg.n_max:
        return DualState(state.n, state.xi, state.truncations + 1)
    if kind == _PAIR:
        return apply_selection_pair(state)
    if kind == _SINGLE_A:
        return apply_selection_single_a(state)
    return apply_selection_single_b(state)


def dual_step(state: DualState, cfg: DualConfig,
              rng: np.random.Generator) -> DualState:
    """One jump of the dual chain (competing exponentials over categories).

    A growth jump that would exceed n_max is suppressed and recorded in the
    truncations counter; estimates built on such paths are flagged biased.
    """
    rates = transition_rates(state.n, cfg)
    total = rates.sum()
    if total <= 0:
        return DualState(state.n, state.xi.copy(), state.truncations)
    kind = rng.choice(5, p=rates / total)
    return _apply(int(kind), state, cfg)


def run_dual(state: DualState, horizon: float, cfg: DualConfig,
             rng: np.random.Generator, record_n: bool = False):
    """Run the dual for the given time span; returns the final state.

    With record_n=True also returns (times, counts) of the coordinate-count
    path, for empirical stability studies.
    """
    tau = 0.0
    path_t, path_n = [0.0], [state.n]
    while True:
        rates = transition_rates(state.n, cfg)
        total = rates.sum()
        if total <= 0:
            break
        tau += rng.exponential(1.0 / total)
        if tau >= horizon:
            break
        kind = rng.choice(5, p=rates / total)
        state = _apply(int(kind), state, cfg)
        if record_n:
            path_t.append(tau)
            path_n.append(state.n)
    if record_n:
        return state, (np.array(path_t), np.array(path_n, dtype=np.int64))
    return state


def compress_dense(table: np.ndarray) -> DualState:
    """Symmetrize a dense (4,)*n table into multiset coordinates."""
    n = table.ndim
    if table.shape != (4,) * n:
        raise ValueError("dense tables must have shape (4,)*n")
    sp = _Space(n)
    sums = np.zeros(len(sp.msets))
    counts = np.zeros(len(sp.msets))
    for idx in itertools.product(range(4), repeat=n):
        key = tuple(idx.count(i) for i in range(4))
        j = sp.index[key]
        sums[j] += table[idx]
        counts[j] += 1
    return DualState(n, sums / counts)


def dense_from_state(state: DualState) -> np.ndarray:
    """Materialize the symmetric dense table (small n only)."""
    if state.n > 8:
        raise ValueError("dense materialization capped at n = 8")
    sp = _Space(state.n)
    out = np.empty((4,) * state.n)
    for idx in itertools.product(range(4), repeat=state.n):
        key = tuple(idx.count(i) for i in range(4))
        out[idx] = state.xi[sp.index[key]]
    return out


def pair_with_initial(state: DualState, x0: np.ndarray) -> float:
    """Duality pairing <x0^n, xi> against a product measure."""
    sp = _Space(state.n)
    weights = sp.coef * np.prod(x0[None, :] ** sp.msets, axis=1)
    return float(weights @ state.xi)


def indicator_table(a: str, b: int) -> np.ndarray:
    """Dense one-coordinate indicator of type (a, b)."""
    t = np.zeros(4)
    t[(2 if a == "h" else 0) + b] = 1.0
    return t


@dataclass
class DualityEstimate:
    value: float
    se: float
    replicas: int
    truncation_events: int
    truncated_replicas: int
    max_n: int
    mean_final_n: float
    samples: np.ndarray = field(repr=False, default=None)

    @property
    def biased(self) -> bool:
        return self.truncation_events > 0


def moment_via_duality(phi: np.ndarray, t: float, init: InitialCondition,
                       cfg: DualConfig, replicas: int,
                       seed: int = 0) -> DualityEstimate:
    """Estimate E[<X_t^n, phi>] by running the dual backwards from phi.

    Each replica runs the jump chain for time t and pairs the final table
    with the initial product measure.  Truncation events (growth suppressed
    at n_max) are totaled; any nonzero count flags the estimate as biased.
    """
    if replicas < 1000:
        raise ConfigurationError("need at least 1000 duality replicas")
    phi = np.asarray(phi, dtype=float)
    if phi.ndim > cfg.n_max:
        raise ConfigurationError("phi has more coordinates than n_max")
    start = compress_dense(phi)
    x0 = to_state(init)

    def one_batch(batch_idx, first, count):
        vals = np.empty(count)
        stats = np.zeros(3, dtype=np.int64)  # trunc events, trunc reps, max n
        finals = np.empty(count)
        for i in range(count):
            rng = substream(seed, "dual", first + i)
            state = DualState(start.n, start.xi.copy())
            tau = 0.0
            max_n = state.n
            while True:
                rates = transition_rates(state.n, cfg)
                total = rates.sum()
                if total <= 0:
                    break
                tau += rng.exponential(1.0 / total)
                if tau >= t:
                    break
                kind = rng.choice(5, p=rates / total)
                state = _apply(int(kind), state, cfg)
                max_n = max(max_n, state.n)
            vals[i] = pair_with_initial(state, x0)
            stats[0] += state.truncations
            stats[1] += state.truncations > 0
            stats[2] = max(stats[2], max_n)
            finals[i] = state.n
        return vals, stats, finals

    parts = map_batches(one_batch, replica_batches(replicas))
    values = np.concatenate([p[0] for p in parts])
    finals = np.concatenate([p[2] for p in parts])
    est, se = mean_and_se(values)
    return DualityEstimate(
        value=est, se=se, replicas=replicas,
        truncation_events=int(sum(p[1][0] for p in parts)),
        truncated_replicas=int(sum(p[1][1] for p in parts)),
        max_n=int(max(p[1][2] for p in parts)),
        mean_final_n=float(finals.mean()),
        samples=values,
    )

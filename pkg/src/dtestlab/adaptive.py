"""Smoothness-adaptive testing: level grid, machine schedule, Bonferroni tests.

A grid of candidate truncation levels C = {L_min..L_max} is derived from the
regularity window [s_min, s_max] (one grid point per 1/log2(n) step in s,
each mapped through its regime rate to a level).  Each level L gets a subset
M_L of m' machines; machines appear in at most b subsets so every per-level
test can be paid for out of the b-bit budget.  The per-level statistics are
the finite-dimensional ones computed on the first nu_L coefficients, and the
adaptive tests reject when the maximum over the grid clears a threshold that
grows like sqrt(log log n) (Bonferroni correction).

All logarithms here are base 2, consistent with the bit-counting
conventions of the non-adaptive layer.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .model import Coin, ProblemConfig
from .nonparametric import LeveledSignal, nu, truncation_level
from .protocols import build_partition, t31_statistic, t32_statistic
from .randomness import SeedNode
from .stats import chi2_cdf

__all__ = [
    "GridError",
    "InfeasibleScheduleError",
    "AdaptiveGrid",
    "MachineSchedule",
    "adaptive_rate",
    "build_grid",
    "build_schedule",
    "loglog_threshold",
    "level_budget_split",
    "collect_adaptive_statistics",
    "adaptive_decisions",
    "calibrate_t3_adapt_kappa2",
    "t1_adapt",
    "t2_adapt",
    "t3_adapt",
    "machine_bit_usage",
]

_CHUNK = 32


class GridError(ValueError):
    """The requested regularity window produces an unusable level grid."""


class InfeasibleScheduleError(ValueError):
    """The total budget m*b cannot cover the level grid."""


def _log2n(n: int) -> float:
    if n < 4:
        raise ValueError("adaptive constructions need n >= 4")
    return math.log2(n)


def loglog_threshold(n: int) -> float:
    """Bonferroni threshold 2 * sqrt(log2 log2 n)."""
    return 2.0 * math.sqrt(math.log2(_log2n(n)))


def adaptive_rate(s: float, n: int, m: int, b: int, coin: Coin) -> float:
    """Constant-1 adaptive separation rate rho_s^2.

    Two regimes by budget: b >= log2(n) pays a log(n) entry fee on the
    budget thresholds; below that, machines are divided across smoothness
    levels and the rate picks up a log(n)/b factor.
    """
    if s <= 0:
        raise ValueError("s must be positive")
    logn = _log2n(n)
    public = Coin(coin) is Coin.PUBLIC
    if b >= logn:
        if public:
            high = logn * n ** (1.0 / (2 * s + 0.5))
            low = logn * max(n ** (1.0 / (2 * s + 0.5)) / m ** ((2 * s + 1.0) / (2 * s + 0.5)), 1.0)
            if b >= high:
                return n ** (-2 * s / (2 * s + 0.5))
            if b >= low:
                return (math.sqrt(b) * n / math.sqrt(logn)) ** (-2 * s / (2 * s + 1.0))
            return (n / math.sqrt(m)) ** (-2 * s / (2 * s + 0.5))
        high = logn * n ** (1.0 / (2 * s + 0.5))
        low = logn * max(n ** (1.0 / (2 * s + 0.5)) / m ** ((s + 0.75) / (2 * s + 0.5)), 1.0)
        if b >= high:
            return n ** (-2 * s / (2 * s + 0.5))
        if b >= low:
            return (b * n / logn) ** (-2 * s / (2 * s + 1.5))
        return (n / math.sqrt(m)) ** (-2 * s / (2 * s + 0.5))
    if public:
        if m >= n ** (1.0 / (2 * s + 1.0)):
            return (math.sqrt(b) * n / math.sqrt(logn)) ** (-2 * s / (2 * s + 1.0))
        return (math.sqrt(b) * n / math.sqrt(m * logn)) ** (-2 * s / (2 * s + 0.5))
    if m >= n ** (2.0 / (2 * s + 1.5)) * (b / logn) ** ((s - 0.25) / (2 * s + 1.5)):
        return (b * n / logn) ** (-2 * s / (2 * s + 1.5))
    return (n * math.sqrt(b) / math.sqrt(m * logn)) ** (-2 * s / (2 * s + 0.5))


@dataclass(frozen=True)
class AdaptiveGrid:
    """Candidate truncation levels and their target rates."""

    s_min: float
    s_max: float
    n: int
    m: int
    b: int
    coin: Coin
    levels: tuple[int, ...]          # contiguous L_min..L_max
    rho_by_level: dict[int, float]   # level -> smallest rho_s mapped there
    s_grid: tuple[float, ...]
    rho_by_s: dict[float, float]

    @property
    def size(self) -> int:
        return len(self.levels)

    @property
    def top_level(self) -> int:
        return self.levels[-1]


def build_grid(
    s_min: float, s_max: float, n: int, m: int, b: int, coin: Coin
) -> AdaptiveGrid:
    """Map a 1/log2(n) grid of the regularity window to truncation levels."""
    if not (0 < s_min <= s_max):
        raise GridError("need 0 < s_min <= s_max")
    logn = _log2n(n)
    step = 1.0 / logn
    count = max(1, int(math.floor((s_max - s_min) / step)) + 1)
    s_values = [s_min + k * step for k in range(count)]
    if s_values[-1] < s_max - 1e-12:
        s_values.append(s_max)
    rho_by_s = {}
    level_of_s = {}
    for s in s_values:
        rho = math.sqrt(adaptive_rate(s, n, m, b, coin))
        rho_by_s[s] = rho
        level_of_s[s] = truncation_level(s, rho)
    l_min = min(level_of_s.values())
    l_max = max(level_of_s.values())
    levels = tuple(range(l_min, l_max + 1))
    if len(levels) > math.ceil(logn):
        raise GridError(
            f"grid spans {len(levels)} levels, more than ceil(log2 n) = {math.ceil(logn)}; "
            "the regularity window is too wide for this n"
        )
    rho_by_level: dict[int, float] = {}
    for s, L in level_of_s.items():
        r = rho_by_s[s]
        rho_by_level[L] = min(rho_by_level.get(L, math.inf), r)
    for L in levels:  # fill levels no grid point mapped to
        if L not in rho_by_level:
            below = [rho_by_level[k] for k in levels if k < L and k in rho_by_level]
            above = [rho_by_level[k] for k in levels if k > L and k in rho_by_level]
            candidates = ([max(below)] if below else []) + ([min(above)] if above else [])
            rho_by_level[L] = float(np.prod(candidates)) ** (1.0 / len(candidates))
    return AdaptiveGrid(
        s_min, s_max, n, m, b, Coin(coin), levels, rho_by_level,
        tuple(s_values), rho_by_s,
    )


@dataclass(frozen=True)
class MachineSchedule:
    """Assignment of machines to level subsets plus the per-level bit budget."""

    levels: tuple[int, ...]
    subsets: dict[int, np.ndarray]   # level -> machine indices, |M_L| = m'
    m_prime: int
    bits_per_level: int
    memberships: np.ndarray          # per-machine subset counts

    def subset(self, L: int) -> np.ndarray:
        return self.subsets[L]


def build_schedule(n: int, m: int, b: int, grid: AdaptiveGrid) -> MachineSchedule:
    """Round-robin block assignment of machines to levels, |M_L| = m'.

    m' = floor(m * (log2(n) ∧ b) / log2(n)); requires m' >= 1 and
    m'|C| <= m b, otherwise the total budget cannot fund the grid.
    """
    logn = _log2n(n)
    m_prime = int(math.floor(m * min(b, logn) / logn))
    k = grid.size
    if m_prime < 1:
        raise InfeasibleScheduleError(
            f"insufficient total budget for adaptation: m' = "
            f"floor({m}*({min(b, logn):g})/{logn:g}) = 0, so m'|C| cannot reach mb = {m * b}"
        )
    if m_prime * k > m * b:
        raise InfeasibleScheduleError(
            f"insufficient total budget for adaptation: m'|C| = {m_prime}*{k} "
            f"= {m_prime * k} > mb = {m * b}"
        )
    subsets = {}
    for idx, L in enumerate(grid.levels):
        start = (idx * m_prime) % m
        subsets[L] = (start + np.arange(m_prime)) % m
    memberships = np.bincount(
        np.concatenate([subsets[L] for L in grid.levels]), minlength=m
    )
    max_member = int(memberships.max())
    assert max_member <= b, "schedule violated the per-machine subset bound"
    bits_per_level = min((m * b) // (m_prime * k), b // max_member)
    assert bits_per_level >= 1
    return MachineSchedule(grid.levels, subsets, m_prime, bits_per_level, memberships)


def level_budget_split(bits: int, nu_l: int, use_level_predicate: bool = False, level: int = 0):
    """Split a level's budget between the sign and count subtests.

    Returns (sign_bits, count_budget, run_count).  The count subtest runs
    when its transcript fits: 2^(bits//2) >= nu_l + 1 (or, under the
    literal-level predicate option, 2*log2(level+1) <= bits, still subject
    to encoding feasibility).
    """
    half = bits // 2
    fits = half >= 1 and (1 << half) >= nu_l + 1
    if use_level_predicate:
        wants = half >= 1 and 2.0 * math.log2(level + 1) <= bits
        run_count = wants and fits
    else:
        run_count = fits
    if run_count:
        return min(half, nu_l), half, True
    return min(bits, nu_l), 0, False


def machine_bit_usage(grid: AdaptiveGrid, schedule: MachineSchedule, which: str) -> np.ndarray:
    """Exact per-machine bit totals for one adaptive subtest family."""
    m = schedule.memberships.size
    usage = np.zeros(m, dtype=np.int64)
    for L in grid.levels:
        nu_l = nu(L)
        if which == "t1":
            bits = 1
        elif which == "t2":
            bits = min(schedule.bits_per_level, nu_l)
        elif which == "t3":
            b1, b2, run_count = level_budget_split(schedule.bits_per_level, nu_l)
            feasible1 = schedule.m_prime * b1 >= nu_l
            bits = (b1 if feasible1 else 0)
            if run_count:
                c_reps = (1 << b2) // (nu_l + 1)
                bits += max(1, (c_reps * nu_l).bit_length())
        else:
            raise ValueError(which)
        usage[schedule.subset(L)] += bits
    return usage


# ---------------------------------------------------------------------------
# statistics of the four adaptive subtests
# ---------------------------------------------------------------------------

def _haar_rows_batch(gs: np.ndarray) -> np.ndarray:
    q, r = np.linalg.qr(gs)
    diag = np.einsum("rkk->rk", r)
    signs = np.where(diag >= 0, 1.0, -1.0)
    return (q * signs[:, None, :]).transpose(0, 2, 1)


def _chunk_adaptive(cfg, grid, schedule, flat_signal, exp_node, start, count, public):
    n, m = cfg.n, cfg.m
    levels = grid.levels
    k = len(levels)
    top = nu(levels[-1])
    nodes = [exp_node.child("rep", r) for r in range(start, start + count)]
    xs = np.empty((count, m, top))
    for i, node in enumerate(nodes):
        xs[i] = node.child("obs").normals((m, top))
    xs *= cfg.noise_sd
    if flat_signal is not None:
        xs += flat_signal[None, None, :]
    cumsq = np.cumsum(xs * xs, axis=2)
    m_prime = schedule.m_prime
    sqrt_mp = math.sqrt(m_prime)
    out = {
        "T1a": np.full((count, k), np.nan),
        "T2a": np.full((count, k), np.nan),
        "T31a": np.full((count, k), np.nan),
        "T32a": np.full((count, k), np.nan),
    }
    for li, L in enumerate(levels):
        nu_l = nu(L)
        members = schedule.subset(L)
        # one-bit chi-square p-value votes: signed normalized sum
        chi = (n / m) * cumsq[:, members, nu_l - 1]
        p = chi2_cdf(nu_l, chi)
        u = np.stack([node.child("t1a", L).uniforms(m_prime) for node in nodes])
        ones = (u < p).sum(axis=1)
        out["T1a"][:, li] = (2.0 * ones - m_prime) / sqrt_mp
        x_lvl = xs[:, members, :nu_l]
        if public:
            b_eff = min(schedule.bits_per_level, nu_l)
            gs = np.stack(
                [node.child("coin", L).normals((nu_l, b_eff)) for node in nodes]
            )
            rows = _haar_rows_batch(gs)
            proj = np.einsum("rkd,rmd->rmk", rows, x_lvl)
            c = (proj > 0).sum(axis=1) - 0.5 * m_prime
            out["T2a"][:, li] = ((c * c).sum(axis=1) - b_eff * m_prime / 4.0) / (
                math.sqrt(b_eff) * m_prime
            )
        else:
            b1, b2, run_count = level_budget_split(schedule.bits_per_level, nu_l)
            if m_prime * b1 >= nu_l:
                plan = build_partition(m_prime, nu_l, b1)
                cm = plan.coord_matrix()
                bits = (np.take_along_axis(x_lvl, cm[None, :, :], axis=2) > 0).astype(
                    np.float64
                )
                counts = bits.reshape(count, -1) @ plan.scatter()
                out["T31a"][:, li] = t31_statistic(counts, plan.set_sizes(), nu_l)
            if run_count:
                c_reps = (1 << b2) // (nu_l + 1)
                p1 = chi2_cdf(1, (n / m) * x_lvl**2)
                totals = np.empty(count)
                for r, node in enumerate(nodes):
                    uu = node.child("t32a", L).uniforms((c_reps, m_prime, nu_l))
                    totals[r] = (uu < p1[r][None, :, :]).sum()
                out["T32a"][:, li] = t32_statistic(totals, m_prime, nu_l, c_reps)
    return out


def collect_adaptive_statistics(
    cfg: ProblemConfig,
    grid: AdaptiveGrid,
    schedule: MachineSchedule,
    f: Optional[LeveledSignal],
    exp_node: SeedNode,
    reps: int,
    threads: int = 1,
) -> dict[str, np.ndarray]:
    """Per-level statistics of every adaptive subtest for `reps` replications.

    Returns arrays of shape (reps, |C|); levels an individual subtest cannot
    fund are NaN.  The public-coin family ("T2a") is only computed in public
    coin mode, so private runs never touch the coin streams.
    """
    public = cfg.coin is Coin.PUBLIC
    flat = None if f is None else f.truncate(grid.top_level).flatten()
    k = grid.size
    out = {key: np.full((reps, k), np.nan) for key in ("T1a", "T2a", "T31a", "T32a")}
    spans = [(s, min(_CHUNK, reps - s)) for s in range(0, reps, _CHUNK)]

    def work(span):
        s, c = span
        return s, c, _chunk_adaptive(cfg, grid, schedule, flat, exp_node, s, c, public)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, spans))
    else:
        results = [work(sp) for sp in spans]
    for s, c, chunk in results:
        for key in out:
            out[key][s : s + c] = chunk[key]
    return out


def _max_over_levels(stats: np.ndarray) -> np.ndarray:
    """Row-wise max ignoring NaN; -inf when every level was skipped."""
    filled = np.where(np.isnan(stats), -np.inf, stats)
    return filled.max(axis=1)


def adaptive_decisions(
    stats: dict[str, np.ndarray],
    n: int,
    kappa2: Optional[float] = None,
) -> dict[str, np.ndarray]:
    """Threshold the per-level statistics into subtest and combined decisions.

    kappa2 scales the calibrated count-subtest threshold kappa2*sqrt(log2
    log2 n); levels that never ran it are ignored.  Returns 0/1 arrays for
    "T1a", "T2a", "T3a" and the coin-mode combinations "public"/"private".
    """
    tau = loglog_threshold(n)
    root_ll = math.sqrt(math.log2(_log2n(n)))
    d1 = _max_over_levels(stats["T1a"]) >= tau
    d2 = _max_over_levels(stats["T2a"]) >= tau
    d31 = _max_over_levels(stats["T31a"]) >= tau
    if kappa2 is None or np.isnan(stats["T32a"]).all():
        d32 = np.zeros(d31.shape, dtype=bool)
    else:
        d32 = _max_over_levels(stats["T32a"]) >= kappa2 * root_ll
    d3 = d31 | d32
    return {
        "T1a": d1.astype(np.int64),
        "T2a": d2.astype(np.int64),
        "T3a": d3.astype(np.int64),
        "public": (d2 | d1).astype(np.int64),
        "private": (d3 | d1).astype(np.int64),
    }


def calibrate_t3_adapt_kappa2(
    cfg: ProblemConfig,
    grid: AdaptiveGrid,
    schedule: MachineSchedule,
    node: SeedNode,
    null_reps: int = 2000,
    alpha2: float = 0.05,
    threads: int = 1,
) -> float:
    """Null quantile of max_L S^{III,2}(L) / sqrt(log2 log2 n) at level alpha2."""
    stats = collect_adaptive_statistics(
        cfg, grid, schedule, None, node.child("kappa2"), null_reps, threads
    )
    vals = _max_over_levels(stats["T32a"])
    if not np.isfinite(vals).any():
        return math.inf
    root_ll = math.sqrt(math.log2(_log2n(cfg.n)))
    return float(np.quantile(vals, 1.0 - alpha2, method="higher")) / root_ll


# ---------------------------------------------------------------------------
# single-replication views of the three adaptive tests
# ---------------------------------------------------------------------------

def t1_adapt(cfg, grid, schedule, f, node) -> int:
    """One replication of the adaptive one-bit vote test."""
    stats = collect_adaptive_statistics(cfg, grid, schedule, f, node, 1)
    return int(adaptive_decisions(stats, cfg.n)["T1a"][0])


def t2_adapt(cfg, grid, schedule, f, node) -> int:
    """One replication of the adaptive rotated-sign test (public coin)."""
    if cfg.coin is not Coin.PUBLIC:
        raise ValueError("t2_adapt requires the public coin mode")
    stats = collect_adaptive_statistics(cfg, grid, schedule, f, node, 1)
    return int(adaptive_decisions(stats, cfg.n)["T2a"][0])


def t3_adapt(cfg, grid, schedule, f, node, kappa2: Optional[float] = None) -> int:
    """One replication of the adaptive private sign/count test."""
    if cfg.coin is Coin.PUBLIC:
        raise ValueError("t3_adapt runs in private coin mode")
    stats = collect_adaptive_statistics(cfg, grid, schedule, f, node, 1)
    return int(adaptive_decisions(stats, cfg.n, kappa2)["T3a"][0])

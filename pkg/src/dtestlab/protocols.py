"""The distributed one-round tests as encode/decide pairs with exact bit budgets.

Four tests are implemented:

* ``T1`` -- each machine sends one Bernoulli bit whose success probability is
  the chi-square p-value transform of its local squared norm; the center
  applies a two-sided binomial statistic.  Optimal when the total budget is
  small relative to the dimension.
* ``T1-local`` -- the single-machine chi-square test, used as the small-m
  fallback.
* ``T2`` -- public coin: machines send sign bits of their observation rotated
  by a shared Haar draw; per-coordinate binomial counts are aggregated.
* ``T3`` -- private coin, large budget: a coordinate sign subtest on a
  deterministic machine-to-coordinate partition, OR-combined with a pooled
  count of chi-square p-value Bernoullis when the budget permits.

Every encode path is a pure function of (observation, coin, seed node), so
replications are embarrassingly parallel.  Each protocol exposes both a
per-machine contract API (``encode`` / ``decide`` on Transcript objects) and
a vectorized chunk API used by the Monte Carlo harness; both read the same
seed-node streams, so they produce bitwise-identical transcripts and
decisions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .model import Coin, ProblemConfig, Transcript
from .randomness import OrthogonalMatrix, RotationCoin, SeedNode
from .stats import chi2_cdf

__all__ = [
    "BudgetError",
    "PartitionPlan",
    "build_partition",
    "t1_encode",
    "t1_decide",
    "t1_statistic",
    "t1_local_decide",
    "t1_local_statistic",
    "t2_encode",
    "t2_decide",
    "t2_statistic",
    "t31_encode",
    "t31_decide",
    "t31_statistic",
    "t32_encode",
    "t32_decide",
    "t32_statistic",
    "t32_replicates",
    "t32_width",
    "t3_budgets",
    "t3_decide_combined",
    "TestProtocol",
    "OneBitVoteTest",
    "LocalChiSquareTest",
    "RotatedSignTest",
    "SplitBudgetSignCountTest",
    "get_protocol",
    "choose_protocol",
    "PROTOCOL_NAMES",
]


class BudgetError(ValueError):
    """The communication budget cannot support the requested construction."""


# ---------------------------------------------------------------------------
# statistics (pure functions of transcript counts)
# ---------------------------------------------------------------------------

def t1_statistic(ones: np.ndarray | int, m: int):
    """|(1/m) (sum_j (Y_j - 1/2))^2 - 1/4| from the count of one-bits."""
    s = np.asarray(ones, dtype=np.float64) - 0.5 * m
    return np.abs(s * s / m - 0.25)

def t1_local_statistic(cfg: ProblemConfig, x1: np.ndarray) -> float:
    # pairwise .sum() keeps this bitwise-equal to the vectorized chunk path
    s = (cfg.n / cfg.m) * float((np.asarray(x1) ** 2).sum())
    return (s - cfg.d) / math.sqrt(cfg.d)

def t2_statistic(counts: np.ndarray, m: int, b_eff: int):
    """Aggregated rotated-sign statistic from per-coordinate one-counts.

    counts has shape (..., b_eff); machines enter through counts only.
    """
    c = np.asarray(counts, dtype=np.float64) - 0.5 * m
    quad = (c * c).sum(axis=-1)
    return np.abs(quad / (math.sqrt(b_eff) * m) - math.sqrt(b_eff) / 4.0)

def t31_statistic(counts: np.ndarray, sizes: np.ndarray, d: int):
    """Coordinate sign statistic from per-coordinate one-counts.

    counts (..., d) holds the number of positive-sign bits for each
    coordinate; sizes (d,) the partition set sizes |I_i|.  Normalization is
    by |I_1| as in the two-sided central test.
    """
    c = np.asarray(counts, dtype=np.float64) - 0.5 * np.asarray(sizes, dtype=np.float64)
    quad = (c * c).sum(axis=-1)
    return np.abs(quad / (sizes[0] * math.sqrt(d)) - math.sqrt(d) / 4.0)

def t32_statistic(total: np.ndarray | float, m: int, d: int, c_reps: int):
    """Pooled count statistic from the machine-summed counts N^1 + ... + N^m."""
    t = np.asarray(total, dtype=np.float64) - m * c_reps * d / 2.0
    return np.abs(t * t / (d * m * c_reps) - 0.25)


# ---------------------------------------------------------------------------
# T1: one-bit chi-square p-value vote
# ---------------------------------------------------------------------------

def _t1_probs(cfg: ProblemConfig, x_sq_norms) -> np.ndarray:
    return chi2_cdf(cfg.d, (cfg.n / cfg.m) * np.asarray(x_sq_norms))

def t1_encode(cfg: ProblemConfig, j: int, x: np.ndarray, node: SeedNode) -> Transcript:
    """Machine j's one-bit transcript Ber(F_chi2_d((n/m) ||X^j||^2)).

    node is the replication's shared encode node; machine j reads element j
    of its length-m uniform block.
    """
    p = float(_t1_probs(cfg, (np.asarray(x) ** 2).sum()))
    u = float(node.child("t1u").uniforms(cfg.m)[j])
    return Transcript((int(u < p),))

def t1_decide(transcripts: Sequence[Transcript], kappa: float) -> int:
    if any(t.bit_count != 1 for t in transcripts):
        raise ValueError("T1 transcripts must be exactly 1 bit")
    ones = sum(t.bits[0] for t in transcripts)
    return int(t1_statistic(ones, len(transcripts)) >= kappa)

def t1_local_decide(cfg: ProblemConfig, x1: np.ndarray, kappa: float) -> int:
    """Single-machine chi-square test 1{(S - d)/sqrt(d) >= kappa}."""
    return int(t1_local_statistic(cfg, x1) >= kappa)


# ---------------------------------------------------------------------------
# T2: rotated sign bits under a shared Haar coin
# ---------------------------------------------------------------------------

def _coin_rows(coin, k: int) -> np.ndarray:
    if isinstance(coin, OrthogonalMatrix):
        return coin.rows(k)
    if isinstance(coin, RotationCoin):
        return coin.rows(k)
    raise TypeError("coin must be an OrthogonalMatrix or RotationCoin")

def t2_encode(cfg: ProblemConfig, j: int, x: np.ndarray, coin) -> Transcript:
    """Sign bits of the first min(b, d) shared-rotated coordinates."""
    if coin is None:
        raise ValueError("T2 requires the public coin")
    b_eff = min(cfg.b, cfg.d)
    rotated = math.sqrt(cfg.n / cfg.m) * (_coin_rows(coin, b_eff) @ x)
    return Transcript(tuple(int(v > 0) for v in rotated))

def t2_decide(transcripts: Sequence[Transcript], m: int, b_eff: int, kappa: float) -> int:
    if len(transcripts) != m:
        raise ValueError("one transcript per machine expected")
    if any(t.bit_count != b_eff for t in transcripts):
        raise ValueError(f"T2 transcripts must be exactly {b_eff} bits")
    counts = np.array([t.bits for t in transcripts]).sum(axis=0)
    return int(t2_statistic(counts, m, b_eff) >= kappa)


# ---------------------------------------------------------------------------
# T3 subtest 1: per-coordinate sign bits on a deterministic partition
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PartitionPlan:
    """Round-robin assignment of machines to coordinates.

    Machine j covers the bits_per_machine consecutive coordinates starting
    at (j * bits_per_machine) mod d (wrapping), so the coordinate sets I_i
    have sizes floor(m b'/d) or ceil(m b'/d) and every machine lies in
    exactly b' sets.
    """

    m: int
    d: int
    bits_per_machine: int

    def coords_of(self, j: int) -> np.ndarray:
        start = (j * self.bits_per_machine) % self.d
        return (start + np.arange(self.bits_per_machine)) % self.d

    def coord_matrix(self) -> np.ndarray:
        """(m, b') coordinate indices for all machines."""
        starts = (np.arange(self.m) * self.bits_per_machine) % self.d
        return (starts[:, None] + np.arange(self.bits_per_machine)[None, :]) % self.d

    def machines_of(self, i: int) -> np.ndarray:
        cm = self.coord_matrix()
        return np.nonzero((cm == i).any(axis=1))[0]

    def set_sizes(self) -> np.ndarray:
        return np.bincount(self.coord_matrix().ravel(), minlength=self.d)

    def scatter(self) -> np.ndarray:
        """(m*b', d) 0/1 matrix mapping flattened machine bits to coordinates."""
        flat = self.coord_matrix().ravel()
        s = np.zeros((flat.size, self.d))
        s[np.arange(flat.size), flat] = 1.0
        return s


def build_partition(m: int, d: int, bits_per_machine: int) -> PartitionPlan:
    if bits_per_machine < 1:
        raise BudgetError("bits_per_machine must be >= 1")
    if bits_per_machine > d:
        raise BudgetError(f"bits_per_machine={bits_per_machine} exceeds d={d}")
    if m * bits_per_machine < d:
        raise BudgetError(
            f"total budget m*b'={m * bits_per_machine} cannot cover d={d} coordinates"
        )
    return PartitionPlan(m, d, bits_per_machine)


def t31_encode(cfg: ProblemConfig, j: int, x: np.ndarray, plan: PartitionPlan) -> Transcript:
    """One sign bit per assigned coordinate."""
    if plan.d != cfg.d or plan.m != cfg.m:
        raise ValueError("partition plan does not match the configuration")
    return Transcript(tuple(int(x[i] > 0) for i in plan.coords_of(j)))

def t31_decide(transcripts: Sequence[Transcript], plan: PartitionPlan, kappa: float) -> int:
    if len(transcripts) != plan.m:
        raise ValueError("one transcript per machine expected")
    if any(t.bit_count != plan.bits_per_machine for t in transcripts):
        raise ValueError("T3 sign transcripts must carry exactly b' bits")
    bits = np.array([t.bits for t in transcripts], dtype=np.float64)
    counts = bits.ravel() @ plan.scatter()
    return int(t31_statistic(counts, plan.set_sizes(), plan.d) >= kappa)


# ---------------------------------------------------------------------------
# T3 subtest 2: pooled count of chi-square p-value Bernoullis
# ---------------------------------------------------------------------------

def t32_replicates(d: int, budget: int) -> int:
    """C_{b,d} = floor(2^b / (d+1)); number of Bernoulli layers per coordinate."""
    return (1 << budget) // (d + 1)

def t32_width(d: int, budget: int) -> int:
    """Bits needed to transmit N^j in {0..C d}."""
    return max(1, (t32_replicates(d, budget) * d).bit_length())

def _t32_layer_probs(cfg: ProblemConfig, x: np.ndarray) -> np.ndarray:
    return chi2_cdf(1, (cfg.n / cfg.m) * np.asarray(x) ** 2)

def t32_encode(
    cfg: ProblemConfig, j: int, x: np.ndarray, node: SeedNode, budget: Optional[int] = None
) -> Transcript:
    """Transcript N^j: total of C x d Bernoulli(F_chi2_1((sqrt(n/m) X_i)^2)) draws.

    node is the replication's shared encode node; machine j reads slice
    [:, j, :] of its (C, m, d) uniform block.
    """
    budget = cfg.b if budget is None else budget
    c_reps = t32_replicates(cfg.d, budget)
    if c_reps < 1:
        raise BudgetError(
            f"budget {budget} too small for the count subtest at d={cfg.d}"
        )
    p = _t32_layer_probs(cfg, x)
    u = node.child("t32u").uniforms((c_reps, cfg.m, cfg.d))[:, j, :]
    n_j = int((u < p[None, :]).sum())
    return Transcript.from_int(n_j, t32_width(cfg.d, budget))

def t32_decide(
    transcripts: Sequence[Transcript],
    cfg: ProblemConfig,
    kappa: float,
    budget: Optional[int] = None,
) -> int:
    budget = cfg.b if budget is None else budget
    c_reps = t32_replicates(cfg.d, budget)
    width = t32_width(cfg.d, budget)
    if any(t.bit_count != width for t in transcripts):
        raise ValueError(f"count transcripts must carry exactly {width} bits")
    total = sum(t.to_int() for t in transcripts)
    return int(t32_statistic(total, len(transcripts), cfg.d, c_reps) >= kappa)


def t3_budgets(cfg: ProblemConfig) -> tuple[int, int, bool]:
    """Split the budget across the two subtests.

    Returns (sign_bits, count_budget, run_count_subtest).  Both subtests run
    at budget floor(b/2) each when the count subtest's transcript fits
    (2^(b//2) >= d + 1, the exact-arithmetic form of b >= 2 log2(d+1));
    otherwise only the sign subtest runs, at the full budget.
    """
    half = cfg.b // 2
    run_count = half >= 1 and (1 << half) >= cfg.d + 1
    if run_count:
        return min(half, cfg.d), half, True
    return min(cfg.b, cfg.d), 0, False


def t3_decide_combined(
    cfg: ProblemConfig,
    data,
    node: SeedNode,
    kappas: Mapping[str, float],
) -> int:
    """Run both T3 subtests on the dataset and OR the decisions.

    kappas maps "T3-1" (and "T3-2" when the budget permits) to thresholds.
    """
    b_sign, b_count, run_count = t3_budgets(cfg)
    plan = build_partition(cfg.m, cfg.d, b_sign)
    x = data.observations
    sign_ts = [t31_encode(cfg, j, x[j], plan) for j in range(cfg.m)]
    d1 = t31_decide(sign_ts, plan, kappas["T3-1"])
    if not run_count:
        return d1
    count_ts = [t32_encode(cfg, j, x[j], node, budget=b_count) for j in range(cfg.m)]
    d2 = t32_decide(count_ts, cfg, kappas["T3-2"], budget=b_count)
    return int(d1 or d2)


# ---------------------------------------------------------------------------
# protocol objects: shared surface for the harness and the contract tests
# ---------------------------------------------------------------------------

class TestProtocol:
    """A distributed test: per-machine encode plus a central decide.

    Subclasses implement the vectorized ``chunk_statistics`` (one value per
    named sub-statistic per replication) and the per-machine contract API.
    ``decide`` applies the deterministic part of the thresholds; boundary
    randomization is the harness's job (see calibration.apply_thresholds).
    """

    name: str = ""
    requires_public_coin: bool = False

    def stat_names(self, cfg: ProblemConfig) -> tuple[str, ...]:
        raise NotImplementedError

    def coin_rows(self, cfg: ProblemConfig) -> int:
        """Rows of the shared Haar frame this test consumes (0 if coinless)."""
        return 0

    def max_bits(self, cfg: ProblemConfig) -> int:
        raise NotImplementedError

    def chunk_statistics(self, cfg, xs, coins, nodes) -> np.ndarray:
        """Sub-statistics for a chunk of replications.

        xs is (R, m, d); coins is (R, k, d) stacked frame rows or None;
        nodes the per-replication seed nodes.  Returns (R, n_stats).
        """
        raise NotImplementedError

    def encode(self, cfg, j, x, coin, node, thresholds=None) -> Transcript:
        raise NotImplementedError

    def transcripts_for(self, cfg, data, coin, node, thresholds=None) -> list[Transcript]:
        return [
            self.encode(cfg, j, data.observations[j], coin, node, thresholds)
            for j in range(cfg.m)
        ]

    def decide(self, cfg, transcripts, coin, thresholds) -> int:
        raise NotImplementedError


class OneBitVoteTest(TestProtocol):
    name = "T1"
    requires_public_coin = False

    def stat_names(self, cfg):
        return ("T1",)

    def max_bits(self, cfg):
        return 1

    def chunk_statistics(self, cfg, xs, coins, nodes):
        s = (cfg.n / cfg.m) * (xs * xs).sum(axis=2)  # (R, m)
        p = chi2_cdf(cfg.d, s)
        u = np.stack([node.child("t1u").uniforms(cfg.m) for node in nodes])
        ones = (u < p).sum(axis=1)
        return t1_statistic(ones, cfg.m)[:, None]

    def encode(self, cfg, j, x, coin, node, thresholds=None):
        return t1_encode(cfg, j, x, node)

    def decide(self, cfg, transcripts, coin, thresholds):
        return t1_decide(transcripts, thresholds["T1"].kappa)


class LocalChiSquareTest(TestProtocol):
    """Small-m fallback: machine 1 runs the chi-square test locally."""

    name = "T1-local"
    requires_public_coin = False

    def stat_names(self, cfg):
        return ("T1-local",)

    def max_bits(self, cfg):
        return 1

    def chunk_statistics(self, cfg, xs, coins, nodes):
        s = (cfg.n / cfg.m) * (xs[:, 0, :] ** 2).sum(axis=1)
        return ((s - cfg.d) / math.sqrt(cfg.d))[:, None]

    def encode(self, cfg, j, x, coin, node, thresholds=None):
        if j != 0:
            return Transcript(())
        if thresholds is None:
            raise ValueError("T1-local encodes its decision; thresholds required")
        return Transcript((t1_local_decide(cfg, x, thresholds["T1-local"].kappa),))

    def decide(self, cfg, transcripts, coin, thresholds):
        return int(transcripts[0].bits[0])


class RotatedSignTest(TestProtocol):
    name = "T2"
    requires_public_coin = True

    def stat_names(self, cfg):
        return ("T2",)

    def coin_rows(self, cfg):
        return min(cfg.b, cfg.d)

    def max_bits(self, cfg):
        return min(cfg.b, cfg.d)

    def chunk_statistics(self, cfg, xs, coins, nodes):
        b_eff = self.coin_rows(cfg)
        proj = np.einsum("rkd,rmd->rmk", coins, xs)
        counts = (proj > 0).sum(axis=1)  # (R, b_eff)
        return t2_statistic(counts, cfg.m, b_eff)[:, None]

    def encode(self, cfg, j, x, coin, node, thresholds=None):
        return t2_encode(cfg, j, x, coin)

    def decide(self, cfg, transcripts, coin, thresholds):
        return t2_decide(transcripts, cfg.m, self.coin_rows(cfg), thresholds["T2"].kappa)


class SplitBudgetSignCountTest(TestProtocol):
    """T3: sign subtest OR pooled-count subtest under a split budget."""

    name = "T3"
    requires_public_coin = False

    def stat_names(self, cfg):
        _, _, run_count = t3_budgets(cfg)
        return ("T3-1", "T3-2") if run_count else ("T3-1",)

    def max_bits(self, cfg):
        b_sign, b_count, run_count = t3_budgets(cfg)
        bits = b_sign
        if run_count:
            bits += t32_width(cfg.d, b_count)
        return bits

    def _plan(self, cfg):
        b_sign, _, _ = t3_budgets(cfg)
        return build_partition(cfg.m, cfg.d, b_sign)

    def chunk_statistics(self, cfg, xs, coins, nodes):
        b_sign, b_count, run_count = t3_budgets(cfg)
        plan = self._plan(cfg)
        cm = plan.coord_matrix()  # (m, b_sign)
        bits = (np.take_along_axis(xs, cm[None, :, :], axis=2) > 0).astype(np.float64)
        counts = bits.reshape(len(xs), -1) @ plan.scatter()
        s1 = t31_statistic(counts, plan.set_sizes(), cfg.d)
        if not run_count:
            return s1[:, None]
        c_reps = t32_replicates(cfg.d, b_count)
        p = _t32_layer_probs(cfg, xs)  # (R, m, d)
        totals = np.empty(len(xs))
        for r, node in enumerate(nodes):
            u = node.child("t32u").uniforms((c_reps, cfg.m, cfg.d))
            totals[r] = (u < p[r][None, :, :]).sum()
        s2 = t32_statistic(totals, cfg.m, cfg.d, c_reps)
        return np.stack([s1, s2], axis=1)

    def encode(self, cfg, j, x, coin, node, thresholds=None):
        b_sign, b_count, run_count = t3_budgets(cfg)
        plan = self._plan(cfg)
        sign_bits = t31_encode(cfg, j, x, plan).bits
        if not run_count:
            return Transcript(sign_bits)
        count_bits = t32_encode(cfg, j, x, node, budget=b_count).bits
        return Transcript(sign_bits + count_bits)

    def decide(self, cfg, transcripts, coin, thresholds):
        b_sign, b_count, run_count = t3_budgets(cfg)
        plan = self._plan(cfg)
        sign_ts = [Transcript(t.bits[:b_sign]) for t in transcripts]
        d1 = t31_decide(sign_ts, plan, thresholds["T3-1"].kappa)
        if not run_count:
            return d1
        count_ts = [Transcript(t.bits[b_sign:]) for t in transcripts]
        d2 = t32_decide(count_ts, cfg, thresholds["T3-2"].kappa, budget=b_count)
        return int(d1 or d2)


_PROTOCOLS = {
    "T1": OneBitVoteTest(),
    "T1-local": LocalChiSquareTest(),
    "T2": RotatedSignTest(),
    "T3": SplitBudgetSignCountTest(),
}

PROTOCOL_NAMES = ("T1", "T1-local", "T2", "T3", "auto")


def get_protocol(name: str, cfg: Optional[ProblemConfig] = None) -> TestProtocol:
    """Look up a protocol by CLI name; "auto" resolves via choose_protocol."""
    if name == "auto":
        if cfg is None:
            raise ValueError('protocol "auto" needs a configuration to resolve')
        return choose_protocol(cfg)
    try:
        return _PROTOCOLS[name]
    except KeyError:
        raise ValueError(f"unknown protocol {name!r}; expected one of {PROTOCOL_NAMES}")


def choose_protocol(cfg: ProblemConfig, m_alpha: int = 16) -> TestProtocol:
    """Pick the rate-optimal test for the configuration's regime.

    Small fleets (m <= m_alpha) fall back to the local chi-square test.
    Otherwise: public coin runs T2 once the total budget m*b reaches the
    dimension, private coin runs T3 once m*b^2 reaches d^2, and the one-bit
    vote T1 covers the low-budget regimes of both.
    """
    if cfg.m <= m_alpha:
        return _PROTOCOLS["T1-local"]
    if cfg.coin is Coin.PUBLIC:
        if cfg.m * cfg.b >= cfg.d:
            return _PROTOCOLS["T2"]
        return _PROTOCOLS["T1"]
    if cfg.m * cfg.b * cfg.b >= cfg.d * cfg.d:
        return _PROTOCOLS["T3"]
    return _PROTOCOLS["T1"]

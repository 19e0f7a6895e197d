"""The Gaussian sequence layer: leveled signals, rates, and the finite-d reduction.

Signals live directly in wavelet-coefficient space: level l carries 2^l
coefficients, and the Sobolev norm is the level-weighted coefficient norm
sum_l 2^{2ls} sum_i f_{li}^2.  Testing a smoothness-s signal at separation
rho reduces to the finite-dimensional problem on the first
nu_L = 2^{L+1} - 1 coefficients with L chosen so that 2^L ~ rho^{-1/s}.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .calibration import ThresholdTable, apply_thresholds, ensure_calibrated
from .engine import collect_statistics
from .model import Coin, Dataset, ProblemConfig, Signal
from .protocols import choose_protocol
from .randomness import SeedNode, sample_observations

__all__ = [
    "SobolevBall",
    "LeveledSignal",
    "InfeasibleAlternativeError",
    "nu",
    "truncation_level",
    "theoretical_rate_finite",
    "theoretical_rate_nonparam",
    "sample_sequence_observations",
    "run_nonparam_test",
    "make_sobolev_alternative",
    "ALTERNATIVE_KINDS",
]

ALTERNATIVE_KINDS = ("BoundaryFlat", "LowFrequency", "RandomDirection")


class InfeasibleAlternativeError(ValueError):
    """No signal with the requested norm fits inside the Sobolev ball."""


@dataclass(frozen=True)
class SobolevBall:
    """Smoothness s > 0 and radius R > 0."""

    s: float
    R: float

    def __post_init__(self):
        if self.s <= 0 or self.R <= 0:
            raise ValueError("Sobolev ball requires s > 0 and R > 0")


def nu(L: int) -> int:
    """Number of coefficients through level L: 2^(L+1) - 1."""
    return (1 << (L + 1)) - 1


@dataclass(frozen=True, eq=False)
class LeveledSignal:
    """Wavelet coefficients by level; level l holds exactly 2^l entries."""

    levels: tuple[np.ndarray, ...]

    def __post_init__(self):
        frozen = []
        for l, arr in enumerate(self.levels):
            a = np.array(arr, dtype=np.float64)
            if a.shape != (1 << l,):
                raise ValueError(f"level {l} must hold exactly {1 << l} entries")
            a.flags.writeable = False
            frozen.append(a)
        object.__setattr__(self, "levels", tuple(frozen))

    @property
    def max_level(self) -> int:
        return len(self.levels) - 1

    def flatten(self) -> np.ndarray:
        """Row-major by level then index (the one-to-one level ordering)."""
        return np.concatenate(self.levels)

    def l2_norm_sq(self) -> float:
        return float(sum(np.dot(a, a) for a in self.levels))

    def l2_norm(self) -> float:
        return math.sqrt(self.l2_norm_sq())

    def sobolev_norm_sq(self, s: float) -> float:
        return float(
            sum(4.0 ** (l * s) * np.dot(a, a) for l, a in enumerate(self.levels))
        )

    def sobolev_norm(self, s: float) -> float:
        return math.sqrt(self.sobolev_norm_sq(s))

    def pad_to(self, L: int) -> "LeveledSignal":
        if L <= self.max_level:
            return self
        extra = tuple(np.zeros(1 << l) for l in range(self.max_level + 1, L + 1))
        return LeveledSignal(self.levels + extra)

    def truncate(self, L: int) -> "LeveledSignal":
        """Projection onto levels 0..L (pads with zero levels if short)."""
        return LeveledSignal(self.pad_to(L).levels[: L + 1])

    def tail_mass_sq(self, L: int) -> float:
        """Energy above level L."""
        return float(
            sum(np.dot(a, a) for a in self.levels[L + 1 :])
        )

    @staticmethod
    def from_flat(vec: np.ndarray) -> "LeveledSignal":
        vec = np.asarray(vec, dtype=np.float64)
        levels = []
        pos = 0
        l = 0
        while pos < vec.size:
            width = 1 << l
            if pos + width > vec.size:
                raise ValueError("flat vector length is not 2^(L+1) - 1")
            levels.append(vec[pos : pos + width])
            pos += width
            l += 1
        return LeveledSignal(tuple(levels))

    @staticmethod
    def zeros(L: int) -> "LeveledSignal":
        return LeveledSignal(tuple(np.zeros(1 << l) for l in range(L + 1)))


def truncation_level(s: float, rho: float) -> int:
    """Resolution cutoff L = max(1, floor(log2(1/rho) / s)), so 2^L ~ rho^(-1/s)."""
    if s <= 0:
        raise ValueError("s must be positive")
    if rho <= 0:
        raise ValueError("rho must be positive")
    if rho >= 1:
        return 1
    return max(1, math.floor(math.log2(1.0 / rho) / s))


def theoretical_rate_finite(n: int, m: int, d: int, b: int, coin: Coin) -> float:
    """Constant-1 separation rate rho^2 for the finite-dimensional problem."""
    b_eff = min(b, d)
    if Coin(coin) is Coin.PUBLIC:
        return (math.sqrt(d) / n) * min(math.sqrt(d / b_eff), math.sqrt(m))
    return (math.sqrt(d) / n) * min(d / b_eff, math.sqrt(m))


def theoretical_rate_nonparam(
    n: int, m: int, b: int, ball: SobolevBall, coin: Coin
) -> float:
    """Constant-1 three-regime rate rho^2 for the sequence model."""
    s = ball.s
    if Coin(coin) is Coin.PUBLIC:
        high = n ** (1.0 / (2 * s + 0.5))
        low = high / m ** ((2 * s + 1.0) / (2 * s + 0.5))
        if b >= high:
            return n ** (-2 * s / (2 * s + 0.5))
        if b >= low:
            return (math.sqrt(b) * n) ** (-2 * s / (2 * s + 1.0))
        return (n / math.sqrt(m)) ** (-2 * s / (2 * s + 0.5))
    high = n ** (1.0 / (2 * s + 0.5))
    low = high / m ** ((s + 0.75) / (2 * s + 0.5))
    if b >= high:
        return n ** (-2 * s / (2 * s + 0.5))
    if b >= low:
        return (b * n) ** (-2 * s / (2 * s + 1.5))
    return (n / math.sqrt(m)) ** (-2 * s / (2 * s + 0.5))


def sample_sequence_observations(
    cfg: ProblemConfig, f: LeveledSignal, L: int, node: SeedNode
) -> Dataset:
    """Observe the first nu_L coefficients at every machine."""
    if f.max_level < L:
        raise ValueError(
            f"signal defined up to level {f.max_level}, need level {L}"
        )
    flat = f.truncate(L).flatten()
    reduced = cfg.with_updates(d=nu(L))
    return sample_observations(reduced, Signal(flat), node)


def make_sobolev_alternative(
    ball: SobolevBall, rho: float, kind: str, node: Optional[SeedNode] = None
) -> LeveledSignal:
    """A signal with ||f||_2 = rho exactly and Sobolev norm at most R.

    BoundaryFlat spreads the mass evenly over level L_s(rho); LowFrequency
    concentrates it in the single level-0 coefficient; RandomDirection is
    uniform on the sphere of the truncated space, feasibility-checked.
    """
    if rho <= 0:
        raise InfeasibleAlternativeError("rho must be positive")
    if kind == "LowFrequency":
        f = LeveledSignal((np.array([rho]),)).pad_to(1)
    elif kind == "BoundaryFlat":
        L = truncation_level(ball.s, rho)
        coeffs = np.full(1 << L, rho / 2 ** (L / 2.0))
        f = LeveledSignal(tuple(np.zeros(1 << l) for l in range(L)) + (coeffs,))
    elif kind == "RandomDirection":
        if node is None:
            raise ValueError("RandomDirection needs a seed node")
        L = truncation_level(ball.s, rho)
        g = node.normals(nu(L))
        f = LeveledSignal.from_flat(rho * g / np.linalg.norm(g))
    else:
        raise ValueError(f"unknown alternative kind {kind!r}")
    if f.sobolev_norm(ball.s) > ball.R:
        raise InfeasibleAlternativeError(
            f"{kind} signal with norm {rho:g} has Sobolev norm "
            f"{f.sobolev_norm(ball.s):g} > R={ball.R:g}"
        )
    return f


def reduced_config(cfg: ProblemConfig, ball: SobolevBall, rho: float) -> ProblemConfig:
    """The finite-dimensional problem the sequence test reduces to."""
    return cfg.with_updates(d=nu(truncation_level(ball.s, rho)))


def run_nonparam_test(
    cfg: ProblemConfig,
    ball: SobolevBall,
    rho: float,
    f: Optional[LeveledSignal],
    node: SeedNode,
    table: Optional[ThresholdTable] = None,
    null_reps: int = 20_000,
    threads: int = 1,
) -> int:
    """One decision of the reduction: truncate at L_s(rho), run the regime test.

    f = None means the null.  Thresholds are pulled from (or calibrated
    into) the table for the reduced configuration.
    """
    L = truncation_level(ball.s, rho)
    reduced = reduced_config(cfg, ball, rho)
    protocol = choose_protocol(reduced)
    if table is None:
        table = ThresholdTable()
    thresholds = ensure_calibrated(
        table, protocol, reduced, node.child("cal"), null_reps, threads
    )
    if f is None:
        signal = None
    else:
        signal = f.truncate(L).flatten()
    stats, ties = collect_statistics(
        protocol, reduced, signal, node.child("run"), 1, threads=1
    )
    return int(
        apply_thresholds(stats, protocol.stat_names(reduced), thresholds, ties)[0]
    )

"""Core domain types shared by protocols, calibration and the risk harness.

All types are immutable after construction and safe to share across
concurrent Monte Carlo workers.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

__all__ = [
    "Coin",
    "ConfigError",
    "ProblemConfig",
    "Signal",
    "Dataset",
    "Transcript",
    "RiskReport",
    "validate_config",
]


class Coin(str, enum.Enum):
    """Randomness model: machines share a coin (public) or do not (private)."""

    PRIVATE = "private"
    PUBLIC = "public"


class ConfigError(ValueError):
    """A ProblemConfig or experiment config violates its invariants."""


@dataclass(frozen=True)
class ProblemConfig:
    """One finite-dimensional distributed testing instance.

    n is the signal-to-noise ratio (total sample size), m the number of
    machines, d the dimension, b the per-machine bit budget and alpha the
    target risk level.  The per-machine noise standard deviation is exactly
    sqrt(m/n).
    """

    n: int
    m: int
    d: int
    b: int
    alpha: float
    coin: Coin = Coin.PRIVATE

    def __post_init__(self):
        object.__setattr__(self, "coin", Coin(self.coin))

    @property
    def noise_sd(self) -> float:
        return math.sqrt(self.m / self.n)

    def with_updates(self, **kw) -> "ProblemConfig":
        vals = dict(n=self.n, m=self.m, d=self.d, b=self.b, alpha=self.alpha, coin=self.coin)
        vals.update(kw)
        return ProblemConfig(**vals)

    def fingerprint(self) -> str:
        return f"n{self.n}-m{self.m}-d{self.d}-b{self.b}-{self.coin.value}"


def validate_config(cfg: ProblemConfig) -> None:
    """Raise ConfigError naming the offending field if any invariant fails."""
    for name in ("n", "m", "d", "b"):
        v = getattr(cfg, name)
        if not isinstance(v, (int, np.integer)) or isinstance(v, bool):
            raise ConfigError(f"{name} must be an integer, got {v!r}")
        if v < 1:
            raise ConfigError(f"{name} must be >= 1, got {v}")
    if not (0.0 < cfg.alpha < 1.0):
        raise ConfigError(f"alpha must lie in (0,1), got {cfg.alpha}")
    if not isinstance(cfg.coin, Coin):
        raise ConfigError(f"coin must be a Coin, got {cfg.coin!r}")


def _frozen_array(x, dtype=np.float64) -> np.ndarray:
    a = np.array(x, dtype=dtype)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class Signal:
    """A real signal vector of length d."""

    coeffs: np.ndarray

    def __post_init__(self):
        a = _frozen_array(self.coeffs)
        if a.ndim != 1:
            raise ValueError("signal coefficients must form a 1-d vector")
        if not np.isfinite(a).all():
            raise ValueError("signal coefficients must be finite")
        object.__setattr__(self, "coeffs", a)

    def __len__(self) -> int:
        return self.coeffs.shape[0]

    def l2_norm_sq(self) -> float:
        return float(np.dot(self.coeffs, self.coeffs))

    def l2_norm(self) -> float:
        return math.sqrt(self.l2_norm_sq())

    @staticmethod
    def zeros(d: int) -> "Signal":
        return Signal(np.zeros(d))


@dataclass(frozen=True, eq=False)
class Dataset:
    """The m x d matrix of local observations; row j belongs to machine j."""

    observations: np.ndarray

    def __post_init__(self):
        a = _frozen_array(self.observations)
        if a.ndim != 2:
            raise ValueError("observations must form an (m, d) matrix")
        if not np.isfinite(a).all():
            raise ValueError("observations must be finite")
        object.__setattr__(self, "observations", a)

    @property
    def m(self) -> int:
        return self.observations.shape[0]

    @property
    def d(self) -> int:
        return self.observations.shape[1]

    def row(self, j: int) -> np.ndarray:
        return self.observations[j]


@dataclass(frozen=True)
class Transcript:
    """A per-machine payload of bits with exact bit accounting."""

    bits: tuple[int, ...]

    def __post_init__(self):
        bits = tuple(int(b) for b in self.bits)
        if any(b not in (0, 1) for b in bits):
            raise ValueError("transcript bits must be 0 or 1")
        object.__setattr__(self, "bits", bits)

    @property
    def bit_count(self) -> int:
        return len(self.bits)

    def to_int(self) -> int:
        """Payload read as a big-endian unsigned integer."""
        v = 0
        for b in self.bits:
            v = (v << 1) | b
        return v

    @staticmethod
    def from_int(value: int, width: int) -> "Transcript":
        if value < 0 or value >= (1 << width):
            raise ValueError(f"{value} does not fit in {width} bits")
        return Transcript(tuple((value >> (width - 1 - i)) & 1 for i in range(width)))


@dataclass(frozen=True)
class RiskReport:
    """Monte Carlo estimate of the testing risk of one calibrated protocol.

    worst_risk is type1 plus the largest Type II estimate over the
    alternative family; mc_radius is the largest 95% binomial CI half-width
    among the individual estimates.
    """

    type1: float
    type2_by_alternative: Mapping[str, float]
    worst_risk: float
    mc_radius: float
    reps: int

    def __post_init__(self):
        object.__setattr__(
            self, "type2_by_alternative", dict(self.type2_by_alternative)
        )
        expected = self.type1 + (
            max(self.type2_by_alternative.values()) if self.type2_by_alternative else 0.0
        )
        if not math.isclose(self.worst_risk, expected, rel_tol=0, abs_tol=1e-12):
            raise ValueError("worst_risk must equal type1 + max type2")

    @staticmethod
    def build(
        type1: float, type2_by_alternative: Mapping[str, float], reps: int
    ) -> "RiskReport":
        type2 = dict(type2_by_alternative)
        worst = type1 + (max(type2.values()) if type2 else 0.0)
        estimates = [type1, *type2.values()]
        radius = max(
            1.96 * math.sqrt(p * (1.0 - p) / reps) for p in estimates
        ) if reps > 0 else float("nan")
        return RiskReport(type1, type2, worst, radius, reps)

    def to_dict(self) -> dict:
        return {
            "type1": self.type1,
            "type2_by_alternative": dict(self.type2_by_alternative),
            "worst_risk": self.worst_risk,
            "mc_radius": self.mc_radius,
            "reps": self.reps,
        }

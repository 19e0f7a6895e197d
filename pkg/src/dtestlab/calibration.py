"""Threshold calibration: exact binomial enumeration or seeded Monte Carlo.

The central statistics of the bit-based tests are discrete, so no
deterministic cutoff realizes an arbitrary level alpha.  A calibrated
threshold therefore carries three pieces: reject surely when the statistic
is >= kappa (kappa is the smallest support value whose null >=-probability
is at most the target), and reject with probability gamma when the statistic
equals `boundary`, the largest support value below kappa.  The extra
boundary rejections only ever lower the Type II error, and make the realized
Type I equal the target up to estimation noise.

Protocols with several sub-statistics (the split-budget T3) are calibrated
at per-subtest level 1 - (1-alpha)^(1/k); the subtest statistics are
independent under the null (sign bits see only sign(X), the count subtest
only |X| and fresh coins), so the OR-combination realizes alpha.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Mapping, Optional

import numpy as np
from scipy.special import gammaln

from .engine import collect_statistics
from .model import ProblemConfig
from .protocols import TestProtocol, t1_statistic
from .randomness import SeedNode

__all__ = [
    "Threshold",
    "ThresholdTable",
    "threshold_from_support",
    "calibrate_exact_t1",
    "calibrate_mc",
    "ensure_calibrated",
    "apply_thresholds",
]

_Z99 = 2.5758293035489004  # two-sided 99% normal quantile


@dataclass(frozen=True)
class Threshold:
    """Randomized rejection rule for one sub-statistic."""

    kappa: float
    boundary: float
    gamma: float
    level: float
    achieved: float
    method: str
    null_reps: int

    def decide(self, stat: float, tie_u: float) -> bool:
        return stat >= self.kappa or (stat == self.boundary and tie_u < self.gamma)


def threshold_from_support(
    values: np.ndarray,
    probs: np.ndarray,
    alpha: float,
    method: str,
    null_reps: int,
) -> Threshold:
    """Randomized level-alpha rule from a null support distribution.

    values/probs describe the null law of the statistic (probs need not be
    sorted; duplicate values are allowed and are merged).
    """
    if not (0.0 < alpha < 1.0):
        raise ValueError("alpha must lie in (0, 1)")
    values = np.asarray(values, dtype=np.float64)
    probs = np.asarray(probs, dtype=np.float64)
    uniq, inv = np.unique(values, return_inverse=True)
    mass = np.bincount(inv, weights=probs, minlength=uniq.size)
    # tail[i] = P(stat >= uniq[i])
    tail = np.cumsum(mass[::-1])[::-1]
    ok = tail <= alpha
    if ok.any():
        i = int(np.argmax(ok))  # smallest support value with tail prob <= alpha
        kappa = float(uniq[i])
        det = float(tail[i])
        if i == 0:
            return Threshold(kappa, -math.inf, 0.0, alpha, det, method, null_reps)
        boundary = float(uniq[i - 1])
        p_boundary = float(mass[i - 1])
    else:
        kappa = float(uniq[-1]) + 1.0
        det = 0.0
        boundary = float(uniq[-1])
        p_boundary = float(mass[-1])
    gamma = min(1.0, max(0.0, (alpha - det) / p_boundary)) if p_boundary > 0 else 0.0
    achieved = det + gamma * p_boundary
    return Threshold(kappa, boundary, gamma, alpha, achieved, method, null_reps)


def calibrate_exact_t1(m: int, alpha: float) -> Threshold:
    """Exact enumeration of the T1 statistic over Binomial(m, 1/2)."""
    if m < 1 or m > 10**6:
        raise ValueError("m must lie in [1, 1e6]")
    k = np.arange(m + 1, dtype=np.float64)
    logpmf = gammaln(m + 1) - gammaln(k + 1) - gammaln(m - k + 1) - m * math.log(2.0)
    return threshold_from_support(
        t1_statistic(k, m), np.exp(logpmf), alpha, "exact-enumeration", 0
    )


def _mc_thresholds(stats: np.ndarray, names, alpha: float, null_reps: int):
    alpha_sub = 1.0 - (1.0 - alpha) ** (1.0 / stats.shape[1])
    out = {}
    w = np.full(stats.shape[0], 1.0 / stats.shape[0])
    for i, name in enumerate(names):
        out[name] = threshold_from_support(
            stats[:, i], w, alpha_sub, "monte-carlo", null_reps
        )
    return out


def calibrate_mc(
    protocol: TestProtocol,
    cfg: ProblemConfig,
    alpha: float,
    null_reps: int,
    node: SeedNode,
    threads: int = 1,
) -> dict[str, Threshold]:
    """Simulate the full protocol under f = 0 and threshold each sub-statistic.

    The public coin, when the protocol uses one, is resampled every null
    replication, matching deployment.
    """
    if null_reps < 10**3:
        raise ValueError("null_reps must be at least 1000")
    stats, _ = collect_statistics(
        protocol, cfg, None, node.child("calibrate"), null_reps, threads, need_ties=False
    )
    return _mc_thresholds(stats, protocol.stat_names(cfg), alpha, null_reps)


def combined_level(thresholds: Mapping[str, Threshold]) -> float:
    """Null rejection probability of the OR of independent sub-rules."""
    keep = 1.0
    for t in thresholds.values():
        keep *= 1.0 - t.achieved
    return 1.0 - keep


def level_ci(thresholds: Mapping[str, Threshold]) -> tuple[float, float]:
    """99% binomial CI half-width bookkeeping around the achieved level."""
    p = combined_level(thresholds)
    reps = max((t.null_reps for t in thresholds.values()), default=0)
    if reps <= 0:
        return (p, p)
    half = _Z99 * math.sqrt(p * (1.0 - p) / reps)
    return (max(0.0, p - half), min(1.0, p + half))


def apply_thresholds(
    stats: np.ndarray,
    names,
    thresholds: Mapping[str, Threshold],
    ties: np.ndarray,
) -> np.ndarray:
    """Vector of OR-combined randomized decisions for (reps, n_stats) stats."""
    reject = np.zeros(stats.shape[0], dtype=bool)
    for i, name in enumerate(names):
        t = thresholds[name]
        col = stats[:, i]
        reject |= col >= t.kappa
        if t.gamma > 0:
            reject |= (col == t.boundary) & (ties[:, i] < t.gamma)
    return reject.astype(np.int64)


class ThresholdTable:
    """JSON-persisted map (protocol, config fingerprint, alpha) -> thresholds."""

    def __init__(self):
        self._entries: dict[str, dict] = {}

    @staticmethod
    def _key(protocol_name: str, cfg: ProblemConfig, alpha: float) -> str:
        return f"{protocol_name}|{cfg.fingerprint()}|alpha={alpha:g}"

    def get(self, protocol_name, cfg, alpha) -> Optional[dict[str, Threshold]]:
        entry = self._entries.get(self._key(protocol_name, cfg, alpha))
        if entry is None:
            return None
        return {k: Threshold(**v) for k, v in entry["thresholds"].items()}

    def put(self, protocol_name, cfg, alpha, thresholds: Mapping[str, Threshold]):
        self._entries[self._key(protocol_name, cfg, alpha)] = {
            "thresholds": {k: asdict(t) for k, t in thresholds.items()},
            "achieved_level": combined_level(thresholds),
        }

    def to_json(self) -> str:
        return json.dumps(self._entries, indent=2, sort_keys=True, allow_nan=True)

    @classmethod
    def from_json(cls, text: str) -> "ThresholdTable":
        table = cls()
        table._entries = json.loads(text)
        return table

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "ThresholdTable":
        with open(path) as fh:
            return cls.from_json(fh.read())

    def __len__(self):
        return len(self._entries)


def ensure_calibrated(
    table: ThresholdTable,
    protocol: TestProtocol,
    cfg: ProblemConfig,
    node: SeedNode,
    null_reps: int = 100_000,
    threads: int = 1,
    recalibrate: bool = False,
) -> dict[str, Threshold]:
    """Fetch thresholds from the table, computing them on a miss.

    T1 is calibrated by exact enumeration; the other protocols by null
    Monte Carlo at the configured replication count.
    """
    alpha = cfg.alpha
    if not recalibrate:
        hit = table.get(protocol.name, cfg, alpha)
        if hit is not None:
            return hit
    if protocol.name == "T1":
        thresholds = {"T1": calibrate_exact_t1(cfg.m, alpha)}
    else:
        thresholds = calibrate_mc(protocol, cfg, alpha, null_reps, node, threads)
    table.put(protocol.name, cfg, alpha, thresholds)
    return thresholds

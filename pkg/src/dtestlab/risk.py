"""Monte Carlo risk estimation, detection-threshold search, and rate sweeps."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .calibration import Threshold, apply_thresholds
from .engine import collect_statistics
from .model import ProblemConfig, RiskReport, Signal
from .nonparametric import theoretical_rate_finite
from .protocols import TestProtocol
from .randomness import SeedNode

__all__ = [
    "AlternativeFamily",
    "DEFAULT_FAMILY",
    "FLAT_ONLY",
    "make_alternative",
    "estimate_risk",
    "ThresholdSearch",
    "find_threshold",
    "SweepResult",
    "rate_sweep",
]


def _flat(cfg, rho, node):
    return Signal(np.full(cfg.d, rho / math.sqrt(cfg.d)))

def _spike(cfg, rho, node):
    v = np.zeros(cfg.d)
    v[0] = rho
    return Signal(v)

def _random_sphere(cfg, rho, node):
    g = node.normals(cfg.d)
    return Signal(rho * g / np.linalg.norm(g))

def _half_flat(cfg, rho, node):
    k = max(1, cfg.d // 2)
    v = np.zeros(cfg.d)
    v[:k] = rho / math.sqrt(k)
    return Signal(v)

_GENERATORS: dict[str, Callable] = {
    "Flat": _flat,
    "Spike": _spike,
    "RandomSphere": _random_sphere,
    "HalfFlat": _half_flat,
}


@dataclass(frozen=True)
class AlternativeFamily:
    """A finite stand-in for the supremum over the separation ball.

    The four stock members cover the extreme geometries: dense (Flat),
    sparse (Spike), generic (RandomSphere) and intermediate (HalfFlat).
    Every generated signal has norm exactly rho.
    """

    members: tuple[str, ...]

    def __post_init__(self):
        unknown = set(self.members) - set(_GENERATORS)
        if unknown:
            raise ValueError(f"unknown alternative members: {sorted(unknown)}")

    def generate(self, cfg: ProblemConfig, rho: float, node: SeedNode) -> dict[str, Signal]:
        out = {}
        for i, label in enumerate(self.members):
            out[label] = _GENERATORS[label](cfg, rho, node.child("signal", i))
        return out


DEFAULT_FAMILY = AlternativeFamily(("Flat", "Spike", "RandomSphere", "HalfFlat"))
FLAT_ONLY = AlternativeFamily(("Flat",))


def make_alternative(cfg: ProblemConfig, label: str, rho: float, node: SeedNode) -> Signal:
    return _GENERATORS[label](cfg, rho, node)


def _rejection_rate(protocol, cfg, signal, node, reps, thresholds, threads):
    stats, ties = collect_statistics(protocol, cfg, signal, node, reps, threads)
    names = protocol.stat_names(cfg)
    return float(apply_thresholds(stats, names, thresholds, ties).mean())


def estimate_risk(
    protocol: TestProtocol,
    cfg: ProblemConfig,
    family: AlternativeFamily,
    rho: float,
    reps: int,
    node: SeedNode,
    thresholds: Mapping[str, Threshold],
    threads: int = 1,
    type1: Optional[float] = None,
) -> RiskReport:
    """Estimate Type I, per-alternative Type II, and the worst-case risk.

    A precomputed type1 may be passed to amortize the null runs across
    repeated calls (the null law does not depend on rho).
    """
    if reps < 1:
        raise ValueError("reps must be >= 1")
    if type1 is None:
        type1 = _rejection_rate(
            protocol, cfg, None, node.child("null"), reps, thresholds, threads
        )
    type2 = {}
    signals = family.generate(cfg, rho, node.child("alts"))
    for label, signal in signals.items():
        power = _rejection_rate(
            protocol,
            cfg,
            signal.coeffs,
            node.child("alt-" + label),
            reps,
            thresholds,
            threads,
        )
        type2[label] = 1.0 - power
    return RiskReport.build(type1, type2, reps)


@dataclass
class ThresholdSearch:
    """Result of the empirical detection-threshold bisection."""

    rho_star_sq: float
    bracket_lo_sq: float
    bracket_hi_sq: float
    width_factor: float
    crossed: bool
    type1: float
    history: list[tuple[float, float, int]] = field(default_factory=list)
    message: str = ""

    def to_dict(self) -> dict:
        return {
            "rho_star_sq": self.rho_star_sq,
            "bracket_lo_sq": self.bracket_lo_sq,
            "bracket_hi_sq": self.bracket_hi_sq,
            "width_factor": self.width_factor,
            "crossed": self.crossed,
            "type1": self.type1,
            "history": self.history,
            "message": self.message,
        }


def find_threshold(
    protocol: TestProtocol,
    cfg: ProblemConfig,
    family: AlternativeFamily,
    target_risk: float,
    node: SeedNode,
    thresholds: Mapping[str, Threshold],
    threads: int = 1,
    coarse_reps: int = 600,
    fine_reps: int = 2400,
    type1_reps: int = 4000,
    max_steps: int = 14,
    span: float = 100.0,
) -> ThresholdSearch:
    """Bisect the signal strength where the worst-case risk crosses the target.

    The bracket starts at [rate/span, rate*span] around the constant-1
    theoretical rate (in rho^2).  Risk is estimated with coarse_reps until
    the bracket tightens to a factor of 4, then with fine_reps.
    """
    rate = theoretical_rate_finite(cfg.n, cfg.m, cfg.d, cfg.b, cfg.coin)
    lo_sq, hi_sq = rate / span, rate * span
    type1 = _rejection_rate(
        protocol, cfg, None, node.child("type1"), type1_reps, thresholds, threads
    )
    if not (type1 < target_risk < 1.0):
        return ThresholdSearch(
            math.nan, lo_sq, hi_sq, math.inf, False, type1,
            message=f"target risk {target_risk} not inside (type1={type1:.3f}, 1)",
        )
    history: list[tuple[float, float, int]] = []

    def worst_risk(rho_sq: float, reps: int, step: int) -> float:
        report = estimate_risk(
            protocol,
            cfg,
            family,
            math.sqrt(rho_sq),
            reps,
            node.child("bisect", step),
            thresholds,
            threads,
            type1=type1,
        )
        history.append((rho_sq, report.worst_risk, reps))
        return report.worst_risk

    risk_lo = worst_risk(lo_sq, coarse_reps, 0)
    risk_hi = worst_risk(hi_sq, coarse_reps, 1)
    if risk_lo < target_risk or risk_hi > target_risk:
        return ThresholdSearch(
            math.nan, lo_sq, hi_sq, math.inf, False, type1, history,
            message=(
                f"no crossing in bracket: risk({lo_sq:.3g})={risk_lo:.3f}, "
                f"risk({hi_sq:.3g})={risk_hi:.3f}, target={target_risk}"
            ),
        )
    for step in range(2, 2 + max_steps):
        mid_sq = math.sqrt(lo_sq * hi_sq)
        reps = fine_reps if hi_sq / lo_sq < 4.0 else coarse_reps
        r = worst_risk(mid_sq, reps, step)
        if r > target_risk:
            lo_sq = mid_sq
        else:
            hi_sq = mid_sq
        if hi_sq / lo_sq < 1.12:
            break
    return ThresholdSearch(
        math.sqrt(lo_sq * hi_sq), lo_sq, hi_sq, hi_sq / lo_sq, True, type1, history
    )


@dataclass
class SweepResult:
    """Log-log scaling of the empirical threshold against one parameter axis."""

    axis: str
    points: list[tuple[float, float, float]]  # (param, empirical rho*^2, theory rho^2)
    fitted_slope: float
    slope_ci: tuple[float, float]

    def to_dict(self) -> dict:
        return {
            "axis": self.axis,
            "points": self.points,
            "fitted_slope": self.fitted_slope,
            "slope_ci": list(self.slope_ci),
        }


def fit_loglog_slope(xs: Sequence[float], ys: Sequence[float]) -> tuple[float, tuple[float, float]]:
    lx = np.log(np.asarray(xs, dtype=np.float64))
    ly = np.log(np.asarray(ys, dtype=np.float64))
    n = lx.size
    coeffs, residuals, *_ = np.polyfit(lx, ly, 1, full=True)
    slope = float(coeffs[0])
    if n > 2 and residuals.size:
        sigma_sq = float(residuals[0]) / (n - 2)
        se = math.sqrt(sigma_sq / float(((lx - lx.mean()) ** 2).sum()))
    else:
        se = 0.0
    return slope, (slope - 1.96 * se, slope + 1.96 * se)


def rate_sweep(
    protocol: TestProtocol,
    cfg_template: ProblemConfig,
    axis: str,
    values: Sequence[int],
    target_risk: float,
    node: SeedNode,
    calibrate: Callable[[ProblemConfig], Mapping[str, Threshold]],
    family: AlternativeFamily = FLAT_ONLY,
    threads: int = 1,
    **search_kw,
) -> SweepResult:
    """find_threshold along one axis, with a log-log slope fit.

    calibrate maps each per-point configuration to its thresholds (the
    caller decides the caching policy).
    """
    if axis not in ("d", "m", "n", "b"):
        raise ValueError("axis must be one of d, m, n, b")
    if len(values) < 3:
        raise ValueError("a sweep needs at least 3 axis values")
    points = []
    for i, v in enumerate(sorted(values)):
        cfg = cfg_template.with_updates(**{axis: int(v)})
        thresholds = calibrate(cfg)
        search = find_threshold(
            protocol, cfg, family, target_risk,
            node.child("sweep", i), thresholds, threads, **search_kw,
        )
        if not search.crossed:
            raise RuntimeError(
                f"threshold search failed at {axis}={v}: {search.message}"
            )
        theory = theoretical_rate_finite(cfg.n, cfg.m, cfg.d, cfg.b, cfg.coin)
        points.append((float(v), search.rho_star_sq, theory))
    slope, ci = fit_loglog_slope([p[0] for p in points], [p[1] for p in points])
    return SweepResult(axis, points, slope, ci)

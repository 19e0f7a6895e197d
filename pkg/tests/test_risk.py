"""Risk estimation, alternative families, and the threshold bisection."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dtestlab.calibration import calibrate_exact_t1
from dtestlab.model import Coin, ProblemConfig
from dtestlab.nonparametric import theoretical_rate_finite
from dtestlab.protocols import get_protocol
from dtestlab.randomness import SeedTree
from dtestlab.risk import (
    DEFAULT_FAMILY,
    FLAT_ONLY,
    AlternativeFamily,
    estimate_risk,
    find_threshold,
    fit_loglog_slope,
    make_alternative,
)


def _cfg(**kw):
    base = dict(n=10_000, m=64, d=64, b=1, alpha=0.1, coin=Coin.PRIVATE)
    base.update(kw)
    return ProblemConfig(**base)


class TestAlternativeFamily:
    @given(st.integers(2, 128), st.floats(1e-6, 1e3))
    @settings(max_examples=60, deadline=None)
    def test_generated_norms_are_exact(self, d, rho):
        cfg = _cfg(d=d)
        node = SeedTree(1).child("sig")
        for label in DEFAULT_FAMILY.members:
            f = make_alternative(cfg, label, rho, node)
            assert f.l2_norm() == pytest.approx(rho, rel=1e-12)

    def test_unknown_member_rejected(self):
        with pytest.raises(ValueError):
            AlternativeFamily(("Flat", "Nope"))

    def test_random_sphere_is_seeded(self):
        cfg = _cfg(d=16)
        a = make_alternative(cfg, "RandomSphere", 1.0, SeedTree(2).child("s"))
        b = make_alternative(cfg, "RandomSphere", 1.0, SeedTree(2).child("s"))
        assert np.array_equal(a.coeffs, b.coeffs)


class TestEstimateRisk:
    def test_zero_rho_makes_alternative_the_null(self):
        cfg = _cfg(m=32, d=8)
        proto = get_protocol("T1")
        thr = {"T1": calibrate_exact_t1(cfg.m, cfg.alpha)}
        rep = estimate_risk(proto, cfg, FLAT_ONLY, 0.0, 4000, SeedTree(3).child("r"), thr)
        # with rho = 0 the "alternative" is the null: type2 = 1 - type1
        assert rep.type2_by_alternative["Flat"] == pytest.approx(
            1 - rep.type1, abs=3 * math.sqrt(0.25 / rep.reps) * 2
        )

    def test_huge_signal_is_always_detected(self):
        cfg = _cfg(m=32, d=8)
        proto = get_protocol("T1")
        thr = {"T1": calibrate_exact_t1(cfg.m, cfg.alpha)}
        rate = theoretical_rate_finite(cfg.n, cfg.m, cfg.d, cfg.b, cfg.coin)
        rep = estimate_risk(
            proto, cfg, DEFAULT_FAMILY, math.sqrt(1000 * rate), 2000,
            SeedTree(4).child("r"), thr,
        )
        assert max(rep.type2_by_alternative.values()) <= 0.05

    def test_calibrated_type1_within_three_sigma(self):
        cfg = _cfg(m=64, d=16)
        proto = get_protocol("T1")
        thr = {"T1": calibrate_exact_t1(cfg.m, cfg.alpha)}
        rep = estimate_risk(proto, cfg, FLAT_ONLY, 0.5, 10_000, SeedTree(5).child("r"), thr)
        assert abs(rep.type1 - 0.1) < 0.01

    def test_report_identity_and_radius(self):
        cfg = _cfg(m=16, d=4)
        proto = get_protocol("T1")
        thr = {"T1": calibrate_exact_t1(cfg.m, cfg.alpha)}
        rep = estimate_risk(proto, cfg, DEFAULT_FAMILY, 0.3, 1500, SeedTree(6).child("r"), thr)
        assert rep.worst_risk == rep.type1 + max(rep.type2_by_alternative.values())
        assert rep.reps == 1500


class TestFindThreshold:
    def _search(self, seed, **kw):
        cfg = _cfg()
        proto = get_protocol("T1")
        thr = {"T1": calibrate_exact_t1(cfg.m, cfg.alpha)}
        defaults = dict(coarse_reps=400, fine_reps=1600, type1_reps=2000, max_steps=12)
        defaults.update(kw)
        return cfg, find_threshold(
            proto, cfg, FLAT_ONLY, 0.5, SeedTree(seed).child("ft"), thr, **defaults
        )

    def test_bracket_containment(self):
        # rho*^2 should land within [0.1, 100] x sqrt(md)/n
        cfg, sr = self._search(7)
        assert sr.crossed
        scale = math.sqrt(cfg.m * cfg.d) / cfg.n
        assert 0.1 * scale <= sr.rho_star_sq <= 100 * scale

    def test_repeatable_with_same_seed(self):
        _, a = self._search(8)
        _, b = self._search(8)
        assert a.rho_star_sq == b.rho_star_sq
        assert a.history == b.history

    def test_risk_monotone_along_history(self):
        # risk estimates ordered in rho within Monte Carlo slack
        _, sr = self._search(9)
        pts = sorted(sr.history)
        for (r1, risk1, n1), (r2, risk2, n2) in zip(pts, pts[1:]):
            slack = 3 * (math.sqrt(0.25 / n1) + math.sqrt(0.25 / n2))
            assert risk2 <= risk1 + slack

    def test_no_crossing_reported_not_fatal(self):
        # a target below the Type I level can never be reached by any rho
        cfg = _cfg()
        proto = get_protocol("T1")
        thr = {"T1": calibrate_exact_t1(cfg.m, cfg.alpha)}
        sr = find_threshold(
            proto, cfg, FLAT_ONLY, 0.05, SeedTree(10).child("ft"), thr,
            coarse_reps=400, fine_reps=400, type1_reps=1000,
        )
        assert not sr.crossed
        assert "not inside" in sr.message or "no crossing" in sr.message


class TestRateSweep:
    def test_m_axis_slope_is_half(self):
        # the one-bit vote threshold scales like sqrt(m d)/n in m as well
        from dtestlab.risk import rate_sweep

        proto = get_protocol("T1")
        cfg = _cfg(m=64, d=64, b=1, n=10_000)
        root = SeedTree(11)

        def calibrate(point_cfg):
            return {"T1": calibrate_exact_t1(point_cfg.m, point_cfg.alpha)}

        sweep = rate_sweep(
            proto, cfg, "m", [64, 256, 1024], 0.5, root.child("sm"), calibrate,
            coarse_reps=400, fine_reps=1600, type1_reps=2500,
        )
        assert abs(sweep.fitted_slope - 0.5) <= 0.15
        # points also sit within a broad constant band of the theory rate
        for v, emp, theory in sweep.points:
            assert 0.1 * theory <= emp <= 100 * theory


class TestSlopeFit:
    def test_exact_power_law(self):
        xs = [16, 64, 256, 1024]
        ys = [3.0 * x**0.5 for x in xs]
        slope, ci = fit_loglog_slope(xs, ys)
        assert slope == pytest.approx(0.5, abs=1e-12)
        assert ci[0] <= slope <= ci[1]
        assert ci[1] - ci[0] < 1e-6  # exact fit leaves no slope uncertainty

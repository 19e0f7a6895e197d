"""Leveled signals, Sobolev geometry, rate formulas, and the reduction."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dtestlab.calibration import ThresholdTable
from dtestlab.model import Coin, ProblemConfig
from dtestlab.nonparametric import (
    InfeasibleAlternativeError,
    LeveledSignal,
    SobolevBall,
    make_sobolev_alternative,
    nu,
    run_nonparam_test,
    sample_sequence_observations,
    theoretical_rate_finite,
    theoretical_rate_nonparam,
    truncation_level,
)
from dtestlab.randomness import SeedTree


class TestTruncationLevel:
    def test_exact_powers(self):
        assert truncation_level(1.0, 2.0**-8) == 8
        assert truncation_level(2.0, 2.0**-8) == 4

    def test_floor_and_clamp(self):
        assert truncation_level(0.5, 0.9) == 1
        assert truncation_level(3.0, 0.5) == 1  # floor gives 0, clamped to 1
        assert truncation_level(1.0, 2.0) == 1  # rho >= 1 short-circuits


class TestFiniteRate:
    def test_public_examples(self):
        assert theoretical_rate_finite(100, 9, 16, 16, Coin.PUBLIC) == pytest.approx(0.04)
        assert theoretical_rate_finite(100, 1024, 16, 1, Coin.PUBLIC) == pytest.approx(0.16)

    def test_private_example(self):
        assert theoretical_rate_finite(100, 1024, 16, 1, Coin.PRIVATE) == pytest.approx(0.64)

    def test_excess_budget_clamped(self):
        # b > d behaves exactly like b = d
        assert theoretical_rate_finite(100, 9, 16, 64, Coin.PUBLIC) == theoretical_rate_finite(
            100, 9, 16, 16, Coin.PUBLIC
        )


class TestNonparamRate:
    def test_high_budget_regime(self):
        ball = SobolevBall(1.0, 2.0)
        n = 2**20
        b = int(n ** (1 / 2.5)) + 1
        assert theoretical_rate_nonparam(n, 4, b, ball, Coin.PUBLIC) == pytest.approx(2.0**-16)

    def test_m1_low_regime_matches_nondistributed(self):
        # with m = 1 the low-budget expression reduces to the non-distributed rate
        ball = SobolevBall(0.75, 1.0)
        n = 10_000
        low = (n / math.sqrt(1)) ** (-2 * 0.75 / (2 * 0.75 + 0.5))
        # force the low regime: b below the m=1 boundary cannot happen (bound >= 1
        # means b >= 1 always reaches intermediate), so check the formula directly
        assert low == pytest.approx(n ** (-2 * 0.75 / (2 * 0.75 + 0.5)))

    def test_intermediate_regime_example(self):
        # s=1, n=2^20, m=2^12, b=1: the intermediate case applies
        ball = SobolevBall(1.0, 2.0)
        n, m, b = 2**20, 2**12, 1
        boundary = n ** (1 / 2.5) / m ** (2.4 / 2.0 / 1.25)  # n^{0.4} / m^{(2s+1)/(2s+1/2)}
        assert boundary < 1 <= b
        rate = theoretical_rate_nonparam(n, m, b, ball, Coin.PUBLIC)
        assert rate == pytest.approx((math.sqrt(b) * n) ** (-2 / 3))

    def test_regime_continuity_within_factor_four(self):
        # adjacent case formulas agree up to a factor 4 at the boundaries
        for s in (0.6, 1.0, 1.7):
            ball = SobolevBall(s, 1.0)
            for n in (2**14, 2**18):
                for m in (16, 256):
                    for coin in (Coin.PUBLIC, Coin.PRIVATE):
                        hi = n ** (1.0 / (2 * s + 0.5))
                        expo = (2 * s + 1.0) if coin is Coin.PUBLIC else (s + 0.75)
                        lo = hi / m ** (expo / (2 * s + 0.5))
                        for boundary in (hi, lo):
                            b_at = max(1, int(round(boundary)))
                            if b_at <= 1:
                                continue
                            r_above = theoretical_rate_nonparam(n, m, b_at, ball, coin)
                            r_below = theoretical_rate_nonparam(n, m, b_at - 1, ball, coin)
                            ratio = max(r_above, r_below) / min(r_above, r_below)
                            assert ratio <= 4.0

    def test_monotone_over_random_tuples(self):
        rng = np.random.default_rng(123)
        for _ in range(100):
            s = float(rng.uniform(0.5, 2.5))
            ball = SobolevBall(s, 1.0)
            n = int(rng.integers(2**10, 2**22))
            m = int(rng.integers(1, 4096))
            b = int(rng.integers(1, 2**12))
            coin = Coin.PUBLIC if rng.random() < 0.5 else Coin.PRIVATE
            base = theoretical_rate_nonparam(n, m, b, ball, coin)
            assert theoretical_rate_nonparam(n, m, b + 7, ball, coin) <= base + 1e-15
            assert theoretical_rate_nonparam(int(n * 1.5), m, b, ball, coin) <= base + 1e-15
            assert theoretical_rate_nonparam(n, m + 9, b, ball, coin) >= base - 1e-15


class TestLeveledSignal:
    def test_level_shapes_enforced(self):
        with pytest.raises(ValueError):
            LeveledSignal((np.zeros(2),))  # level 0 must hold exactly 1 entry

    @given(st.integers(0, 5))
    @settings(max_examples=20, deadline=None)
    def test_flatten_is_plancherel(self, L):
        rng = np.random.default_rng(L)
        f = LeveledSignal(tuple(rng.standard_normal(1 << l) for l in range(L + 1)))
        flat = f.flatten()
        assert flat.size == nu(L)
        assert f.l2_norm_sq() == pytest.approx(float((flat**2).sum()), rel=1e-12)

    def test_sobolev_norm_matches_direct_sum(self):
        rng = np.random.default_rng(7)
        levels = tuple(rng.standard_normal(1 << l) for l in range(4))
        f = LeveledSignal(levels)
        s = 0.8
        direct = sum(2 ** (2 * l * s) * float((a**2).sum()) for l, a in enumerate(levels))
        assert f.sobolev_norm_sq(s) == pytest.approx(direct, rel=1e-12)

    def test_flat_roundtrip(self):
        f = LeveledSignal((np.array([1.0]), np.array([2.0, 3.0])))
        back = LeveledSignal.from_flat(f.flatten())
        assert np.array_equal(back.flatten(), f.flatten())
        with pytest.raises(ValueError):
            LeveledSignal.from_flat(np.zeros(4))  # not of length 2^(L+1)-1


class TestSequenceSampling:
    def test_dimension_is_nu(self):
        cfg = ProblemConfig(n=100, m=4, d=1, b=1, alpha=0.1)
        f = LeveledSignal.zeros(1)
        data = sample_sequence_observations(cfg, f, 1, SeedTree(1).child("o"))
        assert data.d == 3  # nu(1) = 3

    def test_null_noise_scale(self):
        cfg = ProblemConfig(n=100, m=25, d=1, b=1, alpha=0.1)
        f = LeveledSignal.zeros(5)
        root = SeedTree(2)
        total = count = 0
        for r in range(100):
            data = sample_sequence_observations(cfg, f, 5, root.child("r", r))
            total += float((data.observations**2).sum())
            count += data.observations.size
        assert total / count == pytest.approx(0.25, rel=0.03)

    def test_level_shortage_error(self):
        cfg = ProblemConfig(n=100, m=4, d=1, b=1, alpha=0.1)
        with pytest.raises(ValueError, match="level"):
            sample_sequence_observations(cfg, LeveledSignal.zeros(1), 3, SeedTree(1))


class TestSobolevAlternatives:
    def test_low_frequency(self):
        ball = SobolevBall(1.0, 2.0)
        f = make_sobolev_alternative(ball, 0.5, "LowFrequency")
        assert f.levels[0][0] == 0.5
        assert f.sobolev_norm(1.0) == pytest.approx(0.5)

    def test_boundary_flat_geometry(self):
        ball = SobolevBall(1.0, 4.0)
        rho = 2.0**-3
        f = make_sobolev_alternative(ball, rho, "BoundaryFlat")
        L = truncation_level(1.0, rho)
        assert f.max_level == L
        np.testing.assert_allclose(f.levels[L], rho / 2 ** (L / 2))
        assert f.sobolev_norm(1.0) == pytest.approx(2 ** (L * 1.0) * rho)
        assert f.l2_norm() == pytest.approx(rho, rel=1e-12)

    def test_random_direction_feasible_and_exact(self):
        ball = SobolevBall(1.0, 3.0)
        f = make_sobolev_alternative(ball, 0.1, "RandomDirection", SeedTree(3).child("s"))
        assert f.l2_norm() == pytest.approx(0.1, rel=1e-12)
        assert f.sobolev_norm(ball.s) <= ball.R

    def test_infeasible_combination_rejected(self):
        with pytest.raises(InfeasibleAlternativeError):
            make_sobolev_alternative(SobolevBall(1.0, 0.05), 0.04, "BoundaryFlat")

    def test_projection_tail_bound(self):
        # || f - f^L ||^2 <= R^2 2^{-2Ls} for every generated alternative
        ball = SobolevBall(0.8, 2.0)
        for kind in ("BoundaryFlat", "LowFrequency", "RandomDirection"):
            f = make_sobolev_alternative(ball, 0.07, kind, SeedTree(4).child(kind))
            for L in range(1, f.max_level + 2):
                assert f.tail_mass_sq(L) <= ball.R**2 * 2.0 ** (-2 * L * ball.s) + 1e-15


class TestRunNonparamTest:
    def test_null_level_near_alpha(self):
        cfg = ProblemConfig(n=2**14, m=32, d=1, b=4, alpha=0.1, coin=Coin.PRIVATE)
        ball = SobolevBall(1.0, 2.0)
        rate = theoretical_rate_nonparam(cfg.n, cfg.m, cfg.b, ball, cfg.coin)
        rho = math.sqrt(30 * rate)
        table = ThresholdTable()
        root = SeedTree(5)
        reps = 400
        hits = sum(
            run_nonparam_test(cfg, ball, rho, None, root.child("rep", r), table, null_reps=20_000)
            for r in range(reps)
        )
        assert hits / reps < 0.1 + 3 * math.sqrt(0.1 * 0.9 / reps)

    def test_strong_signal_detected(self):
        cfg = ProblemConfig(n=2**14, m=32, d=1, b=4, alpha=0.1, coin=Coin.PRIVATE)
        ball = SobolevBall(1.0, 2.0)
        rate = theoretical_rate_nonparam(cfg.n, cfg.m, cfg.b, ball, cfg.coin)
        rho = math.sqrt(30 * rate)
        f = make_sobolev_alternative(ball, rho, "BoundaryFlat")
        table = ThresholdTable()
        root = SeedTree(6)
        reps = 200
        hits = sum(
            run_nonparam_test(cfg, ball, rho, f, root.child("rep", r), table, null_reps=20_000)
            for r in range(reps)
        )
        assert hits / reps >= 0.7

"""Seed-tree determinism, stream independence, noise scale, Haar sampling."""

import math

import numpy as np
import pytest

from dtestlab.model import ProblemConfig, Signal
from dtestlab.randomness import (
    SeedTree,
    bernoulli,
    haar_frame,
    haar_rotation,
    sample_observations,
)


class TestSeedTree:
    def test_child_is_pure(self):
        a = SeedTree(123).child("obs", 5).normals(8)
        b = SeedTree(123).child("obs", 5).normals(8)
        assert np.array_equal(a, b)

    def test_distinct_paths_distinct_streams(self):
        root = SeedTree(123)
        a = root.child("obs", 0).normals(8)
        b = root.child("obs", 1).normals(8)
        c = root.child("coin", 0).normals(8)
        assert not np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_distinct_seeds_distinct_streams(self):
        a = SeedTree(1).child("x").uniforms(16)
        b = SeedTree(2).child("x").uniforms(16)
        assert not np.array_equal(a, b)

    def test_cross_correlation_of_sibling_streams(self):
        root = SeedTree(99)
        n = 200_000
        x = root.child("a").normals(n)
        y = root.child("b").normals(n)
        corr = float(np.dot(x, y) / n)
        assert abs(corr) < 4.0 / math.sqrt(n)

    def test_block_prefix_addressing(self):
        # row j of a node's (m, d) block must not depend on m beyond j,
        # so a machine's stream can be regenerated from a prefix draw
        node = SeedTree(7).child("obs")
        full = node.normals((4, 3))
        prefix = node.normals((2, 3))
        assert np.array_equal(full[:2], prefix)

    def test_master_seed_range_checked(self):
        with pytest.raises(ValueError):
            SeedTree(-1)
        with pytest.raises(ValueError):
            SeedTree(2**64)


class TestBernoulli:
    def test_degenerate_probabilities(self):
        root = SeedTree(5)
        assert all(bernoulli(0.0, root.child("z", i)) == 0 for i in range(50))
        assert all(bernoulli(1.0, root.child("o", i)) == 1 for i in range(50))

    def test_frequency_matches_p(self):
        root = SeedTree(6)
        n = 20_000
        hits = sum(bernoulli(0.3, root.child("b", i)) for i in range(n))
        se = math.sqrt(0.3 * 0.7 / n)
        assert abs(hits / n - 0.3) < 3 * se

    def test_rejects_bad_p(self):
        with pytest.raises(ValueError):
            bernoulli(1.5, SeedTree(1))


class TestSampleObservations:
    def test_zero_signal_is_centered(self):
        cfg = ProblemConfig(n=64, m=64, d=16, b=1, alpha=0.1)
        reps = 400
        root = SeedTree(11)
        total = np.zeros(16)
        for r in range(reps):
            data = sample_observations(cfg, Signal.zeros(16), root.child("rep", r))
            total += data.observations.mean(axis=0)
        mean = total / reps
        # per-coordinate SE of the grand mean is 1/sqrt(reps * m)
        assert np.abs(mean).max() < 4.0 / math.sqrt(reps * cfg.m)

    def test_mean_recovers_signal(self):
        cfg = ProblemConfig(n=10_000, m=100, d=4, b=1, alpha=0.1)
        f = Signal(np.array([5.0, 0.0, 0.0, 0.0]))
        data = sample_observations(cfg, f, SeedTree(3).child("obs"))
        se = cfg.noise_sd / math.sqrt(cfg.m)
        assert data.observations[:, 0].mean() == pytest.approx(5.0, abs=4 * se)

    def test_noise_variance_within_one_percent(self):
        # million-draw check of the sqrt(m/n) noise scale at m/n = 0.25
        cfg = ProblemConfig(n=100, m=25, d=100, b=1, alpha=0.1)
        root = SeedTree(17)
        sq_sum = 0.0
        count = 0
        for r in range(400):
            data = sample_observations(cfg, Signal.zeros(100), root.child("rep", r))
            sq_sum += float((data.observations**2).sum())
            count += data.observations.size
        assert count == 1_000_000
        var = sq_sum / count
        assert abs(var - 0.25) < 0.01 * 0.25

    def test_dimension_mismatch_rejected(self):
        cfg = ProblemConfig(n=10, m=2, d=4, b=1, alpha=0.1)
        with pytest.raises(ValueError, match="length"):
            sample_observations(cfg, Signal.zeros(3), SeedTree(1))


class TestHaar:
    def test_d1_is_random_sign(self):
        root = SeedTree(21)
        draws = [float(haar_rotation(1, root.child("r", i)).entries[0, 0]) for i in range(4000)]
        assert set(np.round(draws, 12)) <= {-1.0, 1.0}
        freq = np.mean([v > 0 for v in draws])
        assert abs(freq - 0.5) < 3 * math.sqrt(0.25 / len(draws))

    @pytest.mark.parametrize("d", [2, 8, 33])
    def test_orthogonality_defect(self, d):
        u = haar_rotation(d, SeedTree(4).child("u", d))
        assert u.orthogonality_defect() < 1e-10

    def test_sphere_moments(self):
        # for Haar U and unit v, (Uv)_1 has mean 0 and second moment 1/d
        root = SeedTree(9)
        d, reps = 4, 30_000
        v = np.array([1.0, 0.0, 0.0, 0.0])
        first = np.empty(reps)
        for i in range(reps):
            u = haar_rotation(d, root.child("u", i))
            first[i] = (u.entries @ v)[0]
        assert abs(first.mean()) < 4.0 / math.sqrt(reps * d)
        second = (first**2).mean()
        se = (first**2).std() / math.sqrt(reps)
        assert abs(second - 0.25) < 4 * se

    def test_frame_rows_orthonormal(self):
        fr = haar_frame(16, 3, SeedTree(8).child("f"))
        gram = fr.frame @ fr.frame.T
        assert np.abs(gram - np.eye(3)).max() < 1e-10

    def test_frame_full_is_square_orthogonal(self):
        fr = haar_frame(6, 6, SeedTree(8).child("g"))
        assert np.abs(fr.frame @ fr.frame.T - np.eye(6)).max() < 1e-10

    def test_rejects_bad_dims(self):
        with pytest.raises(ValueError):
            haar_rotation(0, SeedTree(1))
        with pytest.raises(ValueError):
            haar_frame(4, 5, SeedTree(1))

"""Conditional-mean matrix estimation and the data-processing bounds."""

import math

import numpy as np
import pytest

from dtestlab.infodiag import (
    applicable_kernels,
    check_dpi,
    estimate_xi,
    kernel_names,
    make_kernel,
)
from dtestlab.model import Coin, ProblemConfig
from dtestlab.randomness import SeedTree


def _cfg(**kw):
    base = dict(n=100, m=4, d=1, b=1, alpha=0.1, coin=Coin.PRIVATE)
    base.update(kw)
    return ProblemConfig(**base)


class TestEstimateXi:
    def test_sign_kernel_half_normal_trace(self):
        # E[X | sign] = +- sqrt(m/n) sqrt(2/pi), so (n/m) tr(Xi) = 2/pi
        cfg = _cfg()
        est = estimate_xi(make_kernel("sign", cfg, 1), cfg, 400_000, SeedTree(1).child("x"))
        assert est.trace * cfg.n / cfg.m == pytest.approx(2 / math.pi, abs=0.02)

    def test_constant_kernel_is_null(self):
        cfg = _cfg(d=2)
        est = estimate_xi(make_kernel("constant", cfg, 1), cfg, 100_000, SeedTree(2).child("x"))
        assert est.trace == pytest.approx(0.0, abs=1e-3 * cfg.m / cfg.n)

    def test_quantizer_refines_toward_full_covariance(self):
        # finer quantization recovers more of the m/n variance from below
        # (the plug-in estimate itself carries a small upward bias, so the
        # ceiling check gets Monte Carlo slack)
        cfg = _cfg()
        traces, ses = [], []
        for b in (1, 2, 4, 6):
            est = estimate_xi(make_kernel("quantizer", cfg, b), cfg, 200_000, SeedTree(3).child("q", b))
            traces.append(est.trace)
            ses.append(est.trace_se)
        assert all(t2 > t1 for t1, t2 in zip(traces, traces[1:]))
        assert traces[-1] <= cfg.m / cfg.n * cfg.d + 5 * ses[-1] + 1e-4
        assert traces[-1] > 0.9 * cfg.m / cfg.n * cfg.d

    def test_symmetric_psd(self):
        cfg = _cfg(d=4, m=8, b=4)
        est = estimate_xi(make_kernel("sign", cfg, 4), cfg, 100_000, SeedTree(4).child("x"))
        assert est.symmetry_defect() < 1e-8
        assert np.linalg.eigvalsh(est.matrix).min() > -1e-8

    def test_determinism(self):
        cfg = _cfg()
        a = estimate_xi(make_kernel("sign", cfg, 1), cfg, 50_000, SeedTree(5).child("x"))
        b = estimate_xi(make_kernel("sign", cfg, 1), cfg, 50_000, SeedTree(5).child("x"))
        assert np.array_equal(a.matrix, b.matrix)

    def test_oversized_alphabet_refused(self):
        cfg = _cfg(d=32, b=17)
        with pytest.raises(ValueError, match="too large"):
            estimate_xi(make_kernel("sign", cfg, 17), cfg, 1000, SeedTree(6))


class TestCheckDpi:
    def test_sign_kernel_passes_both_bounds(self):
        cfg = _cfg()
        est = estimate_xi(make_kernel("sign", cfg, 1), cfg, 200_000, SeedTree(7).child("x"))
        report = check_dpi(est, cfg)
        assert report.ok
        # d=1 sign kernel: trace bound is min(2 ln2, 1) * m^2/n = m^2/n here
        assert report.trace_bound == pytest.approx(cfg.m**2 / cfg.n)

    def test_two_bit_quantizer_bound(self):
        cfg = _cfg()
        est = estimate_xi(make_kernel("quantizer", cfg, 2), cfg, 200_000, SeedTree(8).child("x"))
        # per-machine trace obeys the entropy bound 2 ln2 * (m/n) * b
        assert est.trace <= 2 * math.log(2) * (cfg.m / cfg.n) * 2 + 5 * est.trace_se

    def test_constant_kernel_trivially_passes(self):
        cfg = _cfg(d=2)
        est = estimate_xi(make_kernel("constant", cfg, 1), cfg, 50_000, SeedTree(9).child("x"))
        assert check_dpi(est, cfg).ok

    @pytest.mark.parametrize("d", [1, 2, 4])
    @pytest.mark.parametrize("b", [1, 2, 4])
    def test_all_kernels_pass_small_grid(self, d, b):
        # smaller-sample version of the acceptance sweep
        cfg = _cfg(d=d, b=b, m=4, n=64)
        for kernel in applicable_kernels(cfg, b):
            est = estimate_xi(kernel, cfg, 100_000, SeedTree(10).child(kernel.name, d * 10 + b))
            report = check_dpi(est, cfg)
            assert report.ok, f"{kernel.name} failed DPI at d={d}, b={b}: {report}"

    def test_report_serializes(self):
        cfg = _cfg()
        est = estimate_xi(make_kernel("sign", cfg, 1), cfg, 50_000, SeedTree(11).child("x"))
        d = check_dpi(est, cfg).to_dict()
        assert set(d) >= {"kernel", "trace_value", "trace_bound", "ok"}


class TestKernelRegistry:
    def test_names_stable(self):
        assert set(kernel_names()) == {
            "sign", "constant", "quantizer", "t1", "t2", "t31", "t32"
        }

    def test_applicability_filters(self):
        cfg = _cfg(d=4, b=1, m=2)  # m * b < d: t31 unusable; t32 needs C >= 1
        names = {k.name for k in applicable_kernels(cfg, 1)}
        assert "t31" not in names
        assert "t32" not in names
        assert "sign" in names

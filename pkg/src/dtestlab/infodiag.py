"""Empirical data-processing diagnostics for transcript kernels.

For a b-bit encode kernel, the matrix Xi = sum_y p_y mu_y mu_y^T (mu_y the
null conditional mean of the observation given transcript y) measures how
much of the observation's covariance survives compression.  Two bounds are
checked by Monte Carlo on enumerable alphabets: the per-machine spectral
bound lambda_max(Xi_j) <= m/n, and the aggregate trace bound
Tr(m * Xi_j) <= min(2 ln2 * b/d, 1) * m^2 d / n.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .model import ProblemConfig
from .protocols import build_partition, t3_budgets, t32_replicates
from .randomness import SeedNode, haar_frame
from .stats import chi2_cdf

__all__ = [
    "XiEstimate",
    "DpiReport",
    "TranscriptKernel",
    "make_kernel",
    "kernel_names",
    "applicable_kernels",
    "estimate_xi",
    "check_dpi",
]

MAX_ALPHABET_BITS = 16


@dataclass(frozen=True)
class TranscriptKernel:
    """A per-machine encode behavior with an enumerable output alphabet."""

    name: str
    bits: int
    encode: Callable  # (cfg, X (N, d), node) -> integer codes (N,)


def _sign_kernel(cfg, b):
    k = min(b, cfg.d)

    def encode(cfg, x, node):
        bits = (x[:, :k] > 0).astype(np.int64)
        return bits @ (1 << np.arange(k - 1, -1, -1, dtype=np.int64))

    return TranscriptKernel("sign", k, encode)


def _constant_kernel(cfg, b):
    def encode(cfg, x, node):
        return np.zeros(len(x), dtype=np.int64)

    return TranscriptKernel("constant", 1, encode)


def _quantizer_kernel(cfg, b):
    # uniform quantizer of coordinate 1 over +-3 noise sd, b bits
    levels = 1 << b

    def encode(cfg, x, node):
        lo, hi = -3.0 * cfg.noise_sd, 3.0 * cfg.noise_sd
        q = np.floor((np.clip(x[:, 0], lo, hi - 1e-12) - lo) / (hi - lo) * levels)
        return np.clip(q, 0, levels - 1).astype(np.int64)

    return TranscriptKernel("quantizer", b, encode)


def _t1_kernel(cfg, b):
    def encode(cfg, x, node):
        s = (cfg.n / cfg.m) * (x * x).sum(axis=1)
        p = chi2_cdf(cfg.d, s)
        u = node.child("t1u").uniforms(len(x))
        return (u < p).astype(np.int64)

    return TranscriptKernel("t1", 1, encode)


def _t2_kernel(cfg, b):
    k = min(b, cfg.d)

    def encode(cfg, x, node):
        # the diagnostic conditions on one fixed coin draw (Xi is per-u)
        coin = haar_frame(cfg.d, k, node.child("fixed-coin"))
        bits = ((x @ coin.frame.T) > 0).astype(np.int64)
        return bits @ (1 << np.arange(k - 1, -1, -1, dtype=np.int64))

    return TranscriptKernel("t2", k, encode)


def _t31_kernel(cfg, b):
    # machine 1's sign bits under the T3 sign-subtest partition
    b_sign, _, _ = t3_budgets(cfg)
    plan = build_partition(cfg.m, cfg.d, b_sign)
    coords = plan.coords_of(0)

    def encode(cfg, x, node):
        bits = (x[:, coords] > 0).astype(np.int64)
        return bits @ (1 << np.arange(len(coords) - 1, -1, -1, dtype=np.int64))

    return TranscriptKernel("t31", len(coords), encode)


def _t32_kernel(cfg, b):
    c_reps = t32_replicates(cfg.d, b)
    if c_reps < 1:
        raise ValueError(f"budget {b} too small for the count kernel at d={cfg.d}")
    width = max(1, (c_reps * cfg.d).bit_length())

    def encode(cfg, x, node):
        p = chi2_cdf(1, (cfg.n / cfg.m) * x * x)  # (N, d)
        u = node.child("t32u").uniforms((c_reps,) + x.shape)
        return (u < p[None, :, :]).sum(axis=(0, 2)).astype(np.int64)

    return TranscriptKernel("t32", width, encode)


_KERNELS = {
    "sign": _sign_kernel,
    "constant": _constant_kernel,
    "quantizer": _quantizer_kernel,
    "t1": _t1_kernel,
    "t2": _t2_kernel,
    "t31": _t31_kernel,
    "t32": _t32_kernel,
}


def kernel_names() -> tuple[str, ...]:
    return tuple(_KERNELS)


def make_kernel(name: str, cfg: ProblemConfig, b: int) -> TranscriptKernel:
    return _KERNELS[name](cfg, b)


def applicable_kernels(cfg: ProblemConfig, b: int) -> list[TranscriptKernel]:
    """Every implemented kernel that is well-defined at this (cfg, b)."""
    out = []
    for name, maker in _KERNELS.items():
        if name == "t31" and cfg.m * min(b, cfg.d) < cfg.d:
            continue
        if name == "t32" and t32_replicates(cfg.d, b) < 1:
            continue
        if name == "t2" and cfg.m < 1:
            continue
        out.append(maker(cfg, b))
    return out


@dataclass(frozen=True, eq=False)
class XiEstimate:
    """Monte Carlo estimate of the per-machine conditional-mean matrix."""

    kernel: str
    bits: int
    matrix: np.ndarray       # per-machine Xi_j, (d, d)
    trace: float             # per-machine trace
    trace_se: float          # batch-means standard error of the trace
    lambda_max: float
    lambda_max_se: float
    m_machines: int
    mc_samples: int
    empty_groups: int

    @property
    def aggregate_trace(self) -> float:
        """Trace of the machine-summed matrix (identical kernels)."""
        return self.m_machines * self.trace

    def symmetry_defect(self) -> float:
        return float(np.abs(self.matrix - self.matrix.T).max())


def estimate_xi(
    kernel: TranscriptKernel,
    cfg: ProblemConfig,
    mc_samples: int,
    node: SeedNode,
    batches: int = 20,
) -> XiEstimate:
    """Group null samples by realized transcript; Xi = sum_y p_y mu_y mu_y^T.

    Standard errors come from batch means over `batches` equal shards.
    """
    if kernel.bits > MAX_ALPHABET_BITS:
        raise ValueError(
            f"alphabet of 2^{kernel.bits} values is too large to enumerate"
        )
    n_codes = 1 << kernel.bits
    d = cfg.d
    per = mc_samples // batches
    if per < 1:
        raise ValueError("mc_samples must be at least `batches`")
    traces = np.empty(batches)
    lmaxes = np.empty(batches)
    mats = np.zeros((batches, d, d))
    seen = np.zeros(n_codes, dtype=bool)
    for bi in range(batches):
        bnode = node.child("batch", bi)
        x = cfg.noise_sd * bnode.child("obs").normals((per, d))
        codes = np.asarray(kernel.encode(cfg, x, bnode), dtype=np.int64)
        if codes.min() < 0 or codes.max() >= n_codes:
            raise ValueError("kernel emitted codes outside its declared alphabet")
        counts = np.bincount(codes, minlength=n_codes)
        seen |= counts > 0
        sums = np.zeros((n_codes, d))
        np.add.at(sums, codes, x)
        nz = counts > 0
        mu = sums[nz] / counts[nz][:, None]
        w = counts[nz] / per
        xi = (mu * w[:, None]).T @ mu
        xi = 0.5 * (xi + xi.T)
        mats[bi] = xi
        traces[bi] = np.trace(xi)
        lmaxes[bi] = np.linalg.eigvalsh(xi)[-1]
    xi_full = mats.mean(axis=0)
    return XiEstimate(
        kernel=kernel.name,
        bits=kernel.bits,
        matrix=xi_full,
        trace=float(np.trace(xi_full)),
        trace_se=float(traces.std(ddof=1) / math.sqrt(batches)),
        lambda_max=float(np.linalg.eigvalsh(xi_full)[-1]),
        lambda_max_se=float(lmaxes.std(ddof=1) / math.sqrt(batches)),
        m_machines=cfg.m,
        mc_samples=per * batches,
        empty_groups=int(n_codes - seen.sum()),
    )


@dataclass(frozen=True)
class DpiReport:
    """Margins of the two data-processing bounds for one kernel estimate."""

    kernel: str
    bits: int
    trace_value: float
    trace_bound: float
    trace_margin: float      # bound + slack - value; >= 0 means pass
    lambda_value: float
    lambda_bound: float
    lambda_margin: float
    slack_sigmas: float
    ok: bool

    def to_dict(self) -> dict:
        return {
            "kernel": self.kernel,
            "bits": self.bits,
            "trace_value": self.trace_value,
            "trace_bound": self.trace_bound,
            "trace_margin": self.trace_margin,
            "lambda_value": self.lambda_value,
            "lambda_bound": self.lambda_bound,
            "lambda_margin": self.lambda_margin,
            "slack_sigmas": self.slack_sigmas,
            "ok": self.ok,
        }


def check_dpi(est: XiEstimate, cfg: ProblemConfig, slack_sigmas: float = 5.0) -> DpiReport:
    """Check the aggregate trace bound and the per-machine spectral bound."""
    m, n, d = cfg.m, cfg.n, cfg.d
    trace_bound = min(2.0 * math.log(2.0) * est.bits / d, 1.0) * m * m * d / n
    trace_value = est.aggregate_trace
    trace_margin = trace_bound + slack_sigmas * m * est.trace_se - trace_value
    lambda_bound = m / n
    lambda_margin = lambda_bound + slack_sigmas * est.lambda_max_se - est.lambda_max
    return DpiReport(
        kernel=est.kernel,
        bits=est.bits,
        trace_value=trace_value,
        trace_bound=trace_bound,
        trace_margin=trace_margin,
        lambda_value=est.lambda_max,
        lambda_bound=lambda_bound,
        lambda_margin=lambda_margin,
        slack_sigmas=slack_sigmas,
        ok=bool(trace_margin >= 0 and lambda_margin >= 0),
    )

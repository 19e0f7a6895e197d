"""dtestlab: a simulation lab for distributed signal detection under bit budgets.

m machines each observe a noisy d-dimensional signal, compress it into a
b-bit transcript (with or without a shared random coin), and a central
machine must decide whether the signal is zero.  The package implements the
rate-optimal one-round protocols for every (n, m, d, b) regime, calibrates
their thresholds, estimates testing risk by seeded Monte Carlo, and locates
empirical detection thresholds and their scaling exponents; a nonparametric
sequence-model layer and smoothness-adaptive tests sit on top.
"""

__version__ = "0.1.0"

from .model import (
    Coin,
    ConfigError,
    Dataset,
    ProblemConfig,
    RiskReport,
    Signal,
    Transcript,
    validate_config,
)
from .randomness import SeedNode, SeedTree

__all__ = [
    "__version__",
    "Coin",
    "ConfigError",
    "Dataset",
    "ProblemConfig",
    "RiskReport",
    "Signal",
    "Transcript",
    "validate_config",
    "SeedNode",
    "SeedTree",
]

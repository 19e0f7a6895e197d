"""Chunked, replayable Monte Carlo execution of protocol replications.

Replication r of an experiment draws every random quantity from the seed
node ``exp_node.child("rep", r)``, so results are a pure function of
(master seed, rep index).  Chunks exist only to vectorize numpy work and to
feed the thread pool; chunk size and worker count cannot change any drawn
value, which is what makes outputs byte-identical across --threads settings.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Optional

import numpy as np

from .model import ProblemConfig
from .protocols import BudgetError, TestProtocol
from .randomness import SeedNode

__all__ = ["collect_statistics", "audit_budget", "CHUNK_REPS"]

CHUNK_REPS = 32


def audit_budget(protocol: TestProtocol, cfg: ProblemConfig) -> None:
    bits = protocol.max_bits(cfg)
    if bits > cfg.b:
        raise BudgetError(
            f"{protocol.name} would emit {bits} bits per machine, budget is {cfg.b}"
        )


def _draw_coins(protocol, cfg, nodes) -> Optional[np.ndarray]:
    k = protocol.coin_rows(cfg)
    if k == 0:
        return None
    g = np.stack([node.child("coin").normals((cfg.d, k)) for node in nodes])
    q, r = np.linalg.qr(g)
    diag = np.einsum("rkk->rk", r)
    signs = np.where(diag >= 0, 1.0, -1.0)
    return (q * signs[:, None, :]).transpose(0, 2, 1)  # (R, k, d)


def _machines_used(protocol, cfg) -> int:
    # the local fallback only ever reads machine 1; sampling the rest would
    # triple the run time of small-m configurations for nothing
    return 1 if protocol.name == "T1-local" else cfg.m


def _run_chunk(protocol, cfg, signal, exp_node, start, count, need_ties):
    nodes = [exp_node.child("rep", r) for r in range(start, start + count)]
    m_used = _machines_used(protocol, cfg)
    xs = np.empty((count, m_used, cfg.d))
    sd = cfg.noise_sd
    for i, node in enumerate(nodes):
        xs[i] = node.child("obs").normals((m_used, cfg.d))
    xs *= sd
    if signal is not None:
        xs += signal[None, None, :]
    coins = _draw_coins(protocol, cfg, nodes)
    stats = protocol.chunk_statistics(cfg, xs, coins, nodes)
    ties = None
    if need_ties:
        n_stats = stats.shape[1]
        ties = np.stack([node.child("tie").uniforms(n_stats) for node in nodes])
    return stats, ties


def collect_statistics(
    protocol: TestProtocol,
    cfg: ProblemConfig,
    signal: Optional[np.ndarray],
    exp_node: SeedNode,
    reps: int,
    threads: int = 1,
    need_ties: bool = True,
):
    """Sub-statistics (and tie-break uniforms) for `reps` replications.

    signal is the true mean vector (None for the null).  Returns
    (stats (reps, n_stats), ties (reps, n_stats) or None).
    """
    audit_budget(protocol, cfg)
    n_stats = len(protocol.stat_names(cfg))
    stats = np.empty((reps, n_stats))
    ties = np.empty((reps, n_stats)) if need_ties else None
    spans = [
        (s, min(CHUNK_REPS, reps - s)) for s in range(0, reps, CHUNK_REPS)
    ]

    def work(span):
        s, c = span
        return s, c, _run_chunk(protocol, cfg, signal, exp_node, s, c, need_ties)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, spans))
    else:
        results = [work(sp) for sp in spans]
    for s, c, (st, ti) in results:
        stats[s : s + c] = st
        if need_ties:
            ties[s : s + c] = ti
    return stats, ties

"""Deterministic seeded randomness for parallel Monte Carlo.

Every random quantity in an experiment is addressed by a *seed node*: a path
of (label, index) pairs hanging off a 64-bit master seed.  A node's 128-bit
stream key is a blake2b hash chain over the path, so the stream attached to a
node is a pure function of (master_seed, path) -- independent of the order in
which other streams are consumed.  That is what makes replications
embarrassingly parallel and replay bit-exact regardless of worker count.

Streams themselves are numpy Philox (counter-based) blocks.  A node is meant
to be drawn from once: derive a fresh child for every draw.  Per-machine
randomness is counter-addressed inside a node's block: machine j's
observation noise is row j of the node's (m, d) Gaussian block, and its
encode randomness is element j of the node's length-m uniform block, so the
scalar per-machine API and the vectorized batch API read identical values.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .model import Dataset, ProblemConfig, Signal

__all__ = [
    "SeedNode",
    "SeedTree",
    "OrthogonalMatrix",
    "RotationCoin",
    "bernoulli",
    "haar_rotation",
    "haar_frame",
    "sample_observations",
]


def _derive_key(parent: bytes, label: str, index: int) -> bytes:
    h = hashlib.blake2b(digest_size=16)
    h.update(parent)
    h.update(label.encode("utf-8"))
    h.update(int(index).to_bytes(8, "little", signed=False))
    return h.digest()


@dataclass(frozen=True)
class SeedNode:
    """One node of the seed tree; a value type, safe to share and replay."""

    master_seed: int
    path: tuple[tuple[str, int], ...] = ()
    _key: bytes = field(default=b"", repr=False)

    def __post_init__(self):
        if not (0 <= self.master_seed < 2**64):
            raise ValueError("master_seed must be a 64-bit unsigned integer")
        if not self._key:
            root = hashlib.blake2b(
                self.master_seed.to_bytes(8, "little"), digest_size=16
            ).digest()
            key = root
            for label, index in self.path:
                key = _derive_key(key, label, index)
            object.__setattr__(self, "_key", key)

    def child(self, label: str, index: int = 0) -> "SeedNode":
        """Derive a child node; pure in (master_seed, path, label, index)."""
        return SeedNode(
            self.master_seed,
            self.path + ((label, index),),
            _derive_key(self._key, label, index),
        )

    def _generator(self) -> np.random.Generator:
        return np.random.Generator(
            np.random.Philox(key=int.from_bytes(self._key, "little"))
        )

    def normals(self, shape) -> np.ndarray:
        """The node's standard-normal block (same value on every call)."""
        return self._generator().standard_normal(shape)

    def uniforms(self, shape) -> np.ndarray:
        """The node's uniform [0, 1) block (same value on every call)."""
        return self._generator().random(shape)

    def uniform(self) -> float:
        return float(self._generator().random())

    def integers(self, low: int, high: int, shape=None) -> np.ndarray:
        return self._generator().integers(low, high, size=shape)


def SeedTree(master_seed: int) -> SeedNode:
    """Root node for a master seed."""
    return SeedNode(master_seed)


@dataclass(frozen=True, eq=False)
class OrthogonalMatrix:
    """A square orthogonal matrix (the shared public coin at full budget)."""

    entries: np.ndarray

    def __post_init__(self):
        u = np.asarray(self.entries, dtype=np.float64)
        if u.ndim != 2 or u.shape[0] != u.shape[1]:
            raise ValueError("entries must be a square matrix")
        u = u.copy()
        u.flags.writeable = False
        object.__setattr__(self, "entries", u)

    @property
    def dim(self) -> int:
        return self.entries.shape[0]

    def orthogonality_defect(self) -> float:
        """Max-entry deviation of U^T U from the identity."""
        d = self.dim
        return float(np.abs(self.entries.T @ self.entries - np.eye(d)).max())

    def rows(self, k: int) -> np.ndarray:
        return self.entries[:k]


@dataclass(frozen=True, eq=False)
class RotationCoin:
    """The first k rows of a Haar rotation: a uniformly random k-frame.

    All public-coin protocols only ever project onto the first k rotated
    coordinates, so the frame carries exactly the information they use while
    costing O(d k^2) instead of O(d^3) to draw.
    """

    frame: np.ndarray  # (k, d), orthonormal rows

    def __post_init__(self):
        f = np.asarray(self.frame, dtype=np.float64)
        if f.ndim != 2 or f.shape[0] > f.shape[1]:
            raise ValueError("frame must be (k, d) with k <= d")
        f = f.copy()
        f.flags.writeable = False
        object.__setattr__(self, "frame", f)

    @property
    def n_rows(self) -> int:
        return self.frame.shape[0]

    @property
    def dim(self) -> int:
        return self.frame.shape[1]

    def rows(self, k: int) -> np.ndarray:
        if k > self.n_rows:
            raise ValueError(f"coin has {self.n_rows} rows, {k} requested")
        return self.frame[:k]


def haar_frame(d: int, k: int, node: SeedNode) -> RotationCoin:
    """Draw a uniformly random orthonormal k-frame in R^d.

    QR-decompose a d x k standard Gaussian matrix and flip each column of Q
    by the sign of the corresponding diagonal entry of R; the transposed
    result is distributed as the first k rows of a Haar rotation.
    """
    if d < 1 or not (1 <= k <= d):
        raise ValueError("need d >= 1 and 1 <= k <= d")
    g = node.normals((d, k))
    q, r = np.linalg.qr(g, mode="reduced")
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return RotationCoin((q * signs).T)


def haar_rotation(d: int, node: SeedNode) -> OrthogonalMatrix:
    """Draw a d x d rotation from the Haar measure (QR with sign correction)."""
    if d < 1:
        raise ValueError("d must be >= 1")
    g = node.normals((d, d))
    q, r = np.linalg.qr(g)
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return OrthogonalMatrix(q * signs)


def bernoulli(p: float, node: SeedNode) -> int:
    """One Bernoulli(p) draw from the node's stream."""
    if not (0.0 <= p <= 1.0):
        raise ValueError(f"p must lie in [0, 1], got {p}")
    return int(node.uniform() < p)


def sample_observations(cfg: ProblemConfig, f: Signal, node: SeedNode) -> Dataset:
    """Sample the m local observations: row j is f + sqrt(m/n) * Z^j.

    Machine j's noise stream is row j of the node's (m, d) Gaussian block,
    so any machine's observation can be regenerated independently of the
    rest of the replication.
    """
    coeffs = f.coeffs
    if len(coeffs) != cfg.d:
        raise ValueError(f"signal has length {len(coeffs)}, config d={cfg.d}")
    z = node.normals((cfg.m, cfg.d))
    return Dataset(coeffs[None, :] + cfg.noise_sd * z)

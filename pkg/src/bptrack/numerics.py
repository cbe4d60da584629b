"""Deterministic numeric primitives shared by all modules.

Gaussian algebra, scaled-unscented sigma points, systematic resampling and a
counter-based seeded random stream. Everything here is pure: identical inputs
(including the Rng state) give bit-identical outputs.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .errors import DimensionMismatch, EmptyWeights, NotPositiveDefinite

LOG_2PI = math.log(2.0 * math.pi)

# diagonal jitter added on the single Cholesky retry, scaled by trace(C)/n
PSD_JITTER = 1e-9


class Rng:
    """Seeded random stream backed by the counter-based Philox generator.

    Substreams are derived from a (seed, stream) key pair so that simulation,
    tracking and training can consume independent reproducible streams.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream = int(stream) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.Philox(key=[self.seed, self.stream]))

    def substream(self, label: str) -> "Rng":
        """Child stream keyed by a stable hash of ``label``."""
        digest = hashlib.blake2s(label.encode("utf-8"), digest_size=8).digest()
        child = int.from_bytes(digest, "little")
        mixed = (self.stream * 0x9E3779B97F4A7C15 + child) & 0xFFFFFFFFFFFFFFFF
        return Rng(self.seed, mixed)

    # thin forwards to the underlying generator
    def random(self, size=None):
        return self._gen.random(size)

    def standard_normal(self, size=None):
        return self._gen.standard_normal(size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def poisson(self, lam):
        return int(self._gen.poisson(lam))

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def beta(self, a, b, size=None):
        return self._gen.beta(a, b, size)

    def shuffle(self, seq):
        self._gen.shuffle(seq)

    def choice(self, options, size=None):
        return self._gen.choice(options, size)


@dataclass
class GaussianState:
    """Mean/covariance summary of a state PDF (positions in m, velocities in m/s)."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.cov = np.asarray(self.cov, dtype=float)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


@dataclass
class ParticleSet:
    """Weighted particle representation of a state PDF."""

    particles: np.ndarray  # (n, dim)
    weights: np.ndarray  # (n,), nonnegative, sums to 1

    def __post_init__(self):
        self.particles = np.asarray(self.particles, dtype=float)
        self.weights = np.asarray(self.weights, dtype=float)

    def mean(self) -> np.ndarray:
        return self.weights @ self.particles

    def cov(self) -> np.ndarray:
        d = self.particles - self.mean()
        return (d * self.weights[:, None]).T @ d


@dataclass
class SigmaPointSet:
    """Deterministic weighted samples matching a Gaussian's first two moments."""

    points: np.ndarray  # (p, dim)
    weights_mean: np.ndarray  # (p,)
    weights_cov: np.ndarray  # (p,)

    def mean(self) -> np.ndarray:
        return self.weights_mean @ self.points

    def cov(self) -> np.ndarray:
        d = self.points - self.mean()
        return (d * self.weights_cov[:, None]).T @ d


@dataclass
class UTParams:
    """Scaled unscented-transform parameters (lambda = alpha^2 (n + kappa) - n)."""

    alpha: float = 0.5
    beta: float = 2.0
    kappa: float = 0.0

    def lam(self, n: int) -> float:
        return self.alpha * self.alpha * (n + self.kappa) - n


def cholesky_psd(cov: np.ndarray) -> np.ndarray:
    """Lower-triangular L with L L^T = cov, retrying once with diagonal jitter.

    Raises NotPositiveDefinite if the factorization fails even after adding
    PSD_JITTER * trace(cov)/n to the diagonal.
    """
    c = np.asarray(cov, dtype=float)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise NotPositiveDefinite(f"expected square matrix, got shape {c.shape}")
    try:
        return np.linalg.cholesky(c)
    except np.linalg.LinAlgError:
        pass
    n = c.shape[0]
    jitter = PSD_JITTER * float(np.trace(c)) / n
    try:
        return np.linalg.cholesky(c + jitter * np.eye(n))
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(
            f"Cholesky failed after jitter {jitter:.3e} (n={n})"
        ) from exc


def gaussian_logpdf(x: np.ndarray, g: GaussianState) -> float:
    """log N(x; g.mean, g.cov)."""
    x = np.asarray(x, dtype=float)
    if x.shape != g.mean.shape:
        raise DimensionMismatch(f"x has shape {x.shape}, mean has shape {g.mean.shape}")
    ell = cholesky_psd(g.cov)
    y = solve_triangular(ell, x - g.mean, lower=True)
    logdet = 2.0 * float(np.sum(np.log(np.diag(ell))))
    return -0.5 * (g.dim * LOG_2PI + logdet + float(y @ y))


def systematic_resample(weights: np.ndarray, n: int, rng: Rng) -> np.ndarray:
    """Systematic (stratified, single-offset) resampling.

    Returns n indices; the count of index i deviates from n*w_i by less than 1.
    """
    w = np.asarray(weights, dtype=float)
    if np.any(w < 0):
        raise EmptyWeights("negative weights")
    total = float(w.sum())
    if total <= 0.0 or not math.isfinite(total):
        raise EmptyWeights("weights sum to zero or are non-finite")
    cum = np.cumsum(w / total)
    cum[-1] = 1.0
    u = float(rng.random())
    positions = (np.arange(n) + u) / n
    idx = np.searchsorted(cum, positions, side="right")
    return np.minimum(idx, len(w) - 1)


def generate_sigma_points(g: GaussianState, ut: UTParams) -> SigmaPointSet:
    """2n+1 scaled-UT sigma points reconstructing g's mean exactly and cov to 1e-8."""
    n = g.dim
    lam = ut.lam(n)
    spread = math.sqrt(n + lam)
    ell = cholesky_psd(g.cov)
    points = np.empty((2 * n + 1, n))
    points[0] = g.mean
    points[1 : n + 1] = g.mean + spread * ell.T
    points[n + 1 :] = g.mean - spread * ell.T
    w_rest = 1.0 / (2.0 * (n + lam))
    weights_mean = np.full(2 * n + 1, w_rest)
    weights_cov = np.full(2 * n + 1, w_rest)
    weights_mean[0] = lam / (n + lam)
    weights_cov[0] = lam / (n + lam) + 1.0 - ut.alpha * ut.alpha + ut.beta
    return SigmaPointSet(points, weights_mean, weights_cov)


def cv_transition(dt: float, dim: int = 4) -> np.ndarray:
    """Constant-velocity transition matrix for a [px py vx vy] state."""
    f = np.eye(dim)
    half = dim // 2
    for i in range(half):
        f[i, half + i] = dt
    return f


def cv_process_noise(dt: float, accel_var: float) -> np.ndarray:
    """White-acceleration process noise for the 2-D CV model."""
    q11 = accel_var * dt**3 / 3.0
    q12 = accel_var * dt**2 / 2.0
    q22 = accel_var * dt
    q = np.zeros((4, 4))
    for i in range(2):
        q[i, i] = q11
        q[i, 2 + i] = q12
        q[2 + i, i] = q12
        q[2 + i, 2 + i] = q22
    return q


def symmetrize_psd(matrix: np.ndarray) -> np.ndarray:
    """Symmetrize and clip negative eigenvalues to zero (round-off repair)."""
    sym = 0.5 * (matrix + matrix.T)
    vals, vecs = np.linalg.eigh(sym)
    if vals[0] >= 0.0:
        return sym
    vals = np.clip(vals, 0.0, None)
    return (vecs * vals) @ vecs.T

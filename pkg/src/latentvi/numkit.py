"""Deterministic numerical substrate.

Seeded counter-based random streams, Gaussian log-densities and entropies,
a tensor-product quadrature oracle for low-dimensional latent integrals,
exact Gaussian conditioning, and a central finite-difference checker.
Everything stays in log space; there are no raw-density code paths.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import DecompositionError, DimensionError, DomainError, CapabilityError

LOG_2PI = float(np.log(2.0 * np.pi))
_MASK64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


class RngStream:
    """Philox-backed stream keyed by ``(seed, stream_id)``.

    Two streams built from the same pair replay the same draws. ``spawn``
    derives child streams with well-separated keys so that per-item work
    never shares a stream.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream_id = int(stream_id) & _MASK64
        key = self.seed | (self.stream_id << 64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def spawn(self, index: int) -> "RngStream":
        child = _splitmix64(self.stream_id ^ _splitmix64(int(index) + 1))
        return RngStream(self.seed, child)

    def normal(self, size) -> np.ndarray:
        return self._gen.standard_normal(size)

    def uniform(self, size=None) -> np.ndarray:
        return self._gen.random(size)

    def integers(self, low, high=None, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def multinomial(self, n, pvals) -> np.ndarray:
        return self._gen.multinomial(n, pvals)

    def categorical(self, probs: np.ndarray) -> np.ndarray:
        """One categorical draw per row of ``probs``."""
        probs = np.atleast_2d(probs)
        cdf = np.cumsum(probs, axis=1)
        u = self._gen.random(probs.shape[0])[:, None] * cdf[:, -1:]
        return np.minimum((u > cdf).sum(axis=1), probs.shape[1] - 1)


def sample_std_normal(rng: RngStream, n: int) -> np.ndarray:
    if n < 1:
        raise DomainError("n must be >= 1")
    return rng.normal(int(n))


def _check_same_shape(*arrays):
    shape = arrays[0].shape
    for a in arrays[1:]:
        if a.shape != shape:
            raise DimensionError(f"shape mismatch: {shape} vs {a.shape}")


def log_pdf_gaussian_diag(x, mean, var) -> np.ndarray | float:
    """Log-density of ``N(mean, diag(var))`` summed over the last axis.

    Leading axes are treated as a batch. ``x``, ``mean`` and ``var`` must
    have identical shapes.
    """
    x = np.asarray(x, dtype=float)
    mean = np.asarray(mean, dtype=float)
    var = np.asarray(var, dtype=float)
    _check_same_shape(x, mean, var)
    if np.any(~(var > 0)):
        raise DomainError("variance entries must be positive")
    out = -0.5 * np.sum(LOG_2PI + np.log(var) + (x - mean) ** 2 / var, axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def entropy_gaussian_diag(stddev) -> float:
    stddev = np.asarray(stddev, dtype=float)
    if np.any(~(stddev > 0)):
        raise DomainError("stddev entries must be positive")
    k = stddev.shape[-1]
    return 0.5 * k * (LOG_2PI + 1.0) + np.sum(np.log(stddev), axis=-1)


def logsumexp(a, axis=None):
    a = np.asarray(a, dtype=float)
    amax = np.max(a, axis=axis, keepdims=True)
    amax = np.where(np.isfinite(amax), amax, 0.0)
    e = np.exp(a - amax)
    s = np.sum(e, axis=axis, keepdims=True)
    out = np.log(s) + amax
    if axis is None:
        return float(out.reshape(()))
    return np.squeeze(out, axis=axis)


@dataclass(frozen=True)
class GaussianDiag:
    mean: np.ndarray
    stddev: np.ndarray

    def __post_init__(self):
        if np.shape(self.mean) != np.shape(self.stddev):
            raise DimensionError("mean and stddev must share a shape")
        if np.any(~(np.asarray(self.stddev) > 0)):
            raise DomainError("stddev entries must be positive")

    @property
    def cov(self) -> np.ndarray:
        return np.diag(np.asarray(self.stddev) ** 2)

    def entropy(self) -> float:
        return entropy_gaussian_diag(self.stddev)


@dataclass(frozen=True)
class GaussianDense:
    mean: np.ndarray
    cov: np.ndarray

    @property
    def dim(self) -> int:
        return int(np.shape(self.mean)[0])

    def entropy(self) -> float:
        if self.dim == 0:
            return 0.0
        chol = cholesky(self.cov)
        return 0.5 * self.dim * (LOG_2PI + 1.0) + float(np.sum(np.log(np.diag(chol))))

    def log_pdf(self, x) -> np.ndarray | float:
        return log_pdf_gaussian_dense(x, self.mean, self.cov)


def cholesky(cov) -> np.ndarray:
    cov = np.asarray(cov, dtype=float)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise DimensionError(f"covariance must be square, got {cov.shape}")
    if not np.allclose(cov, cov.T, rtol=1e-10, atol=1e-12):
        raise DecompositionError("covariance is not symmetric")
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise DecompositionError("covariance is not positive definite") from exc


def log_pdf_gaussian_dense(x, mean, cov):
    x = np.asarray(x, dtype=float)
    mean = np.asarray(mean, dtype=float)
    chol = cholesky(cov)
    d = mean.shape[-1]
    if x.shape[-1] != d:
        raise DimensionError("x and mean dimensions differ")
    diff = (x - mean).reshape(-1, d).T
    sol = np.linalg.solve(chol, diff)
    out = -0.5 * (d * LOG_2PI + np.sum(sol**2, axis=0)) - np.sum(np.log(np.diag(chol)))
    return float(out[0]) if x.ndim == 1 else out.reshape(x.shape[:-1])


def kl_gaussian(mean_p, cov_p, mean_q, cov_q) -> float:
    """KL(N(mean_p, cov_p) || N(mean_q, cov_q))."""
    mean_p = np.atleast_1d(np.asarray(mean_p, dtype=float))
    mean_q = np.atleast_1d(np.asarray(mean_q, dtype=float))
    cov_p = np.atleast_2d(cov_p)
    cov_q = np.atleast_2d(cov_q)
    k = mean_p.shape[0]
    lq = cholesky(cov_q)
    lp = cholesky(cov_p)
    a = np.linalg.solve(lq, lp)
    diff = np.linalg.solve(lq, mean_q - mean_p)
    logdet = 2.0 * (np.sum(np.log(np.diag(lq))) - np.sum(np.log(np.diag(lp))))
    return 0.5 * (np.sum(a**2) + diff @ diff - k + logdet)


def gaussian_condition(mean, cov, observed_idx, observed_vals) -> GaussianDense:
    """Exact conditional of the unobserved block given observed coordinates."""
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    n = mean.shape[0]
    if cov.shape != (n, n):
        raise DimensionError(f"covariance must be {n}x{n}, got {cov.shape}")
    cholesky(cov)
    obs = np.asarray(observed_idx, dtype=int).ravel()
    vals = np.asarray(observed_vals, dtype=float).ravel()
    if obs.shape != vals.shape:
        raise DimensionError("observed_idx and observed_vals differ in length")
    if len(np.unique(obs)) != len(obs) or np.any((obs < 0) | (obs >= n)):
        raise DomainError("observed indices must be distinct and in range")
    free = np.setdiff1d(np.arange(n), obs)
    if free.size == 0:
        return GaussianDense(np.zeros(0), np.zeros((0, 0)))
    if obs.size == 0:
        return GaussianDense(mean.copy(), cov.copy())
    s_oo = cov[np.ix_(obs, obs)]
    s_fo = cov[np.ix_(free, obs)]
    s_ff = cov[np.ix_(free, free)]
    chol = cholesky(s_oo)
    gain_t = np.linalg.solve(chol.T, np.linalg.solve(chol, s_fo.T))
    cond_mean = mean[free] + gain_t.T @ (vals - mean[obs])
    cond_cov = s_ff - s_fo @ gain_t
    return GaussianDense(cond_mean, 0.5 * (cond_cov + cond_cov.T))


@dataclass(frozen=True)
class QuadGrid:
    """Tensor-product Gauss-Legendre rule on a box, k <= 2.

    ``nodes`` has shape ``(n_nodes**k, k)``; ``log_weights`` the matching
    log of positive weights, which sum to the box volume.
    """

    n_nodes: int
    lower: tuple
    upper: tuple
    nodes: np.ndarray = field(repr=False)
    log_weights: np.ndarray = field(repr=False)

    @property
    def dim(self) -> int:
        return len(self.lower)


def make_grid(k: int, n_nodes: int = 201, half_width: float = 10.0) -> QuadGrid:
    if k > 2:
        raise CapabilityError("quadrature oracle supports latent dimension k <= 2")
    if k < 1:
        raise DomainError("k must be >= 1")
    t, w = np.polynomial.legendre.leggauss(n_nodes)
    x1 = half_width * t
    lw1 = np.log(half_width * w)
    if k == 1:
        nodes = x1[:, None]
        lw = lw1
    else:
        g0, g1 = np.meshgrid(x1, x1, indexing="ij")
        nodes = np.stack([g0.ravel(), g1.ravel()], axis=1)
        lw = (lw1[:, None] + lw1[None, :]).ravel()
    return QuadGrid(n_nodes, (-half_width,) * k, (half_width,) * k, nodes, lw)


def quadrature_log_integral(log_integrand: Callable[[np.ndarray], np.ndarray], grid: QuadGrid) -> float:
    """log of the integral of exp(log_integrand) over the grid box."""
    vals = np.asarray(log_integrand(grid.nodes), dtype=float)
    return logsumexp(vals + grid.log_weights)


def quadrature_log_marginal(model, theta, x, grid: QuadGrid) -> float:
    """Brute-force ``log integral p_theta(x, z) dz`` for continuous k <= 2."""
    if getattr(model, "latent_kind", "continuous") != "continuous":
        raise CapabilityError("quadrature applies to continuous latents only")
    if model.latent_dim > 2 or grid.dim != model.latent_dim:
        raise CapabilityError("quadrature oracle supports latent dimension k <= 2")
    x = np.asarray(x, dtype=float)
    xs = np.broadcast_to(x, (grid.nodes.shape[0], x.shape[-1]))
    return quadrature_log_integral(lambda z: model.complete_loglik(theta, xs, z), grid)


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    flat = x.ravel().copy()
    grad = np.zeros_like(flat)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + h
        fp = f(flat.reshape(x.shape))
        flat[j] = orig - h
        fm = f(flat.reshape(x.shape))
        flat[j] = orig
        grad[j] = (fp - fm) / (2.0 * h)
    return grad.reshape(x.shape)


def relative_error(a, b, floor: float = 1e-8) -> float:
    """Norm-wise relative discrepancy used by every gradient check."""
    a = np.ravel(a)
    b = np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / scale)


def mean_and_se(samples) -> tuple[float, float]:
    s = np.asarray(samples, dtype=float).ravel()
    if s.size < 2:
        return float(s.mean()), float("inf")
    return float(s.mean()), float(s.std(ddof=1) / np.sqrt(s.size))

"""Latent-variable models: decoder plus a fixed prior.

Every model exposes the same capability set:

``complete_loglik(theta, x, z)``
    log p_theta(x | z) + log p(z), row-wise for paired batches.
``score_theta(theta, x, z)``
    gradient in theta, summed over rows.
``grad_z(theta, x, z)``
    gradient in z, row-wise (continuous latents only).
``value_and_grads(theta, x, z)``
    all three from one forward pass.
``sample_prior(rng, n)`` / ``sample_decoder(theta, z, rng)``

``x`` is ``(d,)`` or ``(batch, d)`` and ``z`` is ``(k,)`` or ``(batch, k)``
with rows paired. The mixture model carries its parameters as a
:class:`GmmParams`; the continuous models take a flat vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffnet
from .diffnet import MlpParams, MlpSpec
from .errors import CapabilityError, DimensionError, DomainError
from .numkit import LOG_2PI, GaussianDense, RngStream, cholesky, gaussian_condition, logsumexp

GMM_VAR_FLOOR = 1e-6


def _pair(x, z, d, k):
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    single = x.ndim == 1 and z.ndim == 1
    xb = np.atleast_2d(x)
    zb = np.atleast_2d(z)
    if xb.shape[1] != d or zb.shape[1] != k:
        raise DimensionError(f"expected x(.., {d}) and z(.., {k}), got {x.shape}, {z.shape}")
    if xb.shape[0] != zb.shape[0]:
        if xb.shape[0] == 1:
            xb = np.broadcast_to(xb, (zb.shape[0], d))
        else:
            raise DimensionError("x and z must have the same number of rows")
    return xb, zb, single


def _log_std_normal(z):
    return -0.5 * (z.shape[-1] * LOG_2PI + np.sum(z * z, axis=-1))


# ---------------------------------------------------------------------------
# Gaussian mixture


@dataclass
class GmmParams:
    means: np.ndarray  # (K, d)
    variances: np.ndarray  # (K, d), diagonal per component
    weights: np.ndarray  # (K,)

    def __post_init__(self):
        self.means = np.atleast_2d(np.asarray(self.means, dtype=float))
        self.variances = np.asarray(self.variances, dtype=float).reshape(self.means.shape)
        self.weights = np.asarray(self.weights, dtype=float).ravel()
        if self.weights.shape[0] != self.means.shape[0]:
            raise DimensionError("one weight per component required")
        if np.any(self.weights <= 0) or abs(self.weights.sum() - 1.0) > 1e-9:
            raise DomainError("mixing weights must be positive and sum to 1")
        if np.any(self.variances <= 0):
            raise DomainError("variances must be positive")

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    def flat(self) -> np.ndarray:
        return np.concatenate([self.means.ravel(), self.variances.ravel(), self.weights])

    def copy(self) -> "GmmParams":
        return GmmParams(self.means.copy(), self.variances.copy(), self.weights.copy())


class GaussianMixtureModel:
    """K-component diagonal Gaussian mixture with a one-hot categorical latent.

    The categorical prior is the mixing-weight vector, so unlike the
    continuous models the prior here is part of theta.
    """

    latent_kind = "discrete"

    def __init__(self, n_components: int, data_dim: int):
        self.n_components = int(n_components)
        self.data_dim = int(data_dim)
        self.latent_dim = self.n_components

    def log_joint(self, theta: GmmParams, x) -> np.ndarray:
        """``log pi_j + log N(x; mu_j, diag var_j)`` with shape ``(n, K)``."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.data_dim:
            raise DimensionError(f"expected data dimension {self.data_dim}")
        diff = x[:, None, :] - theta.means[None, :, :]
        quad = np.sum(diff**2 / theta.variances[None], axis=2)
        logdet = np.sum(np.log(theta.variances), axis=1)
        return np.log(theta.weights)[None, :] - 0.5 * (self.data_dim * LOG_2PI + logdet[None, :] + quad)

    def complete_loglik(self, theta: GmmParams, x, z) -> np.ndarray:
        lj = self.log_joint(theta, x)
        z = np.atleast_1d(np.asarray(z, dtype=int))
        if lj.shape[0] == 1 and z.shape[0] > 1:
            lj = np.broadcast_to(lj, (z.shape[0], lj.shape[1]))
        return lj[np.arange(z.shape[0]), z]

    def loglik(self, theta: GmmParams, x) -> np.ndarray:
        """Observed-data log-likelihood per row."""
        return logsumexp(self.log_joint(theta, x), axis=1)

    def sample_prior(self, rng: RngStream, n: int, theta: GmmParams) -> np.ndarray:
        return rng.categorical(np.broadcast_to(theta.weights, (n, self.n_components)))

    def sample_decoder(self, theta: GmmParams, z, rng: RngStream) -> np.ndarray:
        z = np.atleast_1d(np.asarray(z, dtype=int))
        eps = rng.normal((z.shape[0], self.data_dim))
        return theta.means[z] + np.sqrt(theta.variances[z]) * eps

    def score_theta(self, theta, x, z):
        raise CapabilityError("the mixture model is fitted by EM only")

    def grad_z(self, theta, x, z):
        raise CapabilityError("discrete latents have no z-gradient")


def gmm_responsibilities(model: GaussianMixtureModel, theta: GmmParams, x) -> np.ndarray:
    """Posterior component probabilities; ``(K,)`` for one datum, else ``(n, K)``."""
    single = np.ndim(x) == 1
    lj = model.log_joint(theta, x)
    r = np.exp(lj - logsumexp(lj, axis=1)[:, None])
    r /= r.sum(axis=1, keepdims=True)
    return r[0] if single else r


# ---------------------------------------------------------------------------
# Linear Gaussian factor model


@dataclass
class LgParams:
    W: np.ndarray  # (d, k)
    mu: np.ndarray  # (d,)
    sigma2: float

    def __post_init__(self):
        self.W = np.atleast_2d(np.asarray(self.W, dtype=float))
        self.mu = np.asarray(self.mu, dtype=float).ravel()
        self.sigma2 = float(self.sigma2)
        if self.sigma2 <= 0:
            raise DomainError("noise variance must be positive")
        if self.mu.shape[0] != self.W.shape[0]:
            raise DimensionError("W rows must match mu length")


class LinearGaussianModel:
    """x = W z + mu + noise, noise ~ N(0, sigma2 I_d), z ~ N(0, I_k).

    theta = [W row-major (d*k), mu (d), log sigma2].
    """

    latent_kind = "continuous"

    def __init__(self, data_dim: int, latent_dim: int):
        self.data_dim = int(data_dim)
        self.latent_dim = int(latent_dim)

    @property
    def n_params(self) -> int:
        return self.data_dim * self.latent_dim + self.data_dim + 1

    def pack(self, params: LgParams) -> np.ndarray:
        return np.concatenate([params.W.ravel(), params.mu, [np.log(params.sigma2)]])

    def unpack(self, theta) -> LgParams:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_params,):
            raise DimensionError(f"theta must have length {self.n_params}")
        d, k = self.data_dim, self.latent_dim
        return LgParams(theta[: d * k].reshape(d, k), theta[d * k : d * k + d], np.exp(theta[-1]))

    def value_and_grads(self, theta, x, z):
        p = self.unpack(theta)
        xb, zb, single = _pair(x, z, self.data_dim, self.latent_dim)
        r = xb - zb @ p.W.T - p.mu
        rr = np.sum(r * r, axis=1)
        d = self.data_dim
        vals = -0.5 * (d * (LOG_2PI + np.log(p.sigma2)) + rr / p.sigma2) + _log_std_normal(zb)
        g_w = (r.T @ zb) / p.sigma2
        g_mu = r.sum(axis=0) / p.sigma2
        g_s = np.sum(-0.5 * d + 0.5 * rr / p.sigma2)
        gtheta = np.concatenate([g_w.ravel(), g_mu, [g_s]])
        gz = r @ p.W / p.sigma2 - zb
        if single:
            return float(vals[0]), gtheta, gz[0]
        return vals, gtheta, gz

    def complete_loglik(self, theta, x, z):
        return self.value_and_grads(theta, x, z)[0]

    def score_theta(self, theta, x, z):
        return self.value_and_grads(theta, x, z)[1]

    def grad_z(self, theta, x, z):
        return self.value_and_grads(theta, x, z)[2]

    def sample_prior(self, rng: RngStream, n: int) -> np.ndarray:
        return rng.normal((n, self.latent_dim))

    def sample_decoder(self, theta, z, rng: RngStream) -> np.ndarray:
        p = self.unpack(theta)
        z = np.atleast_2d(z)
        return z @ p.W.T + p.mu + np.sqrt(p.sigma2) * rng.normal((z.shape[0], self.data_dim))

    def marginal_cov(self, theta) -> np.ndarray:
        p = self.unpack(theta)
        return p.W @ p.W.T + p.sigma2 * np.eye(self.data_dim)

    def joint(self, theta) -> GaussianDense:
        """Joint Gaussian of the stacked vector (z, x)."""
        p = self.unpack(theta)
        k = self.latent_dim
        mean = np.concatenate([np.zeros(k), p.mu])
        cov = np.block([[np.eye(k), p.W.T], [p.W, self.marginal_cov(theta)]])
        return GaussianDense(mean, cov)


def lg_posterior(model: LinearGaussianModel, theta, x) -> GaussianDense:
    p = model.unpack(theta)
    x = np.asarray(x, dtype=float)
    chol = cholesky(model.marginal_cov(theta))
    sol_w = np.linalg.solve(chol.T, np.linalg.solve(chol, p.W))  # C^{-1} W
    mean = sol_w.T @ (x - p.mu)
    cov = np.eye(model.latent_dim) - p.W.T @ sol_w
    return GaussianDense(mean, 0.5 * (cov + cov.T))


def lg_posterior_by_conditioning(model: LinearGaussianModel, theta, x) -> GaussianDense:
    j = model.joint(theta)
    k = model.latent_dim
    return gaussian_condition(j.mean, j.cov, np.arange(k, k + model.data_dim), x)


def lg_log_marginal(model: LinearGaussianModel, theta, x):
    """Exact log N(x; mu, W W^T + sigma2 I); per row for batched x."""
    p = model.unpack(theta)
    return GaussianDense(p.mu, model.marginal_cov(theta)).log_pdf(x)


def lg_mle(data, k: int):
    """Closed-form maximum likelihood (probabilistic PCA).

    Returns ``(mu, W, sigma2)``; W is identified only up to a rotation of
    its columns, so compare fits through ``W @ W.T``.
    """
    data = np.asarray(data, dtype=float)
    n, d = data.shape
    mu = data.mean(axis=0)
    cov = (data - mu).T @ (data - mu) / n
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    sigma2 = float(evals[k:].mean())
    scale = np.sqrt(np.maximum(evals[:k] - sigma2, 0.0))
    W = evecs[:, :k] * scale
    return mu, W, sigma2


# ---------------------------------------------------------------------------
# Nonlinear Gaussian model


class NonlinearGaussianModel:
    """x | z ~ N(mu_theta(z), sigma2_theta(z) I_d), z ~ N(0, I_k).

    Both functions are MLPs; the variance net outputs log sigma2, clamped
    to the diffnet bounds. theta = [mean-net params, log-variance-net params].
    ``clamp_hits`` counts saturated evaluations instead of raising.
    """

    latent_kind = "continuous"

    def __init__(self, data_dim: int, latent_dim: int, hidden=(16,), activation: str = "tanh"):
        self.data_dim = int(data_dim)
        self.latent_dim = int(latent_dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.mean_spec = MlpSpec((self.latent_dim, *self.hidden, self.data_dim), activation)
        self.logvar_spec = MlpSpec((self.latent_dim, *self.hidden, 1), activation)
        self.clamp_hits = 0

    @property
    def n_params(self) -> int:
        return self.mean_spec.n_params + self.logvar_spec.n_params

    def split(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_params,):
            raise DimensionError(f"theta must have length {self.n_params}")
        m = self.mean_spec.n_params
        return MlpParams(self.mean_spec, theta[:m]), MlpParams(self.logvar_spec, theta[m:])

    def init_theta(self, rng: RngStream) -> np.ndarray:
        a = diffnet.init_params(self.mean_spec, rng.spawn(0))
        b = diffnet.init_params(self.logvar_spec, rng.spawn(1))
        return np.concatenate([a.flat, b.flat])

    def decode(self, theta, z):
        """(mean (n, d), clamped log sigma2 (n,)) at latent points z."""
        mean_net, var_net = self.split(theta)
        zb = np.atleast_2d(z)
        s, _ = diffnet.clamp_logvar(diffnet.mlp_forward(var_net, zb)[:, 0])
        return diffnet.mlp_forward(mean_net, zb), s

    def value_and_grads(self, theta, x, z):
        mean_net, var_net = self.split(theta)
        xb, zb, single = _pair(x, z, self.data_dim, self.latent_dim)
        d = self.data_dim
        mean = diffnet.mlp_forward(mean_net, zb)
        raw = diffnet.mlp_forward(var_net, zb)[:, 0]
        s, free = diffnet.clamp_logvar(raw)
        self.clamp_hits += int(np.count_nonzero(~free))
        var = np.exp(s)
        r = xb - mean
        rr = np.sum(r * r, axis=1)
        vals = -0.5 * (d * (LOG_2PI + s) + rr / var) + _log_std_normal(zb)
        g_mean, gz_mean = diffnet.mlp_grad(mean_net, zb, r / var[:, None])
        cot_s = np.where(free, -0.5 * d + 0.5 * rr / var, 0.0)
        g_var, gz_var = diffnet.mlp_grad(var_net, zb, cot_s[:, None])
        gtheta = np.concatenate([g_mean, g_var])
        gz = gz_mean + gz_var - zb
        if single:
            return float(vals[0]), gtheta, gz[0]
        return vals, gtheta, gz

    def complete_loglik(self, theta, x, z):
        return self.value_and_grads(theta, x, z)[0]

    def score_theta(self, theta, x, z):
        return self.value_and_grads(theta, x, z)[1]

    def grad_z(self, theta, x, z):
        return self.value_and_grads(theta, x, z)[2]

    def sample_prior(self, rng: RngStream, n: int) -> np.ndarray:
        return rng.normal((n, self.latent_dim))

    def sample_decoder(self, theta, z, rng: RngStream) -> np.ndarray:
        mean, s = self.decode(theta, z)
        return mean + np.exp(0.5 * s)[:, None] * rng.normal(mean.shape)

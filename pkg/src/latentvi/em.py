"""EM and Monte Carlo EM for models with a tractable conditional p_theta(z | x).

Besides the drivers this module evaluates the Q-function and its
entropy-regularized form, which equals the observed log-likelihood minus
the KL divergence between the old and new conditionals. Those quantities
certify the monotonicity chain checked in the test-suite.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import CapabilityError, DomainError
from .models import (
    GMM_VAR_FLOOR,
    GaussianMixtureModel,
    GmmParams,
    LinearGaussianModel,
    LgParams,
    gmm_responsibilities,
    lg_log_marginal,
    lg_posterior,
)
from .numkit import (
    QuadGrid,
    RngStream,
    kl_gaussian,
    make_grid,
    quadrature_log_marginal,
)

log = logging.getLogger(__name__)

EMPTY_COMPONENT_MASS = 1e-12


def init_gmm(data, n_components: int, rng: RngStream) -> GmmParams:
    """k-means++ style seeding: centers drawn with probability proportional to D^2."""
    data = np.asarray(data, dtype=float)
    n, d = data.shape
    if n < n_components:
        raise DomainError("need at least as many data points as components")
    centers = [data[int(rng.integers(n))]]
    for _ in range(1, n_components):
        dist2 = np.min(((data[:, None, :] - np.array(centers)[None]) ** 2).sum(axis=2), axis=1)
        total = dist2.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            cdf = np.cumsum(dist2 / total)
            idx = int(min(np.searchsorted(cdf, rng.uniform()), n - 1))
        centers.append(data[idx])
    var = np.maximum(data.var(axis=0), GMM_VAR_FLOOR)
    return GmmParams(
        np.array(centers),
        np.tile(var, (n_components, 1)),
        np.full(n_components, 1.0 / n_components),
    )


def _gmm_weighted_mstep(data, weights, previous: GmmParams, rng: RngStream | None) -> GmmParams:
    """argmax over theta of sum_ij w_ij [log pi_j + log N(x_i; mu_j, var_j)].

    ``weights`` may be responsibilities, normalised imputation counts or
    one-hot labels; all give the same closed form.
    """
    n, d = data.shape
    mass = weights.sum(axis=0)
    variances = previous.variances.copy()
    for j in np.flatnonzero(mass < EMPTY_COMPONENT_MASS):
        rng = rng or RngStream(0, 0xE3)
        idx = int(rng.integers(n))
        log.warning("component %d is empty; re-seeding from data point %d", j, idx)
        weights = weights.copy()
        weights[:, j] = 0.0
        weights[idx, :] = 0.0
        weights[idx, j] = 1.0
    mass = weights.sum(axis=0)
    means = (weights.T @ data) / mass[:, None]
    for j in range(weights.shape[1]):
        diff = data - means[j]
        variances[j] = (weights[:, j] @ (diff * diff)) / mass[j]
    variances = np.maximum(variances, GMM_VAR_FLOOR)
    return GmmParams(means, variances, mass / mass.sum())


def em_step_gmm(model: GaussianMixtureModel, theta: GmmParams, data, rng: RngStream | None = None) -> GmmParams:
    data = np.atleast_2d(np.asarray(data, dtype=float))
    if data.shape[0] < model.n_components:
        raise DomainError("need n >= K")
    resp = gmm_responsibilities(model, theta, data)
    return _gmm_weighted_mstep(data, resp, theta, rng)


def em_step_lg(model: LinearGaussianModel, theta, data) -> np.ndarray:
    """Exact EM update for the linear Gaussian model (expected sufficient statistics)."""
    data = np.atleast_2d(np.asarray(data, dtype=float))
    n, d = data.shape
    k = model.latent_dim
    posts = [lg_posterior(model, theta, x) for x in data]
    ez = np.array([p.mean for p in posts])
    ezz = sum(p.cov for p in posts) + ez.T @ ez
    # regress x on [z, 1] with expected moments
    a = np.zeros((k + 1, k + 1))
    a[:k, :k] = ezz
    a[:k, k] = a[k, :k] = ez.sum(axis=0)
    a[k, k] = n
    b = np.hstack([ez, np.ones((n, 1))]).T @ data
    coef = np.linalg.solve(a, b)
    W, mu = coef[:k].T, coef[k]
    resid = data - ez @ W.T - mu
    trace_term = np.trace(W @ sum(p.cov for p in posts) @ W.T)
    sigma2 = (np.sum(resid**2) + trace_term) / (n * d)
    return model.pack(LgParams(W, mu, sigma2))


def complete_data_mle(model, data, latents, previous=None):
    """Maximum likelihood given imputed or true latents.

    For the mixture ``latents`` are integer labels; for the linear Gaussian
    model they are ``(n, k)`` or ``(n, M, k)`` latent draws.
    """
    data = np.atleast_2d(np.asarray(data, dtype=float))
    if isinstance(model, GaussianMixtureModel):
        labels = np.asarray(latents, dtype=int)
        onehot = np.zeros((data.shape[0], model.n_components))
        onehot[np.arange(data.shape[0]), labels] = 1.0
        prev = previous or GmmParams(
            np.zeros((model.n_components, model.data_dim)),
            np.ones((model.n_components, model.data_dim)),
            np.full(model.n_components, 1.0 / model.n_components),
        )
        return _gmm_weighted_mstep(data, onehot, prev, None)
    if isinstance(model, LinearGaussianModel):
        z = np.asarray(latents, dtype=float)
        if z.ndim == 2:
            z = z[:, None, :]
        n, m, k = z.shape
        xs = np.repeat(data, m, axis=0)
        design = np.hstack([z.reshape(n * m, k), np.ones((n * m, 1))])
        coef, *_ = np.linalg.lstsq(design, xs, rcond=None)
        resid = xs - design @ coef
        sigma2 = float(np.sum(resid**2) / (resid.size))
        return model.pack(LgParams(coef[:k].T, coef[k], sigma2))
    raise CapabilityError(f"no complete-data MLE for {type(model).__name__}")


def mcem_step(model, theta, data, n_draws: int, rng: RngStream):
    """One Monte Carlo EM update with ``n_draws`` exact conditional draws per datum.

    Mixture draws are aggregated into per-datum multinomial counts, which is
    the sufficient statistic of the M categorical draws.
    """
    if n_draws < 1:
        raise DomainError("n_draws must be >= 1")
    data = np.atleast_2d(np.asarray(data, dtype=float))
    if isinstance(model, GaussianMixtureModel):
        resp = gmm_responsibilities(model, theta, data)
        counts = rng.multinomial(n_draws, resp).astype(float)
        return _gmm_weighted_mstep(data, counts / n_draws, theta, rng)
    if isinstance(model, LinearGaussianModel):
        draws = np.empty((data.shape[0], n_draws, model.latent_dim))
        for i, x in enumerate(data):
            post = lg_posterior(model, theta, x)
            chol = np.linalg.cholesky(post.cov)
            draws[i] = post.mean + rng.normal((n_draws, model.latent_dim)) @ chol.T
        return complete_data_mle(model, data, draws)
    raise CapabilityError(
        f"MCEM needs exact conditional sampling; {type(model).__name__} does not provide it"
    )


# ---------------------------------------------------------------------------
# Q-function and its regularized form


def _conditional(model, theta, x):
    if isinstance(model, GaussianMixtureModel):
        return gmm_responsibilities(model, theta, np.atleast_2d(x))
    if isinstance(model, LinearGaussianModel):
        return [lg_posterior(model, theta, xi) for xi in np.atleast_2d(x)]
    raise CapabilityError(f"no closed-form conditional for {type(model).__name__}")


def observed_loglik(model, theta, x) -> float:
    """Sum of observed-data log-likelihoods over the rows of x."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if isinstance(model, GaussianMixtureModel):
        return float(np.sum(model.loglik(theta, x)))
    if isinstance(model, LinearGaussianModel):
        return float(np.sum(lg_log_marginal(model, theta, x)))
    raise CapabilityError(f"no closed-form likelihood for {type(model).__name__}")


def q_function(model, theta, theta_t, x, grid: QuadGrid | None = None) -> float:
    """E_{Z ~ p_{theta_t}(z|x)}[l(theta | x, Z)], summed over the rows of x.

    Exact sum for the mixture; tensor-product quadrature for continuous
    latents of dimension at most two.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if isinstance(model, GaussianMixtureModel):
        resp = gmm_responsibilities(model, theta_t, x)
        return float(np.sum(resp * model.log_joint(theta, x)))
    if getattr(model, "latent_kind", None) == "continuous":
        if model.latent_dim > 2:
            raise CapabilityError("quadrature Q-function supports k <= 2")
        grid = grid or make_grid(model.latent_dim)
        total = 0.0
        for xi in x:
            xs = np.broadcast_to(xi, (grid.nodes.shape[0], xi.shape[0]))
            log_norm = quadrature_log_marginal(model, theta_t, xi, grid)
            log_post = model.complete_loglik(theta_t, xs, grid.nodes) - log_norm
            total += float(np.sum(np.exp(log_post + grid.log_weights) * model.complete_loglik(theta, xs, grid.nodes)))
        return total
    raise CapabilityError(f"Q-function unavailable for {type(model).__name__}")


def q_function_lg_analytic(model: LinearGaussianModel, theta, theta_t, x) -> float:
    """Closed-form Gaussian expectation of the complete log-likelihood."""
    p = model.unpack(theta)
    d, k = model.data_dim, model.latent_dim
    total = 0.0
    for xi in np.atleast_2d(x):
        post = lg_posterior(model, theta_t, xi)
        r = xi - p.W @ post.mean - p.mu
        e_sq = r @ r + np.trace(p.W @ post.cov @ p.W.T)
        total += -0.5 * d * np.log(2 * np.pi * p.sigma2) - 0.5 * e_sq / p.sigma2
        total += -0.5 * k * np.log(2 * np.pi) - 0.5 * (post.mean @ post.mean + np.trace(post.cov))
    return float(total)


def conditional_entropy(model, theta_t, x) -> float:
    cond = _conditional(model, theta_t, x)
    if isinstance(model, GaussianMixtureModel):
        safe = np.where(cond > 0, cond, 1.0)
        return float(-np.sum(cond * np.log(safe)))
    return float(sum(c.entropy() for c in cond))


def conditional_kl(model, theta_t, theta, x) -> float:
    """Sum over rows of KL(p_{theta_t}(.|x) || p_theta(.|x))."""
    old = _conditional(model, theta_t, x)
    new = _conditional(model, theta, x)
    if isinstance(model, GaussianMixtureModel):
        safe_old = np.where(old > 0, old, 1.0)
        return float(np.sum(old * (np.log(safe_old) - np.log(new))))
    return float(sum(kl_gaussian(a.mean, a.cov, b.mean, b.cov) for a, b in zip(old, new)))


def regularized_q(model, theta, theta_t, x) -> float:
    """Observed log-likelihood minus the conditional KL penalty."""
    return observed_loglik(model, theta, x) - conditional_kl(model, theta_t, theta, x)


def regularized_q_via_entropy(model, theta, theta_t, x, grid: QuadGrid | None = None) -> float:
    """Same quantity through Q plus the entropy of the old conditional."""
    return q_function(model, theta, theta_t, x, grid) + conditional_entropy(model, theta_t, x)


# ---------------------------------------------------------------------------
# Driver


@dataclass
class EmTrace:
    iterates: list = field(default_factory=list)
    loglik: list = field(default_factory=list)
    kl_penalty: list = field(default_factory=list)
    q_star: list = field(default_factory=list)
    converged: bool = False

    @property
    def n_steps(self) -> int:
        return len(self.iterates) - 1


def run_em(
    model,
    theta0,
    data,
    max_iter: int = 500,
    tol: float = 1e-8,
    rng: RngStream | None = None,
    fixed_iterations: bool = False,
    callback=None,
) -> EmTrace:
    """Iterate exact EM, recording the log-likelihood and the KL penalty.

    Stops when ``|delta l_n| < tol * (1 + |l_n|)`` unless ``fixed_iterations``
    is set, in which case exactly ``max_iter`` steps run.
    """
    data = np.atleast_2d(np.asarray(data, dtype=float))
    if isinstance(model, GaussianMixtureModel):
        step = lambda th: em_step_gmm(model, th, data, rng)  # noqa: E731
    elif isinstance(model, LinearGaussianModel):
        step = lambda th: em_step_lg(model, th, data)  # noqa: E731
    else:
        raise CapabilityError(
            f"exact EM needs a tractable conditional; {type(model).__name__} has none "
            "(its E-step integral is intractable)"
        )
    theta = theta0
    trace = EmTrace(iterates=[theta], loglik=[observed_loglik(model, theta, data)])
    for it in range(max_iter):
        new = step(theta)
        ll_new = observed_loglik(model, new, data)
        kl = conditional_kl(model, theta, new, data)
        trace.iterates.append(new)
        trace.loglik.append(ll_new)
        trace.kl_penalty.append(kl)
        trace.q_star.append(ll_new - kl)
        if callback is not None:
            callback(it + 1, new, ll_new)
        delta = ll_new - trace.loglik[-2]
        theta = new
        if not fixed_iterations and abs(delta) < tol * (1.0 + abs(ll_new)):
            trace.converged = True
            break
    return trace

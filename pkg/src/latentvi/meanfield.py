"""Per-datum Gaussian mean-field variational inference.

Each datum x_i gets its own q_i(z) = N(alpha_i, diag(beta_i^2)). The ELBO is
estimated by reparameterized Monte Carlo plus the closed-form entropy, and
fitted with the nested scheme: a local ascent on every (alpha_i, beta_i),
then one ascent step on theta using the summed score-function gradient.

beta is stored as ``log_beta``; the chain rule to log space multiplies the
beta-gradient by beta.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, NumericalError
from .numkit import LOG_2PI, RngStream, entropy_gaussian_diag, mean_and_se
from .optim import make_optimizer


@dataclass
class MeanFieldParams:
    alpha: np.ndarray
    log_beta: np.ndarray

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=float)
        self.log_beta = np.asarray(self.log_beta, dtype=float)
        if self.alpha.shape != self.log_beta.shape:
            raise DomainError("alpha and log_beta must share a shape")

    @property
    def beta(self) -> np.ndarray:
        return np.exp(self.log_beta)

    @classmethod
    def standard(cls, k: int) -> "MeanFieldParams":
        return cls(np.zeros(k), np.zeros(k))

    def copy(self) -> "MeanFieldParams":
        return MeanFieldParams(self.alpha.copy(), self.log_beta.copy())


def _local_terms(model, theta, X, alpha, log_beta, eps):
    """Batched per-datum ELBO pieces.

    X (n, d), alpha/log_beta (n, k), eps (n, M, k). Returns per-draw
    complete log-likelihoods (n, M), the theta-gradient summed over data and
    averaged over draws, and (grad_alpha, grad_log_beta), each (n, k).
    """
    n, m, k = eps.shape
    beta = np.exp(log_beta)
    z = alpha[:, None, :] + beta[:, None, :] * eps
    xs = np.repeat(X, m, axis=0)
    vals, gtheta, gz = model.value_and_grads(theta, xs, z.reshape(n * m, k))
    vals = np.asarray(vals).reshape(n, m)
    gz = gz.reshape(n, m, k)
    g_alpha = gz.mean(axis=1)
    g_beta = (eps * gz).mean(axis=1) + 1.0 / beta
    return vals, gtheta / m, g_alpha, beta * g_beta


def _entropy_rows(log_beta):
    k = log_beta.shape[-1]
    return 0.5 * k * (LOG_2PI + 1.0) + log_beta.sum(axis=-1)


def _single(x, omega: MeanFieldParams):
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise DomainError("pass a single datum; use fit_vi for datasets")
    return x[None, :], omega.alpha[None, :], omega.log_beta[None, :]


def elbo_estimate(model, theta, omega: MeanFieldParams, x, n_draws: int, rng: RngStream, with_se: bool = False):
    """Reparameterized MC average of l(theta|x, z) plus the Gaussian entropy."""
    if n_draws < 1:
        raise DomainError("n_draws must be >= 1")
    X, a, lb = _single(x, omega)
    eps = rng.normal((1, n_draws, a.shape[1]))
    z = a[:, None, :] + np.exp(lb)[:, None, :] * eps
    vals = np.asarray(model.complete_loglik(theta, np.repeat(X, n_draws, axis=0), z[0]))
    est, se = mean_and_se(vals)
    est += entropy_gaussian_diag(omega.beta)
    return (est, se) if with_se else est


def grad_theta_elbo(model, theta, omega: MeanFieldParams, x, n_draws: int, rng: RngStream) -> np.ndarray:
    """MC average of the complete-data score at draws from q."""
    X, a, lb = _single(x, omega)
    eps = rng.normal((1, n_draws, a.shape[1]))
    return _local_terms(model, theta, X, a, lb, eps)[1]


def grad_omega_elbo(model, theta, omega: MeanFieldParams, x, n_draws: int, rng: RngStream):
    """Pathwise gradient in (alpha, log_beta), entropy included analytically."""
    X, a, lb = _single(x, omega)
    eps = rng.normal((1, n_draws, a.shape[1]))
    _, _, ga, glb = _local_terms(model, theta, X, a, lb, eps)
    return ga[0], glb[0]


def _ascend_local(model, theta, X, alpha, log_beta, steps, step_size, n_draws, rng, optimizer="sgd"):
    """Gradient ascent on every datum's (alpha, log_beta) at once."""
    k = alpha.shape[1]
    alpha = alpha.copy()
    log_beta = log_beta.copy()
    opt = make_optimizer(optimizer, step_size)
    for s in range(steps):
        eps = rng.normal((X.shape[0], n_draws, k))
        vals, _, ga, glb = _local_terms(model, theta, X, alpha, log_beta, eps)
        if not np.all(np.isfinite(vals)):
            raise NumericalError(
                f"ELBO estimate became non-finite at local step {s}",
                state={"alpha": alpha, "log_beta": log_beta, "step": s},
            )
        packed = opt.step(np.concatenate([alpha, log_beta], axis=1), np.concatenate([ga, glb], axis=1))
        alpha, log_beta = packed[:, :k], packed[:, k:]
    return alpha, log_beta


def fit_local(
    model,
    theta,
    x,
    omega_init: MeanFieldParams,
    steps: int,
    step_size: float,
    n_draws: int,
    rng: RngStream,
    optimizer: str = "sgd",
) -> MeanFieldParams:
    """Fixed-budget ascent towards the per-datum optimum omega*(x; theta)."""
    if steps < 1:
        raise DomainError("steps must be >= 1")
    X, a, lb = _single(x, omega_init)
    a, lb = _ascend_local(model, theta, X, a, lb, steps, step_size, n_draws, rng, optimizer)
    return MeanFieldParams(a[0], lb[0])


def elbo_gaussian_q_lg(model, theta, mean, cov, x) -> float:
    """ELBO with exact expectations for the linear Gaussian model and q = N(mean, cov)."""
    p = model.unpack(theta)
    d, k = model.data_dim, model.latent_dim
    mean = np.asarray(mean, dtype=float)
    cov = np.atleast_2d(cov)
    r = np.asarray(x, dtype=float) - p.W @ mean - p.mu
    e_lik = -0.5 * d * np.log(2 * np.pi * p.sigma2) - 0.5 * (r @ r + np.trace(p.W @ cov @ p.W.T)) / p.sigma2
    e_prior = -0.5 * k * LOG_2PI - 0.5 * (mean @ mean + np.trace(cov))
    sign, logdet = np.linalg.slogdet(cov)
    entropy = 0.5 * k * (LOG_2PI + 1.0) + 0.5 * logdet
    return float(e_lik + e_prior + entropy)


@dataclass
class ViConfig:
    outer_iters: int = 200
    step_theta: float = 1e-2
    step_omega: float = 1e-2
    n_draws: int = 8
    first_local_steps: int = 200
    local_steps: int = 25
    optimizer: str = "sgd"


@dataclass
class ViState:
    theta: np.ndarray
    alpha: np.ndarray
    log_beta: np.ndarray
    config: ViConfig
    trace: list = field(default_factory=list)

    @property
    def omegas(self) -> list[MeanFieldParams]:
        return [MeanFieldParams(a, b) for a, b in zip(self.alpha, self.log_beta)]


def fit_vi(model, data, theta0, config: ViConfig, rng: RngStream, callback=None) -> ViState:
    """Nested VI: refresh every local omega_i, then one ascent step on theta.

    The first refresh runs ``first_local_steps`` from N(0, I); later ones are
    warm-started with ``local_steps``. ``trace`` holds (iteration, total ELBO
    estimate at the pre-update theta).
    """
    data = np.atleast_2d(np.asarray(data, dtype=float))
    n = data.shape[0]
    k = model.latent_dim
    alpha = np.zeros((n, k))
    log_beta = np.zeros((n, k))
    theta = np.asarray(theta0, dtype=float).copy()
    opt = make_optimizer(config.optimizer, config.step_theta)
    state = ViState(theta, alpha, log_beta, config)
    for it in range(config.outer_iters):
        local_rng = rng.spawn(2 * it)
        budget = config.first_local_steps if it == 0 else config.local_steps
        alpha, log_beta = _ascend_local(
            model, theta, data, alpha, log_beta, budget, config.step_omega, config.n_draws, local_rng, config.optimizer
        )
        eps = rng.spawn(2 * it + 1).normal((n, config.n_draws, k))
        vals, gtheta, _, _ = _local_terms(model, theta, data, alpha, log_beta, eps)
        total = float(vals.mean(axis=1).sum() + _entropy_rows(log_beta).sum())
        if not np.isfinite(total) or not np.all(np.isfinite(gtheta)):
            raise NumericalError(f"total ELBO became non-finite at iteration {it}", state={"theta": theta})
        state.trace.append((it, total))
        if callback is not None:
            callback(it, theta, total)
        theta = opt.step(theta, gtheta / n)
    state.theta, state.alpha, state.log_beta = theta, alpha, log_beta
    return state

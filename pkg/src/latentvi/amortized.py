"""Amortized variational inference: a shared encoder q_phi(z|x).

The encoder is one MLP with two output heads. In diagonal mode the heads are
the mean eta(x) and log delta^2(x) (clamped). In full mode the second head
holds the k(k+1)/2 entries of a lower-triangular factor L(x), row-major, with
the diagonal stored as log L_jj so that L stays a valid Cholesky factor.

Samples are z = eta + L eps. The entropy of q is handled in closed form, so
its gradient is +1/2 grad log det Omega = grad sum_j log L_jj.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffnet
from .diffnet import MlpParams, MlpSpec
from .errors import DimensionError, DomainError, NumericalError
from .meanfield import MeanFieldParams, elbo_estimate, fit_local
from .numkit import LOG_2PI, GaussianDense, GaussianDiag, RngStream, mean_and_se
from .optim import make_optimizer

ENCODER_MODES = ("diag", "full")


class Encoder:
    """Encoder topology plus helpers to map network outputs to (eta, L)."""

    def __init__(self, data_dim: int, latent_dim: int, hidden=(16,), activation: str = "tanh", mode: str = "diag"):
        if mode not in ENCODER_MODES:
            raise DomainError(f"encoder mode must be one of {ENCODER_MODES}")
        self.data_dim = int(data_dim)
        self.latent_dim = int(latent_dim)
        self.mode = mode
        k = self.latent_dim
        second = k if mode == "diag" else k * (k + 1) // 2
        self.spec = MlpSpec((self.data_dim, *tuple(hidden), k + second), activation, heads=(k, second))
        self._rows, self._cols = np.tril_indices(k)
        self._diag_pos = np.flatnonzero(self._rows == self._cols)

    @property
    def n_params(self) -> int:
        return self.spec.n_params

    def init_phi(self, rng: RngStream) -> np.ndarray:
        return diffnet.init_params(self.spec, rng).flat

    def describe(self) -> dict:
        return {"mode": self.mode, **self.spec.describe()}

    def _factor(self, head):
        """Batched (L, log-diagonal, unclamped mask) from the second head."""
        n, k = head.shape[0], self.latent_dim
        if self.mode == "diag":
            logvar, free = diffnet.clamp_logvar(head)
            logd = 0.5 * logvar
            L = np.zeros((n, k, k))
            L[:, np.arange(k), np.arange(k)] = np.exp(logd)
            return L, logd, free
        raw_diag = head[:, self._diag_pos]
        logd, free = diffnet.clamp_logvar(raw_diag)
        vals = head.copy()
        vals[:, self._diag_pos] = np.exp(logd)
        L = np.zeros((n, k, k))
        L[:, self._rows, self._cols] = vals
        return L, logd, free

    def outputs(self, phi, X):
        """Batched (eta (n, k), L (n, k, k), log-diagonal (n, k))."""
        out = diffnet.mlp_forward(MlpParams(self.spec, phi), np.atleast_2d(X))
        eta, head = self.spec.split_heads(out)
        L, logd, _ = self._factor(head)
        return eta, L, logd

    def set_linear(self, mean_weight, mean_bias, factor_bias) -> np.ndarray:
        """phi for a hidden-layer-free encoder: eta = A x + c, constant second head.

        ``factor_bias`` is the raw second-head value: log-variances in diagonal
        mode, the packed factor (log diagonal) in full mode.
        """
        if len(self.spec.layer_sizes) != 2:
            raise DomainError("set_linear needs an encoder without hidden layers")
        k, d = self.latent_dim, self.data_dim
        second = self.spec.heads[1]
        w = np.zeros((k + second, d))
        w[:k] = np.asarray(mean_weight, dtype=float).reshape(k, d)
        b = np.concatenate([np.asarray(mean_bias, dtype=float).ravel(), np.asarray(factor_bias, dtype=float).ravel()])
        if b.shape != (k + second,):
            raise DimensionError("bias sizes do not match the encoder heads")
        return np.concatenate([w.ravel(), b])


def encode(encoder: Encoder, phi, x):
    """q_phi(.|x) for one datum: GaussianDiag in diagonal mode, GaussianDense otherwise."""
    x = np.asarray(x, dtype=float)
    if x.shape != (encoder.data_dim,):
        raise DimensionError(f"x must have length {encoder.data_dim}")
    eta, L, logd = encoder.outputs(phi, x[None, :])
    if encoder.mode == "diag":
        return GaussianDiag(eta[0], np.exp(logd[0]))
    return GaussianDense(eta[0], L[0] @ L[0].T)


def _entropy(logd):
    k = logd.shape[-1]
    return 0.5 * k * (LOG_2PI + 1.0) + logd.sum(axis=-1)


def elbo_a_estimate(model, theta, encoder: Encoder, phi, x, n_draws: int, rng: RngStream, with_se: bool = False):
    """MC average of l(theta|x, eta + L eps) plus the closed-form entropy of q_phi(.|x)."""
    if n_draws < 1:
        raise DomainError("n_draws must be >= 1")
    x = np.asarray(x, dtype=float)
    eta, L, logd = encoder.outputs(phi, x[None, :])
    eps = rng.normal((n_draws, encoder.latent_dim))
    z = eta[0] + eps @ L[0].T
    vals = np.asarray(model.complete_loglik(theta, np.repeat(x[None, :], n_draws, axis=0), z))
    est, se = mean_and_se(vals)
    est += float(_entropy(logd[0]))
    return (est, se) if with_se else est


def _joint_terms(model, theta, encoder: Encoder, phi, X, eps):
    """Per-datum ELBO_A values (n,) and batch-mean gradients in theta and phi.

    eps has shape (n, M, k).
    """
    n, m, k = eps.shape
    params = MlpParams(encoder.spec, phi)
    cache = {}

    def cotangent(out):
        eta, head = encoder.spec.split_heads(out)
        L, logd, free = encoder._factor(head)
        z = eta[:, None, :] + np.einsum("nij,nmj->nmi", L, eps)
        vals, gtheta, gz = model.value_and_grads(theta, np.repeat(X, m, axis=0), z.reshape(n * m, k))
        gz = gz.reshape(n, m, k)
        cache["vals"] = np.asarray(vals).reshape(n, m).mean(axis=1) + _entropy(logd)
        cache["gtheta"] = gtheta / (n * m)
        g_eta = gz.mean(axis=1)
        g_L = np.einsum("nmi,nmj->nij", gz, eps) / m
        diag = np.exp(logd)
        if encoder.mode == "diag":
            # L_jj = exp(logvar_j / 2)
            g_head = (0.5 * diag * g_L[:, np.arange(k), np.arange(k)] + 0.5) * free
        else:
            g_head = g_L[:, encoder._rows, encoder._cols].copy()
            dpos = encoder._diag_pos
            g_head[:, dpos] = (diag * g_head[:, dpos] + 1.0) * free
        return np.concatenate([g_eta, g_head], axis=1) / n

    _, gphi, _ = diffnet.forward_and_grad(params, X, cotangent)
    return cache["vals"], cache["gtheta"], gphi


def grad_joint(model, theta, encoder: Encoder, phi, batch, n_draws: int, rng: RngStream):
    """(grad_theta, grad_phi) of the batch-mean amortized ELBO."""
    X = np.atleast_2d(np.asarray(batch, dtype=float))
    if X.shape[0] == 0:
        raise DomainError("batch must be non-empty")
    eps = rng.normal((X.shape[0], n_draws, encoder.latent_dim))
    _, gtheta, gphi = _joint_terms(model, theta, encoder, phi, X, eps)
    return gtheta, gphi


@dataclass
class VaeConfig:
    epochs: int = 200
    batch_size: int = 64
    step_theta: float = 1e-2
    step_phi: float = 1e-2
    n_draws: int = 8
    optimizer: str = "sgd"


@dataclass
class VaeState:
    theta: np.ndarray
    phi: np.ndarray
    encoder: Encoder
    config: VaeConfig
    trace: list = field(default_factory=list)


def train_vae(model, data, encoder: Encoder, theta0, phi0, config: VaeConfig, rng: RngStream, callback=None) -> VaeState:
    """Minibatch stochastic ascent on (theta, phi) simultaneously.

    Each epoch visits a seeded permutation of the data in batches drawn
    without replacement. ``trace`` holds (epoch, total ELBO_A estimate),
    accumulated over the epoch's batches at the pre-update parameters.
    """
    data = np.atleast_2d(np.asarray(data, dtype=float))
    n = data.shape[0]
    theta = np.asarray(theta0, dtype=float).copy()
    phi = np.asarray(phi0, dtype=float).copy()
    opt_theta = make_optimizer(config.optimizer, config.step_theta)
    opt_phi = make_optimizer(config.optimizer, config.step_phi)
    state = VaeState(theta, phi, encoder, config)
    for epoch in range(config.epochs):
        epoch_rng = rng.spawn(epoch)
        order = epoch_rng.spawn(0).permutation(n)
        noise = epoch_rng.spawn(1)
        total = 0.0
        for start in range(0, n, config.batch_size):
            X = data[order[start : start + config.batch_size]]
            eps = noise.normal((X.shape[0], config.n_draws, encoder.latent_dim))
            vals, gtheta, gphi = _joint_terms(model, theta, encoder, phi, X, eps)
            if not (np.all(np.isfinite(vals)) and np.all(np.isfinite(gtheta)) and np.all(np.isfinite(gphi))):
                state.theta, state.phi = theta, phi
                raise NumericalError(
                    f"amortized ELBO became non-finite in epoch {epoch}",
                    state={"theta": theta, "phi": phi, "epoch": epoch},
                )
            total += float(vals.sum())
            theta = opt_theta.step(theta, gtheta)
            phi = opt_phi.step(phi, gphi)
        state.trace.append((epoch, total))
        if callback is not None:
            callback(epoch, theta, phi, total)
    state.theta, state.phi = theta, phi
    return state


@dataclass
class GapResult:
    gap: float
    se: float
    elbo_local: float
    elbo_amortized: float
    budget: int


def amortization_gap(
    model,
    theta,
    encoder: Encoder,
    phi,
    x,
    rng: RngStream,
    budget: int = 500,
    step_size: float = 1e-2,
    fit_draws: int = 64,
    eval_draws: int = 1024,
) -> GapResult:
    """ELBO at the refined per-datum optimum minus the amortized ELBO.

    The local fit starts from encode(phi, x) (diagonal part of the factor in
    full mode). The two ELBO terms use independent streams, so the reported
    SE combines both.
    """
    if encoder.latent_dim != model.latent_dim:
        raise DimensionError("encoder and model latent sizes differ")
    x = np.asarray(x, dtype=float)
    eta, L, _ = encoder.outputs(phi, x[None, :])
    std = np.sqrt(np.sum(L[0] ** 2, axis=1))
    start = MeanFieldParams(eta[0], np.log(std))
    omega = fit_local(model, theta, x, start, budget, step_size, fit_draws, rng.spawn(0))
    e_local, se_local = elbo_estimate(model, theta, omega, x, eval_draws, rng.spawn(1), with_se=True)
    e_amort, se_amort = elbo_a_estimate(model, theta, encoder, phi, x, eval_draws, rng.spawn(2), with_se=True)
    return GapResult(e_local - e_amort, float(np.hypot(se_local, se_amort)), e_local, e_amort, budget)

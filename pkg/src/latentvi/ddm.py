"""Denoising diffusion models with a fixed variance schedule.

Time indices are 1-based throughout, matching the forward chain
Y_t = sqrt(phi_t) Y_{t-1} + sqrt(1 - phi_t) E_t for t = 1..T. Schedule arrays
are stored 0-based, so ``phi[t - 1]`` is phi_t.

The reverse model is p(y_{t-1} | y_t) = N(mu(y_t, t), sigma2_t I) with the
mean written through a shared noise predictor Psi(y_t, t):
mu = y_t / sqrt(phi_t) - (1 - phi_t) / (sqrt(phi_t) b_t) * Psi.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffnet
from .diffnet import MlpParams, MlpSpec
from .errors import ConfigError, DimensionError, DomainError, NumericalError
from .numkit import LOG_2PI, RngStream, mean_and_se
from .optim import make_optimizer
from .report import TrainReport

SCHEDULE_KINDS = ("linear", "constant")


@dataclass(frozen=True)
class VarianceSchedule:
    phi: np.ndarray

    def __post_init__(self):
        phi = np.asarray(self.phi, dtype=float)
        if phi.ndim != 1 or phi.size < 1:
            raise ConfigError("a schedule needs at least one step")
        if np.any(~((phi > 0) & (phi < 1))):
            raise ConfigError("every phi_t must lie in (0, 1)")
        object.__setattr__(self, "phi", phi)
        cum = np.cumprod(phi)
        object.__setattr__(self, "a", np.sqrt(cum))
        object.__setattr__(self, "b", np.sqrt(1.0 - cum))
        b2_prev = np.concatenate([[0.0], 1.0 - cum[:-1]])
        tilde = (1.0 - phi) * b2_prev / (1.0 - cum)
        object.__setattr__(self, "tilde_sigma2", tilde)
        sigma2 = tilde.copy()
        sigma2[0] = 1.0 - phi[0]
        object.__setattr__(self, "sigma2", sigma2)

    @property
    def T(self) -> int:
        return self.phi.size

    def check_t(self, t: int, lowest: int = 1):
        if not (lowest <= t <= self.T):
            raise DomainError(f"t must lie in [{lowest}, {self.T}], got {t}")

    def a_prev(self, t):
        """a_{t-1} with a_0 = 1."""
        t = np.asarray(t)
        return np.where(t > 1, self.a[np.maximum(t - 2, 0)], 1.0)

    def b2_prev(self, t):
        """b_{t-1}^2 with b_0 = 0."""
        t = np.asarray(t)
        return np.where(t > 1, self.b[np.maximum(t - 2, 0)] ** 2, 0.0)

    def describe(self) -> dict:
        return {"T": self.T, "phi": self.phi.tolist()}


def schedule_make(kind: str, T: int, phi_start: float = 0.999, phi_end: float = 0.95, phi: float = 0.9) -> VarianceSchedule:
    """``linear`` interpolates phi_1 = phi_start to phi_T = phi_end; ``constant`` uses ``phi``."""
    if T < 1:
        raise ConfigError("T must be >= 1")
    if kind == "linear":
        return VarianceSchedule(np.linspace(phi_start, phi_end, T))
    if kind == "constant":
        return VarianceSchedule(np.full(T, float(phi)))
    raise ConfigError(f"unknown schedule kind {kind!r}; expected one of {SCHEDULE_KINDS}")


# ---------------------------------------------------------------------------
# Forward process


def forward_step(y_prev, t: int, schedule: VarianceSchedule, rng: RngStream | None = None, noise=None):
    """One AR(1) step. Pass ``noise`` to inject E_t instead of drawing it."""
    schedule.check_t(t)
    y_prev = np.asarray(y_prev, dtype=float)
    if noise is None:
        noise = rng.normal(y_prev.shape)
    phi = schedule.phi[t - 1]
    return np.sqrt(phi) * y_prev + np.sqrt(1.0 - phi) * np.asarray(noise, dtype=float)


def forward_jump(y0, t: int, schedule: VarianceSchedule, rng: RngStream | None = None, noise=None):
    """Y_t | y_0 ~ N(a_t y_0, b_t^2 I) in one draw."""
    schedule.check_t(t)
    y0 = np.asarray(y0, dtype=float)
    if noise is None:
        noise = rng.normal(y0.shape)
    return schedule.a[t - 1] * y0 + schedule.b[t - 1] * np.asarray(noise, dtype=float)


def sample_trajectories(y0, schedule: VarianceSchedule, n_paths: int, rng: RngStream) -> np.ndarray:
    """(n_paths, T + 1, d) forward trajectories started at y0 (row 0 is y0)."""
    y0 = np.asarray(y0, dtype=float)
    out = np.empty((n_paths, schedule.T + 1, y0.size))
    out[:, 0] = y0
    noise = rng.normal((n_paths, schedule.T, y0.size))
    for t in range(1, schedule.T + 1):
        out[:, t] = forward_step(out[:, t - 1], t, schedule, noise=noise[:, t - 1])
    return out


def posterior_params(y_t, y0, t: int, schedule: VarianceSchedule):
    """Mean and variance of q(y_{t-1} | y_t, y_0) for 2 <= t <= T."""
    if t == 1:
        raise DomainError("t = 1 is degenerate: y_0 is observed")
    schedule.check_t(t, lowest=2)
    phi = schedule.phi[t - 1]
    b2 = schedule.b[t - 1] ** 2
    b2p = schedule.b[t - 2] ** 2
    ap = schedule.a[t - 2]
    mu = (np.sqrt(phi) * b2p / b2) * np.asarray(y_t, dtype=float) + (ap * (1.0 - phi) / b2) * np.asarray(y0, dtype=float)
    return mu, float(schedule.tilde_sigma2[t - 1])


def mu_from_psi(psi_out, y_t, t, schedule: VarianceSchedule):
    """Reverse mean from the predicted noise; ``t`` may be an integer array matching rows."""
    t = np.asarray(t)
    phi = schedule.phi[t - 1]
    b = schedule.b[t - 1]
    if t.ndim:
        phi, b = phi[:, None], b[:, None]
    return np.asarray(y_t) / np.sqrt(phi) - (1.0 - phi) / (np.sqrt(phi) * b) * np.asarray(psi_out)


def psi_from_mu(mu, y_t, t, schedule: VarianceSchedule):
    """Inverse of :func:`mu_from_psi`."""
    t = np.asarray(t)
    phi = schedule.phi[t - 1]
    b = schedule.b[t - 1]
    if t.ndim:
        phi, b = phi[:, None], b[:, None]
    return (np.asarray(y_t) / np.sqrt(phi) - np.asarray(mu)) * np.sqrt(phi) * b / (1.0 - phi)


def loss_weights(schedule: VarianceSchedule) -> np.ndarray:
    """w_t = (1 - phi_t)^2 / (2 sigma2_t phi_t b_t^2), t = 1..T."""
    phi, b = schedule.phi, schedule.b
    return (1.0 - phi) ** 2 / (2.0 * schedule.sigma2 * phi * b**2)


# ---------------------------------------------------------------------------
# Noise predictor


class NoisePredictor:
    """Shared net Psi(y, t) on the input (y, t/T, sin(2 pi t/T))."""

    def __init__(self, data_dim: int, T: int, hidden=(32, 32), activation: str = "tanh"):
        self.data_dim = int(data_dim)
        self.T = int(T)
        self.spec = MlpSpec((self.data_dim + 2, *tuple(hidden), self.data_dim), activation)

    @property
    def n_params(self) -> int:
        return self.spec.n_params

    def init_theta(self, rng: RngStream) -> np.ndarray:
        return diffnet.init_params(self.spec, rng).flat

    def describe(self) -> dict:
        return {"T": self.T, **self.spec.describe()}

    def features(self, y, t) -> np.ndarray:
        y = np.atleast_2d(np.asarray(y, dtype=float))
        t = np.broadcast_to(np.asarray(t, dtype=float), (y.shape[0],))
        s = t / self.T
        return np.column_stack([y, s, np.sin(2 * np.pi * s)])

    def __call__(self, theta, y, t) -> np.ndarray:
        return diffnet.mlp_forward(MlpParams(self.spec, theta), self.features(y, t))

    def vjp(self, theta, y, t, cotangent):
        """Parameter gradient of <cotangent, Psi(y, t)>, summed over rows."""
        return diffnet.mlp_grad(MlpParams(self.spec, theta), self.features(y, t), cotangent)[0]


def _check_net(net: NoisePredictor, schedule: VarianceSchedule):
    if net.T != schedule.T:
        raise DimensionError(f"predictor built for T={net.T}, schedule has T={schedule.T}")


# ---------------------------------------------------------------------------
# ELBO


def _reverse_logpdf_terms(net, theta, schedule, paths):
    """log p(Y_{t-1} | Y_t) for every path and t, plus what the gradient needs."""
    m, T1, d = paths.shape
    T = T1 - 1
    t = np.tile(np.arange(1, T + 1), m)
    y_t = paths[:, 1:].reshape(m * T, d)
    y_prev = paths[:, :-1].reshape(m * T, d)
    mu = mu_from_psi(net(theta, y_t, t), y_t, t, schedule)
    s2 = schedule.sigma2[t - 1]
    r = y_prev - mu
    logp = -0.5 * (d * np.log(2 * np.pi * s2) + np.sum(r * r, axis=1) / s2)
    return logp.reshape(m, T), (t, y_t, r, s2)


def term_a(net, theta, schedule, y0, n_paths: int, rng: RngStream, with_se: bool = False):
    """MC estimate of E log p(y_0 | Y_1) + sum_{t>=2} E log p(Y_{t-1} | Y_t) over fresh trajectories."""
    _check_net(net, schedule)
    paths = sample_trajectories(y0, schedule, n_paths, rng)
    logp, _ = _reverse_logpdf_terms(net, theta, schedule, paths)
    est, se = mean_and_se(logp.sum(axis=1))
    return (est, se) if with_se else est


def term_b(schedule: VarianceSchedule, y0) -> float:
    """E log p(Y_T) without the -d/2 log 2 pi constant."""
    y0 = np.asarray(y0, dtype=float)
    prod = schedule.a[-1] ** 2
    return float(-0.5 * (y0 @ y0) * prod - 0.5 * y0.size * (1.0 - prod))


def term_c(schedule: VarianceSchedule, d: int) -> float:
    """-(d/2) sum log(1 - phi_t), the schedule-only term as it enters the refined ELBO."""
    return float(-0.5 * d * np.sum(np.log1p(-schedule.phi)))


def elbo_refined(net, theta, schedule, y0, n_paths: int, rng: RngStream, with_se: bool = False):
    """Term (A) estimate plus the closed-form terms (B) and (C), constants dropped."""
    y0 = np.asarray(y0, dtype=float)
    a, se = term_a(net, theta, schedule, y0, n_paths, rng, with_se=True)
    est = a + term_b(schedule, y0) + term_c(schedule, y0.size)
    return (est, se) if with_se else est


def elbo_full(net, theta, schedule, y0, n_paths: int, rng: RngStream, with_se: bool = False):
    """The complete lower bound E log p(y_0, Y_{1:T}) - E log q(Y_{1:T} | y_0), all constants kept.

    The forward-process entropy enters with a plus sign here, which is what
    makes this a bound on log p(y_0).
    """
    y0 = np.asarray(y0, dtype=float)
    d = y0.size
    a, se = term_a(net, theta, schedule, y0, n_paths, rng, with_se=True)
    b = term_b(schedule, y0) - 0.5 * d * LOG_2PI
    entropy = 0.5 * d * np.sum(np.log(2 * np.pi * np.e * (1.0 - schedule.phi)))
    est = a + b + float(entropy)
    return (est, se) if with_se else est


def grad_trajectory(net, theta, schedule, y0, n_paths: int, rng: RngStream) -> np.ndarray:
    """(1/M) sum_m sum_t grad_theta log p(Y_{t-1}^(m) | Y_t^(m)) over fresh trajectories."""
    _check_net(net, schedule)
    paths = sample_trajectories(y0, schedule, n_paths, rng)
    return grad_trajectory_on(net, theta, schedule, paths)


def grad_trajectory_on(net, theta, schedule, paths) -> np.ndarray:
    """Same as :func:`grad_trajectory` on given trajectories (frozen-path checks)."""
    _, (t, y_t, r, s2) = _reverse_logpdf_terms(net, theta, schedule, paths)
    phi, b = schedule.phi[t - 1], schedule.b[t - 1]
    dmu_dpsi = -(1.0 - phi) / (np.sqrt(phi) * b)
    cot = (r / s2[:, None]) * dmu_dpsi[:, None]
    return net.vjp(theta, y_t, t, cot) / paths.shape[0]


# ---------------------------------------------------------------------------
# Simplified objective


def draw_noise_pairs(y0_batch, K: int, schedule: VarianceSchedule, rng: RngStream):
    """K draws of (U, E) per datum and the matching Y_U = a_U y_0 + b_U E, rows datum-major."""
    Y0 = np.atleast_2d(np.asarray(y0_batch, dtype=float))
    n, d = Y0.shape
    u = rng.spawn(0).integers(1, schedule.T + 1, size=n * K)
    e = rng.spawn(1).normal((n * K, d))
    y0r = np.repeat(Y0, K, axis=0)
    y_t = schedule.a[u - 1][:, None] * y0r + schedule.b[u - 1][:, None] * e
    return u, e, y_t


def simple_loss_and_grad(net, theta, y0_batch, K: int, schedule, rng: RngStream, weighted: bool = False, psi_override=None):
    """Mean of w * ||Psi(a_U y_0 + b_U E, U) - E||^2 and its theta-gradient.

    ``psi_override(y_t, u, e)`` replaces the network (oracle injection); the
    gradient is then None.
    """
    if K < 1:
        raise DomainError("K must be >= 1")
    _check_net(net, schedule)
    u, e, y_t = draw_noise_pairs(y0_batch, K, schedule, rng)
    w = loss_weights(schedule)[u - 1] if weighted else np.ones(u.size)
    if psi_override is not None:
        r = np.asarray(psi_override(y_t, u, e)) - e
        return float(np.mean(w * np.sum(r * r, axis=1))), None
    params = MlpParams(net.spec, theta)
    feats = net.features(y_t, u)
    n = u.size
    out, grad, _ = diffnet.forward_and_grad(params, feats, lambda o: 2.0 * w[:, None] * (o - e) / n)
    r = out - e
    return float(np.mean(w * np.sum(r * r, axis=1))), grad


def simple_loss(net, theta, y0_batch, K: int, schedule, rng: RngStream, weighted: bool = False, psi_override=None) -> float:
    return simple_loss_and_grad(net, theta, y0_batch, K, schedule, rng, weighted, psi_override)[0]


def simple_loss_per_draw(net, theta, y0_batch, K: int, schedule, rng: RngStream, weighted: bool = False) -> np.ndarray:
    """Individual w * ||Psi - E||^2 terms, for standard errors."""
    u, e, y_t = draw_noise_pairs(y0_batch, K, schedule, rng)
    w = loss_weights(schedule)[u - 1] if weighted else np.ones(u.size)
    r = net(theta, y_t, u) - e
    return w * np.sum(r * r, axis=1)


# ---------------------------------------------------------------------------
# Training and sampling


@dataclass
class DdmConfig:
    epochs: int = 200
    batch_size: int = 64
    step_size: float = 1e-3
    draws_per_datum: int = 1
    optimizer: str = "adam"
    diagnostic_every: int = 0
    diagnostic_samples: int = 1000


def train_ddm(net, schedule, data, theta0, config: DdmConfig, rng: RngStream, seed: int = 0, record_wall_time: bool = False):
    """Minibatch descent on the unweighted simple loss.

    Logs the mean loss per epoch. For d <= 2 and ``diagnostic_every`` > 0 the
    report also notes sample mean and variance of reverse draws.
    """
    _check_net(net, schedule)
    data = np.atleast_2d(np.asarray(data, dtype=float))
    n = data.shape[0]
    theta = np.asarray(theta0, dtype=float).copy()
    opt = make_optimizer(config.optimizer, config.step_size)
    report = TrainReport(seed=seed, record_wall_time=record_wall_time)
    for epoch in range(config.epochs):
        epoch_rng = rng.spawn(epoch)
        order = epoch_rng.spawn(0).permutation(n)
        losses = []
        for j, start in enumerate(range(0, n, config.batch_size)):
            batch = data[order[start : start + config.batch_size]]
            loss, grad = simple_loss_and_grad(net, theta, batch, config.draws_per_datum, schedule, epoch_rng.spawn(j + 1))
            if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
                raise NumericalError(f"simple loss became non-finite in epoch {epoch}", state={"theta": theta, "epoch": epoch})
            losses.append(loss)
            theta = opt.step(theta, -grad)
        report.log(epoch, float(np.mean(losses)))
        if config.diagnostic_every and data.shape[1] <= 2 and (epoch + 1) % config.diagnostic_every == 0:
            s = sample_reverse(net, theta, schedule, config.diagnostic_samples, rng.spawn(10**9 + epoch))
            report.note(epoch, sample_mean=s.mean(axis=0).tolist(), sample_var=s.var(axis=0, ddof=1).tolist())
    return theta, report


def sample_reverse(net, theta, schedule: VarianceSchedule, n: int, rng: RngStream, psi_fn=None) -> np.ndarray:
    """Ancestral sampling from N(0, I); the final t = 1 step returns the mean.

    ``psi_fn(y_t, t)`` replaces the network when given.
    """
    if psi_fn is None:
        _check_net(net, schedule)
    d = net.data_dim
    y = rng.spawn(0).normal((n, d))
    noise = rng.spawn(1)
    for t in range(schedule.T, 0, -1):
        psi = psi_fn(y, t) if psi_fn is not None else net(theta, y, t)
        mu = mu_from_psi(psi, y, t, schedule)
        if t == 1:
            return mu
        y = mu + np.sqrt(schedule.sigma2[t - 1]) * noise.normal((n, d))
    return y

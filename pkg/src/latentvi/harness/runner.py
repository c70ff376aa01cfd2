"""Training, evaluation and sampling runs driven by a :class:`RunConfig`."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import amortized, ddm, em, meanfield
from ..errors import CapabilityError, ConfigError, DimensionError, NumericalError
from ..models import (
    GaussianMixtureModel,
    GmmParams,
    LgParams,
    LinearGaussianModel,
    NonlinearGaussianModel,
    lg_log_marginal,
)
from ..numkit import RngStream, logsumexp, make_grid
from ..report import TrainReport
from . import io
from .config import RunConfig
from .data import read_csv, write_csv


@dataclass
class RunResult:
    report: TrainReport
    descriptor: dict
    blocks: dict
    files: dict


# ---------------------------------------------------------------------------
# Models and oracles


def build_model(cfg: RunConfig, d: int):
    m = cfg["model"]
    kind = m["kind"]
    if kind == "gmm":
        return GaussianMixtureModel(m["components"], d)
    if kind == "linear_gaussian":
        return LinearGaussianModel(d, m["latent_dim"])
    if kind == "nonlinear_gaussian":
        return NonlinearGaussianModel(d, m["latent_dim"], m["hidden"], m["activation"])
    raise CapabilityError(f"model kind {kind!r} has no decoder model")


def model_descriptor(model) -> dict:
    if isinstance(model, GaussianMixtureModel):
        return {"kind": "gmm", "components": model.n_components, "data_dim": model.data_dim}
    if isinstance(model, LinearGaussianModel):
        return {"kind": "linear_gaussian", "data_dim": model.data_dim, "latent_dim": model.latent_dim}
    return {
        "kind": "nonlinear_gaussian",
        "data_dim": model.data_dim,
        "latent_dim": model.latent_dim,
        "mean_net": model.mean_spec.describe(),
        "logvar_net": model.logvar_spec.describe(),
    }


def model_from_descriptor(desc: dict):
    kind = desc["kind"]
    if kind == "gmm":
        return GaussianMixtureModel(desc["components"], desc["data_dim"])
    if kind == "linear_gaussian":
        return LinearGaussianModel(desc["data_dim"], desc["latent_dim"])
    if kind == "nonlinear_gaussian":
        spec = desc["mean_net"]
        hidden = tuple(spec["layer_sizes"][1:-1])
        return NonlinearGaussianModel(desc["data_dim"], desc["latent_dim"], hidden, spec["activation"])
    raise ConfigError(f"unknown model kind {kind!r} in checkpoint")


def nonlinear_loglik_quadrature(model: NonlinearGaussianModel, theta, X, n_nodes: int = 201) -> np.ndarray:
    """Per-datum log p(x) by Gauss-Legendre quadrature, vectorised over data (k = 1 only)."""
    if model.latent_dim != 1:
        raise CapabilityError("batched quadrature oracle is limited to k = 1")
    grid = make_grid(1, n_nodes)
    n, g = X.shape[0], grid.nodes.shape[0]
    vals = model.complete_loglik(theta, np.repeat(X, g, axis=0), np.tile(grid.nodes, (n, 1)))
    return logsumexp(np.asarray(vals).reshape(n, g) + grid.log_weights[None, :], axis=1)


def oracle_loglik(model, theta, X) -> float | None:
    """Exact observed log-likelihood where the model permits it, else None."""
    if isinstance(model, GaussianMixtureModel):
        return em.observed_loglik(model, theta, X)
    if isinstance(model, LinearGaussianModel):
        return float(np.sum(lg_log_marginal(model, theta, X)))
    if isinstance(model, NonlinearGaussianModel) and model.latent_dim == 1:
        return float(np.sum(nonlinear_loglik_quadrature(model, theta, X)))
    return None


def init_theta(model, X, rng: RngStream):
    if isinstance(model, GaussianMixtureModel):
        return em.init_gmm(X, model.n_components, rng)
    if isinstance(model, LinearGaussianModel):
        W = 0.1 * rng.normal((model.data_dim, model.latent_dim))
        return model.pack(LgParams(W, X.mean(axis=0), float(X.var(axis=0).mean())))
    return model.init_theta(rng)


def theta_blocks(model, theta) -> dict:
    if isinstance(model, GaussianMixtureModel):
        return {"means": theta.means, "variances": theta.variances, "weights": theta.weights}
    return {"theta": theta}


def theta_from_blocks(model, blocks):
    if isinstance(model, GaussianMixtureModel):
        K, d = model.n_components, model.data_dim
        return GmmParams(blocks["means"].reshape(K, d), blocks["variances"].reshape(K, d), blocks["weights"])
    return blocks["theta"]


def _load_data(cfg: RunConfig) -> np.ndarray:
    path = cfg.data_path()
    if path is None:
        raise ConfigError("run.data must name a dataset CSV")
    return read_csv(path)


def _schedule(cfg: RunConfig):
    s = cfg["schedule"]
    return ddm.schedule_make(s["kind"], s["T"], s["phi_start"], s["phi_end"], s["phi"])


# ---------------------------------------------------------------------------
# Training


def _train_em(cfg, X, rng, report):
    model = build_model(cfg, X.shape[1])
    if isinstance(model, NonlinearGaussianModel):
        raise CapabilityError(
            f"{cfg.method} needs the conditional p(z | x), which is intractable for the nonlinear "
            "Gaussian model; use method vi or vae"
        )
    opt = cfg["optimizer"]
    theta0 = init_theta(model, X, rng.spawn(0))
    report.log(0, em.observed_loglik(model, theta0, X), oracle_loglik(model, theta0, X))
    if cfg.method == "em":
        trace = em.run_em(
            model, theta0, X, max_iter=opt["iterations"], tol=opt["tol"], rng=rng.spawn(1),
            callback=lambda it, th, ll: report.log(it, ll, ll),
        )
        theta = trace.iterates[-1]
        report.summary["converged"] = trace.converged
    else:
        theta = theta0
        for it in range(1, opt["iterations"] + 1):
            theta = em.mcem_step(model, theta, X, opt["n_draws"], rng.spawn(it))
            ll = em.observed_loglik(model, theta, X)
            report.log(it, ll, ll)
        report.summary["converged"] = False
    return model, theta


def _train_vi(cfg, X, rng, report):
    model = build_model(cfg, X.shape[1])
    if isinstance(model, GaussianMixtureModel):
        raise CapabilityError("mean-field Gaussian VI needs a continuous latent variable")
    opt = cfg["optimizer"]
    conf = meanfield.ViConfig(
        outer_iters=opt["iterations"],
        step_theta=opt["step_theta"],
        step_omega=opt["step_local"],
        n_draws=opt["n_draws"],
        first_local_steps=opt["first_local_steps"],
        local_steps=opt["local_steps"],
        optimizer=opt["kind"],
    )
    theta0 = init_theta(model, X, rng.spawn(0))
    state = meanfield.fit_vi(
        model, X, theta0, conf, rng.spawn(1),
        callback=lambda it, th, total: report.log(it, total, oracle_loglik(model, th, X)),
    )
    return model, state.theta, {}


def _train_vae(cfg, X, rng, report):
    model = build_model(cfg, X.shape[1])
    if isinstance(model, GaussianMixtureModel):
        raise CapabilityError("the amortized Gaussian encoder needs a continuous latent variable")
    opt, enc_cfg = cfg["optimizer"], cfg["encoder"]
    encoder = amortized.Encoder(X.shape[1], model.latent_dim, enc_cfg["hidden"], enc_cfg["activation"], enc_cfg["mode"])
    conf = amortized.VaeConfig(
        epochs=opt["iterations"],
        batch_size=opt["batch_size"],
        step_theta=opt["step_theta"],
        step_phi=opt["step_local"],
        n_draws=opt["n_draws"],
        optimizer=opt["kind"],
    )
    theta0 = init_theta(model, X, rng.spawn(0))
    phi0 = encoder.init_phi(rng.spawn(1))
    state = amortized.train_vae(
        model, X, encoder, theta0, phi0, conf, rng.spawn(2),
        callback=lambda ep, th, ph, total: report.log(ep, total, oracle_loglik(model, th, X)),
    )
    return model, state.theta, {"encoder": encoder, "phi": state.phi}


def _ddm_net(cfg, d, T):
    c = cfg["ddm"]
    return ddm.NoisePredictor(d, T, c["hidden"], c["activation"])


def _train_ddm(cfg, X, rng, report_seed, record):
    sched = _schedule(cfg)
    net = _ddm_net(cfg, X.shape[1], sched.T)
    opt = cfg["optimizer"]
    conf = ddm.DdmConfig(
        epochs=opt["iterations"],
        batch_size=opt["batch_size"],
        step_size=opt["step_theta"],
        draws_per_datum=cfg["ddm"]["draws_per_datum"],
        optimizer=opt["kind"],
        diagnostic_every=cfg["ddm"]["diagnostic_every"],
    )
    theta, report = ddm.train_ddm(net, sched, X, net.init_theta(rng.spawn(0)), conf, rng.spawn(1), report_seed, record)
    desc = {"method": "ddm", "schedule": sched.describe(), "net": net.describe()}
    return report, desc, {"theta": theta}


def train(cfg: RunConfig, out_dir: Path | str) -> RunResult:
    """Run the configured method; writes metrics.csv, model.ckpt and manifest.json into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    X = _load_data(cfg)
    rng = RngStream(cfg.seed)
    record = cfg["run"]["record_wall_time"]
    method = cfg.method
    ckpt = out / "model.ckpt"
    try:
        if method == "ddm":
            report, desc, blocks = _train_ddm(cfg, X, rng, cfg.seed, record)
        else:
            report = TrainReport(seed=cfg.seed, record_wall_time=record)
            if method in ("em", "mcem"):
                model, theta = _train_em(cfg, X, rng, report)
                extra = {}
            elif method == "vi":
                model, theta, extra = _train_vi(cfg, X, rng, report)
            elif method == "vae":
                model, theta, extra = _train_vae(cfg, X, rng, report)
            else:
                raise ConfigError(f"method {method!r} is not a training method")
            desc = {"method": method, "model": model_descriptor(model)}
            blocks = theta_blocks(model, theta)
            if "encoder" in extra:
                desc["encoder"] = extra["encoder"].describe()
                blocks["phi"] = extra["phi"]
    except NumericalError as exc:
        state = exc.state or {}
        dump = {k: np.asarray(v, dtype=float) for k, v in state.items() if isinstance(v, np.ndarray)}
        if dump:
            io.save_checkpoint(out / "abort.ckpt", {"method": method, "aborted": str(exc)}, dump)
        raise
    io.save_checkpoint(ckpt, desc, blocks)
    metrics = out / "metrics.csv"
    io.write_metrics(metrics, report)
    files = {"model.ckpt": ckpt, "metrics.csv": metrics}
    io.write_manifest(out / "manifest.json", f"train --method {method}", cfg, files)
    return RunResult(report, desc, blocks, files)


# ---------------------------------------------------------------------------
# Evaluation and sampling


def _load_vae(path):
    desc, blocks = io.load_checkpoint(path)
    if desc.get("method") != "vae" or "encoder" not in desc:
        raise ConfigError("the amortization gap needs a checkpoint written by train --method vae")
    model = model_from_descriptor(desc["model"])
    enc = desc["encoder"]
    sizes = enc["layer_sizes"]
    encoder = amortized.Encoder(sizes[0], model.latent_dim, tuple(sizes[1:-1]), enc["activation"], enc["mode"])
    if encoder.describe() != enc:
        raise ConfigError("encoder topology in checkpoint is inconsistent")
    return model, blocks["theta"], encoder, blocks["phi"]


def eval_gap(cfg: RunConfig, checkpoint: Path | str, out_dir: Path | str, perturb: float = 0.0):
    """Amortization gap at the first ``eval.gap_points`` rows of the configured dataset.

    Writes gaps.csv (idx,gap,se,elbo_local,elbo_amortized) and returns the rows.
    ``perturb`` adds that much Gaussian noise to the encoder weights first.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model, theta, encoder, phi = _load_vae(checkpoint)
    X = _load_data(cfg)
    if X.shape[1] != model.data_dim:
        raise DimensionError("dataset dimension does not match the checkpoint")
    rng = RngStream(cfg.seed)
    if perturb:
        phi = phi + perturb * rng.spawn(10**6).normal(phi.shape)
    ev = cfg["eval"]
    rows = []
    for i, x in enumerate(X[: ev["gap_points"]]):
        g = amortized.amortization_gap(
            model, theta, encoder, phi, x, rng.spawn(i), budget=ev["gap_budget"],
            step_size=cfg["optimizer"]["step_local"], eval_draws=ev["gap_draws"],
        )
        rows.append((i, g.gap, g.se, g.elbo_local, g.elbo_amortized))
    path = out / "gaps.csv"
    lines = ["idx,gap,se,elbo_local,elbo_amortized"]
    lines += [",".join([str(r[0])] + [repr(float(v)) for v in r[1:]]) for r in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    io.write_manifest(out / "manifest.json", "eval --gap", cfg, {"gaps.csv": path},
                      {"checkpoint_sha256": io.sha256_file(checkpoint), "perturb": perturb})
    return rows


def sample(cfg: RunConfig, checkpoint: Path | str, n: int, out_dir: Path | str) -> np.ndarray:
    """Draw ``n`` rows from a trained generative model into samples.csv."""
    if n < 0:
        raise ConfigError("n must be >= 0")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    desc, blocks = io.load_checkpoint(checkpoint)
    rng = RngStream(cfg.seed)
    if desc.get("method") == "ddm":
        sched = ddm.VarianceSchedule(np.array(desc["schedule"]["phi"]))
        spec = desc["net"]
        net = ddm.NoisePredictor(spec["layer_sizes"][-1], sched.T, tuple(spec["layer_sizes"][1:-1]), spec["activation"])
        if net.describe() != spec or blocks["theta"].size != net.n_params:
            raise ConfigError("checkpoint topology does not match its descriptor")
        Y = ddm.sample_reverse(net, blocks["theta"], sched, n, rng) if n else np.empty((0, net.data_dim))
    elif "model" in desc:
        model = model_from_descriptor(desc["model"])
        theta = theta_from_blocks(model, blocks)
        if n == 0:
            Y = np.empty((0, model.data_dim))
        elif isinstance(model, GaussianMixtureModel):
            z = model.sample_prior(rng.spawn(0), n, theta)
            Y = model.sample_decoder(theta, z, rng.spawn(1))
        else:
            Y = model.sample_decoder(theta, model.sample_prior(rng.spawn(0), n), rng.spawn(1))
    else:
        raise ConfigError("checkpoint carries no generative model")
    path = out / "samples.csv"
    write_csv(path, Y)
    io.write_manifest(out / "manifest.json", "sample", cfg, {"samples.csv": path},
                      {"checkpoint_sha256": io.sha256_file(checkpoint), "n": n})
    return Y

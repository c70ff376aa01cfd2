"""Synthetic datasets with a JSON sidecar of the generating parameters."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from ..errors import ConfigError, DimensionError
from ..numkit import RngStream

DATASETS = ("gmm2d", "linear_gaussian", "two_gaussians_2d", "ar_sanity")


def gen_data(kind: str, n: int, seed: int):
    """(X, metadata) for one of the shipped dataset kinds."""
    if n < 1:
        raise ConfigError("n must be >= 1")
    rng = RngStream(seed, stream_id=0xDA7A)
    if kind == "gmm2d":
        weights = np.array([0.4, 0.6])
        means = np.array([[-2.0, 0.0], [2.0, 1.0]])
        stds = np.array([[0.8, 0.6], [0.7, 1.0]])
        z = rng.spawn(0).categorical(np.tile(weights, (n, 1)))
        X = means[z] + stds[z] * rng.spawn(1).normal((n, 2))
        params = {"weights": weights.tolist(), "means": means.tolist(), "variances": (stds**2).tolist()}
    elif kind == "linear_gaussian":
        W = np.array([[1.5], [-1.0], [0.5]])
        mu = np.array([0.5, 0.0, -0.5])
        sigma2 = 0.3
        z = rng.spawn(0).normal((n, 1))
        X = z @ W.T + mu + np.sqrt(sigma2) * rng.spawn(1).normal((n, 3))
        params = {"W": W.tolist(), "mu": mu.tolist(), "sigma2": sigma2}
    elif kind == "two_gaussians_2d":
        # two elongated, slightly bent clusters: a small stand-in for two-moons data
        weights = np.array([0.5, 0.5])
        means = np.array([[-1.0, 0.5], [1.0, -0.5]])
        z = rng.spawn(0).categorical(np.tile(weights, (n, 1)))
        e = rng.spawn(1).normal((n, 2)) * np.array([0.9, 0.25])
        X = means[z] + e
        bend = np.where(z == 0, 0.15, -0.15)
        X[:, 1] += bend * X[:, 0] ** 2
        # E[x0^2 | z] = 1 + 0.81 for both clusters, so the bends cancel in the mixture mean
        second_moment = means[:, 0] ** 2 + 0.81
        mixture_mean = (weights[:, None] * means).sum(axis=0)
        mixture_mean[1] += float(weights @ (np.array([0.15, -0.15]) * second_moment))
        params = {"weights": weights.tolist(), "means": means.tolist(), "stds": [0.9, 0.25],
                  "bend": [0.15, -0.15], "mixture_mean": mixture_mean.tolist()}
    elif kind == "ar_sanity":
        m = np.array([1.0, -0.5])
        s = 0.5
        X = m + s * rng.spawn(0).normal((n, 2))
        params = {"mean": m.tolist(), "std": s}
    else:
        raise ConfigError(f"unknown dataset {kind!r}; expected one of {DATASETS}")
    meta = {"kind": kind, "n": int(n), "seed": int(seed), "dim": int(X.shape[1]), "params": params}
    return X, meta


def sidecar_path(path: Path | str) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def write_csv(path: Path | str, X) -> None:
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise DimensionError("dataset must be 2-d")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"dim_{j}" for j in range(X.shape[1])])
        for row in X:
            w.writerow([repr(float(v)) for v in row])


def write_dataset(path: Path | str, X, meta: dict) -> None:
    write_csv(path, X)
    sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_csv(path: Path | str) -> np.ndarray:
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise ConfigError(f"cannot read dataset {path}: {exc}") from exc
    if not rows or not all(h == f"dim_{j}" for j, h in enumerate(rows[0])):
        raise ConfigError(f"{path}: header must be dim_0..dim_(d-1)")
    d = len(rows[0])
    X = np.array([[float(v) for v in r] for r in rows[1:]], dtype=float).reshape(-1, d)
    return X


def read_sidecar(path: Path | str) -> dict | None:
    p = sidecar_path(path)
    return json.loads(p.read_text(encoding="utf-8")) if p.exists() else None

"""INI run configuration with a fixed, documented schema.

Every section and key is declared below with its type and default; unknown
sections or keys are rejected before any computation starts.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass
from pathlib import Path

from ..errors import ConfigError

METHODS = ("em", "mcem", "vi", "vae", "ddm", "gradcheck", "verify")
MODEL_KINDS = ("gmm", "linear_gaussian", "nonlinear_gaussian", "ddm")


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text: str) -> tuple:
    text = text.strip()
    return tuple(int(p) for p in text.split(",") if p.strip()) if text else ()


def _str(text: str) -> str:
    return text.strip()


# section -> key -> (parser, default)
SCHEMA = {
    "run": {
        "method": (_str, None),
        "seed": (int, 0),
        "data": (_str, ""),
        "record_wall_time": (_bool, False),
        "suite": (_str, "all"),
    },
    "model": {
        "kind": (_str, "linear_gaussian"),
        "latent_dim": (int, 1),
        "components": (int, 2),
        "hidden": (_ints, (16,)),
        "activation": (_str, "tanh"),
    },
    "optimizer": {
        "kind": (_str, "sgd"),
        "iterations": (int, 200),
        "tol": (float, 1e-8),
        "step_theta": (float, 1e-2),
        "step_local": (float, 1e-2),
        "n_draws": (int, 8),
        "first_local_steps": (int, 200),
        "local_steps": (int, 25),
        "batch_size": (int, 64),
    },
    "encoder": {
        "hidden": (_ints, (16,)),
        "activation": (_str, "tanh"),
        "mode": (_str, "diag"),
    },
    "schedule": {
        "kind": (_str, "linear"),
        "T": (int, 50),
        "phi_start": (float, 0.999),
        "phi_end": (float, 0.95),
        "phi": (float, 0.9),
    },
    "ddm": {
        "hidden": (_ints, (32, 32)),
        "activation": (_str, "tanh"),
        "draws_per_datum": (int, 1),
        "diagnostic_every": (int, 0),
    },
    "eval": {
        "gap_points": (int, 50),
        "gap_budget": (int, 500),
        "gap_draws": (int, 1024),
    },
}


@dataclass(frozen=True)
class RunConfig:
    values: dict
    source_text: str
    base_dir: Path

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    @property
    def method(self) -> str:
        return self.values["run"]["method"]

    @property
    def seed(self) -> int:
        return self.values["run"]["seed"]

    def data_path(self) -> Path | None:
        raw = self.values["run"]["data"]
        if not raw:
            return None
        p = Path(raw)
        return p if p.is_absolute() else self.base_dir / p

    def with_seed(self, seed: int) -> "RunConfig":
        vals = {s: dict(kv) for s, kv in self.values.items()}
        vals["run"]["seed"] = int(seed)
        return RunConfig(vals, self.source_text, self.base_dir)

    def canonical(self) -> str:
        """Resolved config as sorted ``section.key=value`` lines."""
        lines = []
        for section in sorted(self.values):
            for key in sorted(self.values[section]):
                lines.append(f"{section}.{key}={self.values[section][key]!r}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()


def parse_config(text: str, base_dir: Path | str = ".") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, strict=True)
    parser.optionxform = str  # keys are case-sensitive (T)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    values = {s: {k: default for k, (_, default) in keys.items()} for s, keys in SCHEMA.items()}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            conv = SCHEMA[section][key][0]
            try:
                values[section][key] = conv(raw)
            except ValueError as exc:
                raise ConfigError(f"bad value for {section}.{key}: {raw!r}") from exc
    cfg = RunConfig(values, text, Path(base_dir))
    validate(cfg)
    return cfg


def load_config(path: Path | str) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, path.parent)


def validate(cfg: RunConfig):
    run, model, opt = cfg["run"], cfg["model"], cfg["optimizer"]
    if run["method"] is None:
        raise ConfigError("run.method is required")
    if run["method"] not in METHODS:
        raise ConfigError(f"run.method must be one of {METHODS}")
    if model["kind"] not in MODEL_KINDS:
        raise ConfigError(f"model.kind must be one of {MODEL_KINDS}")
    if opt["kind"] not in ("sgd", "adam"):
        raise ConfigError("optimizer.kind must be sgd or adam")
    if cfg["encoder"]["mode"] not in ("diag", "full"):
        raise ConfigError("encoder.mode must be diag or full")
    for key in ("iterations", "n_draws", "batch_size", "latent_dim", "components"):
        section = "model" if key in model else "optimizer"
        if cfg[section][key] < 1:
            raise ConfigError(f"{section}.{key} must be >= 1")
    for key in ("step_theta", "step_local"):
        if opt[key] < 0:
            raise ConfigError(f"optimizer.{key} must be >= 0")
    if cfg["schedule"]["T"] < 1:
        raise ConfigError("schedule.T must be >= 1")

"""Checkpoints, metrics files and run manifests.

Checkpoint layout::

    b"LVCKPT\\0\\0"          magic, 8 bytes
    uint32 LE             format version
    uint32 LE             length of the descriptor in bytes
    descriptor            UTF-8 JSON, sorted keys, compact separators
    float64 LE * n        concatenated parameter blocks

The descriptor holds the topology plus ``blocks``: an ordered list of
``[name, length]`` pairs that partitions the float payload.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .. import __version__
from ..errors import ConfigError
from ..report import TrainReport

MAGIC = b"LVCKPT\0\0"
FORMAT_VERSION = 1
METRICS_HEADER = ("iter", "objective", "oracle_loglik", "wall_ms")


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def encode_checkpoint(descriptor: dict, blocks: dict) -> bytes:
    """Serialize named float blocks (insertion order kept) plus a topology descriptor."""
    names = list(blocks)
    arrays = [np.ascontiguousarray(np.asarray(blocks[k], dtype="<f8").ravel()) for k in names]
    desc = dict(descriptor)
    desc["blocks"] = [[k, int(a.size)] for k, a in zip(names, arrays)]
    head = _dumps(desc).encode("utf-8")
    payload = b"".join(a.tobytes() for a in arrays)
    return MAGIC + struct.pack("<II", FORMAT_VERSION, len(head)) + head + payload


def decode_checkpoint(raw: bytes):
    """(descriptor, {name: float64 array}) from checkpoint bytes."""
    if raw[: len(MAGIC)] != MAGIC:
        raise ConfigError("not a checkpoint file (bad magic)")
    off = len(MAGIC)
    version, n_head = struct.unpack_from("<II", raw, off)
    if version != FORMAT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {version}")
    off += 8
    desc = json.loads(raw[off : off + n_head].decode("utf-8"))
    off += n_head
    values = np.frombuffer(raw, dtype="<f8", offset=off)
    blocks = {}
    pos = 0
    for name, size in desc["blocks"]:
        blocks[name] = values[pos : pos + size].astype(np.float64)
        pos += size
    if pos != values.size:
        raise ConfigError("checkpoint payload does not match its descriptor")
    return desc, blocks


def save_checkpoint(path: Path | str, descriptor: dict, blocks: dict) -> bytes:
    raw = encode_checkpoint(descriptor, blocks)
    Path(path).write_bytes(raw)
    return raw


def load_checkpoint(path: Path | str):
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode_checkpoint(raw)


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def write_metrics(path: Path | str, report: TrainReport) -> None:
    """Strict dialect: comma separated, '.' decimal, LF endings, no quoting.

    oracle_loglik is left empty on rows where no exact oracle exists.
    """
    lines = [",".join(METRICS_HEADER)]
    for r in report.rows:
        lines.append(f"{r.iteration},{_fmt(r.objective)},{_fmt(r.oracle_loglik)},{_fmt(r.wall_ms)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_metrics(path: Path | str) -> list[dict]:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines[0] != ",".join(METRICS_HEADER) or lines[-1] != "":
        raise ConfigError(f"{path}: not a metrics file")
    out = []
    for line in lines[1:-1]:
        it, obj, oracle, wall = line.split(",")
        out.append({
            "iter": int(it),
            "objective": float(obj),
            "oracle_loglik": None if oracle == "" else float(oracle),
            "wall_ms": float(wall),
        })
    return out


def sha256_file(path: Path | str) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(path: Path | str, command: str, config, outputs: dict, extra: dict | None = None) -> dict:
    """Everything needed to rerun: the resolved config, its hash, the seed and the version."""
    manifest = {
        "command": command,
        "version": __version__,
        "seed": None if config is None else config.seed,
        "config_sha256": None if config is None else config.digest(),
        "config": None if config is None else config.canonical(),
        "outputs": {k: sha256_file(v) for k, v in sorted(outputs.items())},
    }
    if extra:
        manifest.update(extra)
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest

"""``latentvi`` command line.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure,
3 verification failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from ..errors import ConfigError, LatentViError, NumericalError
from . import io, runner, verify
from .config import load_config
from .data import DATASETS, gen_data, write_dataset

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL, EXIT_VERIFY = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="latentvi", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic dataset CSV plus JSON sidecar")
    g.add_argument("kind", choices=DATASETS)
    g.add_argument("--n", type=int, default=500)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", type=Path, default=Path("."))

    t = sub.add_parser("train", help="run the method named in the config")
    t.add_argument("--config", type=Path, required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--out", type=Path, default=Path("run"))

    e = sub.add_parser("eval", help="evaluate a trained checkpoint")
    e.add_argument("--config", type=Path, required=True)
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--gap", action="store_true", help="amortization gap per data point")
    e.add_argument("--perturb", type=float, default=0.0, help="noise scale added to encoder weights")
    e.add_argument("--seed", type=int)
    e.add_argument("--out", type=Path, default=Path("eval"))

    s = sub.add_parser("sample", help="draw from a trained generative model")
    s.add_argument("--config", type=Path, required=True)
    s.add_argument("--checkpoint", type=Path, required=True)
    s.add_argument("--n", type=int, default=1000)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", type=Path, default=Path("samples"))

    gc = sub.add_parser("gradcheck", help="finite-difference checks of every analytic gradient")
    gc.add_argument("--config", type=Path)
    gc.add_argument("--seed", type=int)
    gc.add_argument("--out", type=Path)

    v = sub.add_parser("verify", help="run invariant suites")
    v.add_argument("suite", nargs="?", default=None, choices=verify.SUITES + ("all",))
    v.add_argument("--config", type=Path)
    v.add_argument("--seed", type=int)
    v.add_argument("--out", type=Path)
    return p


def _config(args):
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _report(checks, out: Path | None, command: str, cfg) -> int:
    lines = []

    def emit(line):
        lines.append(line)
        print(line, flush=True)

    ok = verify.run_checks(checks, emit)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        path = out / "report.tsv"
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        io.write_manifest(out / "manifest.json", command, cfg, {"report.tsv": path})
    return EXIT_OK if ok else EXIT_VERIFY


def _run(args) -> int:
    if args.command == "gen-data":
        X, meta = gen_data(args.kind, args.n, args.seed)
        args.out.mkdir(parents=True, exist_ok=True)
        path = args.out / f"{args.kind}.csv"
        write_dataset(path, X, meta)
        print(path)
        return EXIT_OK

    if args.command == "train":
        cfg = _config(args)
        if cfg.method in ("gradcheck", "verify"):
            return _report(verify.checks_for(cfg["run"]["suite"], cfg.method == "gradcheck"), args.out,
                           cfg.method, cfg)
        res = runner.train(cfg, args.out)
        last = res.report.rows[-1] if res.report.rows else None
        if last is not None:
            print(f"iterations={len(res.report.rows)} final_objective={last.objective!r}")
        print(res.files["model.ckpt"])
        return EXIT_OK

    if args.command == "eval":
        cfg = _config(args)
        if not args.gap:
            raise ConfigError("eval currently supports --gap only")
        rows = runner.eval_gap(cfg, args.checkpoint, args.out, args.perturb)
        below = sum(1 for r in rows if r[1] < -3 * r[2])
        mean_gap = float(sum(r[1] for r in rows)) / max(len(rows), 1)
        print(f"points={len(rows)} mean_gap={mean_gap!r} below_minus_3se={below}")
        return EXIT_VERIFY if below else EXIT_OK

    if args.command == "sample":
        cfg = _config(args)
        runner.sample(cfg, args.checkpoint, args.n, args.out)
        print(args.out / "samples.csv")
        return EXIT_OK

    cfg = _config(args) if args.config else None
    if args.command == "gradcheck":
        return _report(verify.checks_for("all", gradient_only=True), args.out, "gradcheck", cfg)
    suite = args.suite or (cfg["run"]["suite"] if cfg else "all")
    return _report(verify.checks_for(suite), args.out, f"verify {suite}", cfg)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except LatentViError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

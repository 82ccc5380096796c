"""Command-line entry point: ``gembml <subcommand> [global flags]``.

Exit codes: 0 success, 1 a check failed, 2 usage or configuration error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
from datetime import datetime, timezone

from . import __version__
from . import config as config_mod
from . import experiments as ex
from ._validation import ConfigError, NumericError
from .meta import DIAGNOSTIC_COLUMNS, MetaParams, MetaTrainError

log = logging.getLogger("gembml")

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """Turns argparse failures into UsageError so main() owns the exit code."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


class Run:
    """Owns the output directory; every file is written through here."""

    def __init__(self, out: str, command: str, cfg: dict):
        self.out = out
        self.command = command
        self.cfg = cfg
        self.files: list[str] = []
        self.started = datetime.now(timezone.utc).isoformat()
        os.makedirs(out, exist_ok=True)

    def path(self, name: str) -> str:
        p = os.path.join(self.out, name)
        os.makedirs(os.path.dirname(p), exist_ok=True)
        return p

    def _atomic(self, name: str, text: str):
        target = self.path(name)
        fd, tmp = tempfile.mkstemp(dir=os.path.dirname(target), prefix=".tmp-")
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, target)
        if name not in self.files:
            self.files.append(name)

    def csv(self, name: str, header, rows):
        lines = [",".join(header)]
        lines.extend(",".join(_fmt(v) for v in row) for row in rows)
        self._atomic(name, "\n".join(lines) + "\n")

    def json(self, name: str, obj):
        self._atomic(name, json.dumps(obj, indent=2, sort_keys=True) + "\n")

    def summary(self, study: str, obj: dict):
        self.json("summary.json", {"study": study, "seed": self.cfg["seed"], "config": config_mod.dumps(self.cfg), **obj})

    def manifest(self, status: str):
        self.json("manifest.json", {
            "command": self.command,
            "status": status,
            "config": config_mod.dumps(self.cfg),
            "config_hash": config_mod.config_hash(self.cfg),
            "version": __version__,
            "started": self.started,
            "finished": datetime.now(timezone.utc).isoformat(),
            "outputs": sorted(self.files),
        })


def _checks_ok(summary: dict) -> bool:
    failed = [k for k, v in summary.get("checks", {}).items() if not v]
    for k in failed:
        log.warning("check failed: %s", k)
    return not failed


def cmd_gradcheck(run: Run, args) -> int:
    results = ex.run_gradcheck(run.cfg)
    run.csv("gradcheck.csv", ("check", "max_error", "tolerance", "passed"),
            [(r.name, r.max_error, r.tolerance, int(r.passed)) for r in results])
    failed = [r for r in results if not r.passed]
    for r in results:
        print(f"{'ok  ' if r.passed else 'FAIL'} {r.name}: {r.max_error:.3g} (tol {r.tolerance:g})")
    if failed:
        print(f"first failing check: {failed[0].name}", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


def cmd_grad_error(run: Run, args) -> int:
    rows, raw, summary = ex.grad_error_study(run.cfg)
    run.csv("grad_error.csv", ("T", "gem_error", "elbo_error"), rows)
    run.csv("grad_error_raw.csv", ("problem", "T", "gem_error", "elbo_error"), raw)
    run.summary("grad_error", summary)
    for T, g, e in rows:
        print(f"T={T:<4d} gem={g:.3e} elbo={e:.3e}")
    return EXIT_OK if _checks_ok(summary) else EXIT_CHECK


def cmd_theory(run: Run, args) -> int:
    if args.study not in ex.THEORY_STUDIES:
        raise UsageError(f"unknown study {args.study!r}; expected one of {sorted(ex.THEORY_STUDIES)}")
    fn, header = ex.THEORY_STUDIES[args.study]
    rows, summary = fn(run.cfg)
    run.csv(f"{args.study}.csv", header, rows)
    run.summary(args.study, summary)
    print(json.dumps({k: v for k, v in summary.items()}, indent=2, sort_keys=True))
    return EXIT_OK if _checks_ok(summary) else EXIT_CHECK


def _checkpoint_obj(it, params: MetaParams, cfg):
    return {"iteration": it, "theta": params.theta.to_json(), "fixed_variance": params.fixed_variance,
            "config_hash": config_mod.config_hash(cfg), "seed": cfg["seed"]}


def cmd_sine(run: Run, args) -> int:
    cfg = run.cfg

    def checkpoint(it, params):
        run.json(f"checkpoints/ckpt_{it:07d}.json", _checkpoint_obj(it, params, cfg))

    train, trained, control, summary = ex.run_sine(cfg, checkpoint=checkpoint)
    run.json("checkpoints/final.json", _checkpoint_obj(cfg["meta.iterations"], train.params, cfg))
    run.csv("diagnostics.csv", DIAGNOSTIC_COLUMNS, [tuple(d[c] for c in DIAGNOSTIC_COLUMNS) for d in train.diagnostics])
    header = ["step", "mean_mse", "ci95"]
    cols = [trained.mean(), trained.ci95()]
    if control is not None:
        header += ["control_mean_mse", "control_ci95"]
        cols += [control.mean(), control.ci95()]
    run.csv("meta_test.csv", header, [(s, *(float(c[s]) for c in cols)) for s in range(trained.steps + 1)])
    run.csv("meta_test_tasks.csv", ("task", "step", "mse"),
            [(i, s, float(v)) for i, row in enumerate(trained.mse) for s, v in enumerate(row)])
    run.summary("sine", summary)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK if _checks_ok(summary) else EXIT_CHECK


def cmd_neighborhood(run: Run, args) -> int:
    path = run.cfg["neighborhood.checkpoint"]
    if not path or not os.path.exists(path):
        raise UsageError(f"neighborhood needs an existing checkpoint (neighborhood.checkpoint={path!r})")
    with open(path, encoding="utf-8") as fh:
        obj = json.load(fh)
    try:
        params = MetaParams.from_json(obj)
    except (KeyError, ValueError) as exc:
        raise UsageError(f"unreadable checkpoint {path}: {exc}") from None
    rows, summary = ex.run_neighborhood(run.cfg, params)
    run.csv("neighborhood.csv", ("initializer", "step", "mean_mse"), rows)
    run.summary("neighborhood", summary)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK if _checks_ok(summary) else EXIT_CHECK


COMMANDS = {
    "gradcheck": cmd_gradcheck,
    "grad-error-study": cmd_grad_error,
    "sine": cmd_sine,
    "theory": cmd_theory,
    "neighborhood": cmd_neighborhood,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=int, help="run seed (overrides the config)")
    common.add_argument("--out", default=None, help="output directory (default runs/<command>)")
    common.add_argument("--jobs", type=int, help="worker processes for per-task work")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override, repeatable")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="gembml", description="Gradient-EM Bayesian meta-learning experiments.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.add_parser("gradcheck", parents=[common], help="finite-difference checks of every analytic gradient")
    sub.add_parser("grad-error-study", parents=[common], help="GEM vs ELBO-gradient error against inner-loop length")
    sub.add_parser("sine", parents=[common], help="meta-train and meta-test on sinusoid regression")
    t = sub.add_parser("theory", parents=[common], help="conjugate-model theory studies")
    t.add_argument("study", help=f"one of {', '.join(sorted(ex.THEORY_STUDIES))}")
    sub.add_parser("neighborhood", parents=[common], help="adaptation from convex combinations of adapted parameters")
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"gembml: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if not args.command:
        build_parser().print_help(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"seed = {args.seed}")
    if args.jobs is not None:
        overrides.append(f"jobs = {args.jobs}")
    run = None
    try:
        cfg = config_mod.load(args.config, overrides)
        run = Run(args.out or os.path.join("runs", args.command), args.command, cfg)
        code = COMMANDS[args.command](run, args)
    except (ConfigError, UsageError) as exc:
        print(f"gembml: error: {exc}", file=sys.stderr)
        code = EXIT_USAGE
    except (NumericError, MetaTrainError, FloatingPointError) as exc:
        print(f"gembml: numeric failure: {exc}", file=sys.stderr)
        code = EXIT_NUMERIC
    if run is not None:
        run.manifest({EXIT_OK: "ok", EXIT_CHECK: "check-failed", EXIT_USAGE: "usage-error", EXIT_NUMERIC: "numeric-failure"}[code])
    return code


if __name__ == "__main__":
    sys.exit(main())

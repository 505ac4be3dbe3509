"""Command line entry point: ``mambo {run,bench,validate,oracle}``.

Exit codes: 0 on success, 1 on a usage or configuration error, 2 when the
run itself fails.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ConfigError, load_config
from .oracle import compute_oracle, write_oracle
from .problems import get_problem
from .runner import output_prefix, run_macroreps, run_single, write_timing, write_trace

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--problem")
    p.add_argument("--iters", type=int, help="total design points per run, initial design included")
    p.add_argument("--macroreps", type=int)
    p.add_argument("--algo", choices=["mambo", "baseline"])


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mambo", description="High-dimensional noisy Bayesian optimisation experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, text in [
        ("run", "one optimisation run"),
        ("bench", "macroreplication suite with summary CSV"),
    ]:
        _add_common(sub.add_parser(name, help=text))
    v = sub.add_parser("validate", help="quick invariant checks")
    v.add_argument("--seed", type=int, default=0)
    o = sub.add_parser("oracle", help="compute and cache optimum values")
    o.add_argument("--problem", required=True)
    o.add_argument("--out", default=".")
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--starts", type=int, default=100)
    return parser


def _experiment(args):
    overrides = {
        "seed": args.seed,
        "out": args.out,
        "problem": args.problem,
        "iterations": args.iters,
        "macroreplications": args.macroreps,
        "algorithm": args.algo,
    }
    cfg = load_config(args.config, overrides)
    try:
        get_problem(cfg.problem, cfg.problem_seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def _cmd_run(args) -> int:
    cfg = _experiment(args)
    result, regrets = run_single(cfg, cfg.seed)
    if cfg.out is not None:
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        prefix = f"{output_prefix(cfg)}_seed{cfg.seed}"
        write_trace(out / f"{prefix}_trace.csv", result, regrets)
        write_timing(out / f"{prefix}_timing.csv", result)
    x = ";".join(f"{v:.6g}" for v in result.incumbent_x)
    print(f"termination={result.termination} incumbent_mean={result.incumbent_mean:.6g} "
          f"regret={regrets[-1]:.6g} budget={result.budget_consumed}")
    print(f"incumbent_x={x}")
    return EXIT_OK


def _cmd_bench(args) -> int:
    cfg = _experiment(args)
    summary = run_macroreps(cfg)
    q1, med, q3 = summary.quartiles
    print(f"{cfg.problem} {cfg.algorithm}: {len(summary.final_regrets)} runs, "
          f"final mean regret {summary.mean[-1]:.6g} (quartiles {q1:.4g}, {med:.4g}, {q3:.4g})")
    return EXIT_OK


def _cmd_validate(args) -> int:
    from .validate import run_checks

    failures = 0
    for name, ok, detail in run_checks(args.seed):
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
        failures += not ok
    return EXIT_OK if failures == 0 else EXIT_RUNTIME


def _cmd_oracle(args) -> int:
    try:
        base = get_problem(args.problem).base
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    res = compute_oracle(base.name, args.starts, args.seed)
    path = write_oracle(res, args.out)
    if args.problem != base.name:
        # the lifted problem shares the native optimum value
        alias = Path(args.out) / f"{args.problem}_oracle.txt"
        alias.write_text(path.read_text())
        path = alias
    print(f"{base.name}: f* = {res.value!r} interior={res.interior} -> {path}")
    if base.f_star is not None and abs(res.value - base.f_star) > 1e-4 * max(1.0, abs(base.f_star)):
        print(f"warning: multistart value differs from the known optimum {base.f_star!r}", file=sys.stderr)
    if not res.interior:
        print("warning: the optimum lies on the box boundary", file=sys.stderr)
    return EXIT_OK


_COMMANDS = {"run": _cmd_run, "bench": _cmd_bench, "validate": _cmd_validate, "oracle": _cmd_oracle}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

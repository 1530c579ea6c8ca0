"""Command-line front end: run experiments, repair models against logs,
sample states from formulas, and classify observation logs.

Exit codes: 0 success, 1 usage, 2 validation (bad config/formula/log),
3 runtime failure.
"""

import argparse
import sys
from dataclasses import fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .harness import ExperimentConfig, parse_config_text, run_experiment
from .predicates import FormulaSyntaxError, parse_formula
from .repair import (Budget, parse_action, print_action, read_observation_log,
                     repair_action, unexpected)
from .sampling import naive_sample
from .states import desk_space, state_to_record

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits the process on bad usage; we want an exit code."""

    def error(self, message: str):
        raise _UsageError(message)


def _build_parser() -> _Parser:
    p = _Parser(prog="cpzrepair", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a repair experiment")
    run.add_argument("--config", help="experiment config file (key=value lines)")
    run.add_argument("--experiment", choices=("param", "missing", "multiple"))
    run.add_argument("--trials", type=int)
    run.add_argument("--seed", type=int)
    run.add_argument("--budget-s", type=float, dest="budget_s")
    run.add_argument("--budget-edits", type=int, dest="budget_edits")
    run.add_argument("--p-naive", type=float, dest="p_naive")
    run.add_argument("--out")

    rep = sub.add_parser("repair", help="repair a model file against a log")
    rep.add_argument("--model", required=True)
    rep.add_argument("--log", required=True)
    rep.add_argument("--seed", type=int, default=0)
    rep.add_argument("--budget-s", type=float, dest="budget_s", default=20.0)
    rep.add_argument("--budget-edits", type=int, dest="budget_edits")
    rep.add_argument("--out", help="write repaired model here (default stdout)")

    smp = sub.add_parser("sample", help="draw states satisfying a formula")
    smp.add_argument("--formula", required=True)
    smp.add_argument("--count", type=int, default=1)
    smp.add_argument("--seed", type=int, default=0)
    smp.add_argument("--out", help="write JSON state records here (default stdout)")

    chk = sub.add_parser("check", help="classify a log against a model")
    chk.add_argument("--model", required=True)
    chk.add_argument("--log", required=True)
    return p


def _config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    overrides = {}
    for key in ("trials", "seed", "budget_s", "budget_edits", "p_naive", "out"):
        val = getattr(args, key, None)
        if val is not None:
            overrides[key] = val
    if args.config:
        cfg = parse_config_text(Path(args.config).read_text())
        if args.experiment:
            overrides["experiment"] = args.experiment
        kv = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
        kv.update(overrides)
        return ExperimentConfig(**kv)
    if args.experiment:
        return ExperimentConfig.defaults(args.experiment, **overrides)
    raise _UsageError("run needs --config or --experiment")


def _cmd_run(args: argparse.Namespace) -> int:
    cfg = _config_from_args(args)
    paths = run_experiment(cfg)
    for name in sorted(paths):
        print(f"{name}: {paths[name]}")
    return EXIT_OK


def _cmd_repair(args: argparse.Namespace) -> int:
    space = desk_space(("obj", "cup"))
    model = parse_action(Path(args.model).read_text())
    obs = read_observation_log(args.log, space)
    budget = (Budget(edits=args.budget_edits) if args.budget_edits is not None
              else Budget(seconds=args.budget_s))
    if any(unexpected(model, h, space) for h in obs):
        rng = np.random.default_rng(args.seed)
        model = repair_action(model, obs, budget, space, rng).model
    text = print_action(model) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _cmd_sample(args: argparse.Namespace) -> int:
    import json

    if args.count < 1:
        raise ValueError("--count must be at least 1")
    space = desk_space(("obj", "cup"))
    f = parse_formula(args.formula)
    rng = np.random.default_rng(args.seed)
    lines = []
    for _ in range(args.count):
        state, _ = naive_sample(f, space, rng=rng)
        lines.append(json.dumps(state_to_record(space, state)))
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _cmd_check(args: argparse.Namespace) -> int:
    space = desk_space(("obj", "cup"))
    model = parse_action(Path(args.model).read_text())
    obs = read_observation_log(args.log, space)
    n = sum(1 for h in obs if unexpected(model, h, space))
    print(f"{n} unexpected")
    return EXIT_OK


_COMMANDS = {
    "run": _cmd_run,
    "repair": _cmd_repair,
    "sample": _cmd_sample,
    "check": _cmd_check,
}


def cli(argv: Optional[Sequence[str]] = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return _COMMANDS[args.command](args)
    except _UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (FormulaSyntaxError, ValueError, KeyError) as e:
        print(f"validation error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as e:  # I/O and solver failures
        print(f"runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(cli())

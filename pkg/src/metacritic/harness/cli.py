"""Command-line entry point.

Every subcommand prints one JSON object on stdout when it succeeds. Any
failure prints a single JSON error line on stderr and exits nonzero.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from ..approximator import KINDS, gradcheck_case
from ..errors import ConfigError
from .config import from_dict, load_config
from .experiments import compare_mac_vs_vanilla, emit_figures, evaluate_run, run_train, titrate_2afc

EXIT_USAGE = 2
EXIT_FAILURE = 1


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        _error_line("UsageError", message)
        sys.exit(EXIT_USAGE)


def _error_line(kind: str, message: str, violations=None) -> None:
    record = {"error": kind, "message": message}
    if violations:
        record["violations"] = violations
    print(json.dumps(record), file=sys.stderr)


def _emit(obj) -> None:
    print(json.dumps(obj, default=str))


def _load(args):
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None or getattr(args, "total_updates", None) is not None:
        raw = cfg.to_dict()
        if args.seed is not None:
            raw["seed"] = args.seed
        if getattr(args, "total_updates", None) is not None:
            raw["training"]["optimizer"]["total_updates"] = args.total_updates
        cfg = from_dict(raw)
    return cfg


def cmd_train(args) -> int:
    cfg = _load(args)
    art = run_train(cfg, args.output_dir)
    _emit({"run": art.to_dict(), "summary": art.summary})
    return 0


def cmd_evaluate(args) -> int:
    _emit({"run_dir": args.run_dir, "summary": evaluate_run(args.run_dir, args.episodes)})
    return 0


def cmd_titrate(args) -> int:
    cfg = _load(args)
    res = titrate_2afc(cfg, args.target, args.tolerance, args.budget, args.mode)
    out = res.to_dict()
    if args.out:
        Path(args.out).write_text(json.dumps(out, indent=2) + "\n")
    _emit(out)
    if not res.converged:
        _error_line("TitrationFailed", f"budget exhausted; best accuracy {res.accuracy:.4f} "
                                       f"at signal_mean {res.signal_mean:.4f}")
        return EXIT_FAILURE
    return 0


def cmd_compare(args) -> int:
    cfg = _load(args)
    out_dir = args.out_dir or str(Path(cfg.output_dir) / f"{cfg.name}_compare")
    res = compare_mac_vs_vanilla(cfg, range(args.first_seed, args.first_seed + args.seeds), args.budgets,
                                 args.final_episodes, out_dir, args.workers)
    _emit({"rows": [r.__dict__ for r in res.rows], "excluded": res.excluded,
           "paths": {k: str(v) for k, v in res.paths.items()}})
    return 0


def cmd_gradcheck(args) -> int:
    rng = np.random.default_rng(args.seed)
    worst = {kind: max(gradcheck_case(kind, rng) for _ in range(args.cases)) for kind in KINDS}
    ok = all(v < args.tolerance for v in worst.values())
    _emit({"max_relative_error": worst, "tolerance": args.tolerance, "passed": ok})
    if not ok:
        _error_line("GradcheckFailed", "relative error above tolerance",
                    [k for k, v in worst.items() if v >= args.tolerance])
        return EXIT_FAILURE
    return 0


def cmd_emit_figures(args) -> int:
    paths = emit_figures(args.run_dir, args.out_dir or Path(args.run_dir) / "figures")
    _emit({k: str(v) for k, v in paths.items()})
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="metacritic", description="Metacognitive actor-critic experiments.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("train", help="train, checkpoint and evaluate one config")
    s.add_argument("--config", required=True)
    s.add_argument("--output-dir", default=None)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--total-updates", type=int, default=None)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("evaluate", help="re-evaluate a finished run from its checkpoint")
    s.add_argument("--run-dir", required=True)
    s.add_argument("--episodes", type=int, default=None)
    s.set_defaults(fn=cmd_evaluate)

    s = sub.add_parser("titrate", help="bisect the 2AFC signal mean to a target accuracy")
    s.add_argument("--config", required=True)
    s.add_argument("--target", type=float, default=0.69)
    s.add_argument("--tolerance", type=float, default=0.03)
    s.add_argument("--budget", type=int, default=8)
    s.add_argument("--mode", choices=("trained", "ideal"), default="trained")
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--out", default=None, help="also write the result JSON here")
    s.set_defaults(fn=cmd_titrate)

    s = sub.add_parser("compare", help="MAC vs vanilla on the grid world over paired seeds")
    s.add_argument("--config", required=True)
    s.add_argument("--seeds", type=int, default=20)
    s.add_argument("--first-seed", type=int, default=0)
    s.add_argument("--budgets", type=int, nargs="+", default=[1, 4])
    s.add_argument("--final-episodes", type=int, default=200)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--out-dir", default=None)
    s.set_defaults(fn=cmd_compare)

    s = sub.add_parser("gradcheck", help="analytic vs finite-difference gradients for every kind")
    s.add_argument("--cases", type=int, default=50)
    s.add_argument("--tolerance", type=float, default=1e-4)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_gradcheck)

    s = sub.add_parser("emit-figures", help="write figure CSVs from a run's trials.csv")
    s.add_argument("--run-dir", required=True)
    s.add_argument("--out-dir", default=None)
    s.set_defaults(fn=cmd_emit_figures)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        _error_line("ConfigError", str(exc), exc.violations)
    except Exception as exc:  # noqa: BLE001 - every failure must leave one JSON line
        _error_line(type(exc).__name__, str(exc))
    return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())

"""Command line entry point.

    cascade-attack run <config>            clean + attacks + defenses + summary
    cascade-attack attack <config>         clean + attacks, no defense sweep
    cascade-attack defend <config>         clean + attacks + defense sweep
    cascade-attack analyze <trace-dir>     decomposition tables from routing files
    cascade-attack transfer <suffix> <cfg> replay stored suffixes on another cascade
    cascade-attack report <experiment-dir> re-render summary.md

Exit codes: 0 ok, 2 configuration error, 3 runtime error.
"""
from __future__ import annotations

import argparse
import logging
import sys

from . import runner
from .config import load_experiment
from .errors import CascadeError, ConfigError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _add_run_args(p):
    p.add_argument("config", help="experiment config (JSON)")
    p.add_argument("--out", help="experiment directory (overrides the config and the env default)")
    p.add_argument("--threads", type=int, default=None, help="worker processes (default: config value)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cascade-attack", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb, help_ in (("run", "full experiment"), ("attack", "attacks without defenses"),
                        ("defend", "attacks followed by the defense sweep")):
        _add_run_args(sub.add_parser(verb, help=help_))
    p = sub.add_parser("analyze", help="decomposition and mechanism tables")
    p.add_argument("trace_dir")
    p = sub.add_parser("transfer", help="apply stored suffixes to a target cascade")
    p.add_argument("suffix_file", help="reports.jsonl from an attack, or JSON with a suffix_text field")
    p.add_argument("target_config", help="experiment config describing the target cascade and corpus")
    p.add_argument("--threads", type=int, default=1)
    p = sub.add_parser("report", help="re-render summary.md for an experiment directory")
    p.add_argument("exp_dir")
    return parser


def _print_table(clean, adv, delta, unknown):
    c, a = clean.to_dict(), adv.to_dict()
    rows = [("Performance", c["task_metric"]["value"], a["task_metric"]["value"]),
            ("Token cost", c["normalized_token_cost"], a["normalized_token_cost"]),
            ("Time cost", c["simulated_time"], a["simulated_time"])]
    rows += [(f"Passrate_{i + 1}", x, y) for i, (x, y) in enumerate(zip(c["pass_rates"], a["pass_rates"]))]
    print(f"{'metric':<14}{'clean':>12}{'transfer':>12}{'delta':>10}")
    for (name, x, y), d in zip(rows, delta.values()):
        print(f"{name:<14}{x:>12.4f}{y:>12.4f}{d:>10}")
    if unknown:
        print(f"{unknown} suffix tokens mapped to <unk>")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.verb in ("run", "attack", "defend"):
            cfg = load_experiment(args.config)
            if args.threads is not None and args.threads < 1:
                raise ConfigError(f"--threads={args.threads} must be >= 1")
            out = runner.run_experiment(cfg, args.out, args.threads, with_defense=args.verb != "attack")
            print(out)
        elif args.verb == "analyze":
            sys.stdout.write(runner.analyze_dir(args.trace_dir))
        elif args.verb == "transfer":
            cfg = load_experiment(args.target_config)
            spec, corpus = runner.build_task(cfg)
            suffixes = runner.load_suffixes(args.suffix_file)
            _print_table(*runner.transfer_eval(suffixes, spec, corpus, args.threads))
        elif args.verb == "report":
            text = runner.render_summary(args.exp_dir)
            runner.write_atomic(runner.Path(args.exp_dir) / "summary.md", text)
            sys.stdout.write(text)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CascadeError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK

"""Command-line entry point: run, summarize, plot, simulate, diagnose.

Failures exit nonzero and print one JSON line ``{"error": code, "message": ...}``
to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ExperimentConfig, coerce, load_config
from .errors import RfqiError
from .harness import BATCH, BEHAVIOR, diagnose, replication_seed, replication_spec, run_experiment, summarize
from .mdp import random_logistic_policy, simulate
from .serialize import write_batch_binary, write_batch_csv, write_spec
from .svgplot import plot

EXIT_ERROR = 1
EXIT_USAGE = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        _report("usage", message)
        sys.exit(EXIT_USAGE)


def _report(code: str, message: str) -> None:
    print(json.dumps({"error": code, "message": message}), file=sys.stderr)


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _experiment_config(args) -> ExperimentConfig:
    overrides = {}
    if args.n_list is not None:
        overrides["sample_sizes"] = coerce("sample_sizes", args.n_list)
    for flag, key in (("reps", "replications"), ("d", "d"), ("support_size", "support_size"), ("sigma_s", "sigma_s"),
                      ("sigma_r", "sigma_r"), ("mode", "mode"), ("seed", "master_seed"), ("out", "output_dir")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    if args.config is not None:
        return load_config(args.config, **overrides)
    return ExperimentConfig(**overrides)


def _add_experiment_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key = value config file")
    p.add_argument("--seed", type=_u64, help="master seed")
    p.add_argument("--n-list", help="comma-separated sample sizes")
    p.add_argument("--reps", type=int, help="replications")
    p.add_argument("--d", type=int, help="state dimension")
    p.add_argument("--support-size", type=int, help="size of the reward support")
    p.add_argument("--sigma-s", type=float, help="state noise sd")
    p.add_argument("--sigma-r", type=float, help="reward noise sd")
    p.add_argument("--mode", choices=("fqe", "fqi"), help="policy evaluation or optimization")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rfqi", description="Reward-filtered fitted-Q estimation and its benchmark harness.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("run", help="run the replication grid")
    _add_experiment_flags(p)
    p.add_argument("--out", help="output directory")

    p = sub.add_parser("summarize", help="summary.csv from results.csv")
    p.add_argument("--in", dest="inp", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)

    p = sub.add_parser("plot", help="SVG line chart of one summary metric")
    p.add_argument("--in", dest="inp", required=True, type=Path)
    p.add_argument("--metric", required=True)
    p.add_argument("--out", required=True, type=Path)

    p = sub.add_parser("simulate", help="write one offline batch (and its MDP) to files")
    _add_experiment_flags(p)
    p.add_argument("--n", type=int, required=True, help="number of trajectories")
    p.add_argument("--rep", type=int, default=0, help="replication whose MDP and behavior policy to use")
    p.add_argument("--format", choices=("csv", "binary"), default="csv")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--spec-out", type=Path, help="also write the MDP spec as JSON")

    p = sub.add_parser("diagnose", help="restricted-eigenvalue and beta-min report")
    _add_experiment_flags(p)
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--rep", type=int, default=0)
    p.add_argument("--subset-size", type=int, default=20)
    p.add_argument("--num-sampled", type=int, default=200)
    return parser


def _cmd_run(args) -> None:
    config = _experiment_config(args)
    results = run_experiment(config)
    print(results)


def _cmd_simulate(args) -> None:
    config = _experiment_config(args)
    spec = replication_spec(config, args.rep)
    behavior = random_logistic_policy(config.d, replication_seed(config, args.rep, BEHAVIOR), config.rng_algorithm)
    seed = replication_seed(config, args.rep, BATCH, args.n)
    batch = simulate(spec, behavior, args.n, config.initial_sd, seed, config.rng_algorithm)
    if args.format == "csv":
        write_batch_csv(batch, args.out)
    else:
        write_batch_binary(batch, args.out)
    if args.spec_out is not None:
        write_spec(spec, args.spec_out)
    print(args.out)


def _cmd_diagnose(args) -> None:
    report = diagnose(_experiment_config(args), args.rep, args.n, args.subset_size, args.num_sampled)
    print(json.dumps(report, indent=2))


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            _cmd_run(args)
        elif args.command == "summarize":
            print(summarize(args.inp, args.out))
        elif args.command == "plot":
            print(plot(args.inp, args.metric, args.out))
        elif args.command == "simulate":
            _cmd_simulate(args)
        elif args.command == "diagnose":
            _cmd_diagnose(args)
    except RfqiError as exc:
        _report(exc.code, str(exc))
        return EXIT_ERROR
    except (OSError, ValueError) as exc:
        _report(type(exc).__name__, str(exc))
        return EXIT_ERROR
    return 0


if __name__ == "__main__":
    sys.exit(main())

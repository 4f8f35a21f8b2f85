"""Command line entry point: ``vardimwalk <experiment> [options]``.

Exit status is 0 when every verdict passes, 1 when some verdict fails,
2 on a usage error and 3 when the lattice parameters violate an assumption.
"""
from __future__ import annotations

import argparse
import sys

from .harness import EXPERIMENTS, FORMATS, ConfigError, ExperimentConfig, run
from .lattice import ParameterError

EXIT_PASS = 0
EXIT_FAIL = 1
EXIT_USAGE = 2
EXIT_PARAMETERS = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vardimwalk",
        description="Run a lattice random walk experiment and print its verdict report.",
    )
    parser.add_argument("experiment", choices=EXPERIMENTS)
    parser.add_argument("--k", help="scale exponent, range 3-6 or list 3,5")
    parser.add_argument("--epsilon", help="disk radius, rational such as 1/2")
    parser.add_argument("--radius", help="outer radius of the plane domain")
    parser.add_argument("--rod-length", dest="rod_length", help="length of the rod domain")
    parser.add_argument("--paths", type=int, help="number of simulated paths")
    parser.add_argument("--t-max", dest="t_max", type=float, help="simulation horizon")
    parser.add_argument("--theta", type=float, help="modulus window for the tightness check")
    parser.add_argument("--delta", type=float, help="modulus threshold for the tightness check")
    parser.add_argument("--window", type=float, help="time horizon of the modulus")
    parser.add_argument("--w-paths", dest="w_paths", type=int, help="paths for the modulus estimate")
    parser.add_argument("--seed", type=int, help="master seed")
    parser.add_argument("--out", help="write the report here instead of stdout")
    parser.add_argument("--format", choices=FORMATS, help="report format (default json)")
    parser.add_argument("--jobs", dest="n_jobs", type=int, help="worker processes (-1 for all cores)")
    parser.add_argument("--config", help="key = value file; command line options override it")
    return parser


def make_config(args: argparse.Namespace) -> ExperimentConfig:
    overrides = {
        name: getattr(args, name)
        for name in (
            "k", "epsilon", "radius", "rod_length", "paths", "t_max", "theta",
            "delta", "window", "w_paths", "seed", "out", "format", "n_jobs",
        )
    }
    if args.config:
        return ExperimentConfig.from_file(args.config, experiment=args.experiment, **overrides)
    return ExperimentConfig(args.experiment, **{k: v for k, v in overrides.items() if v is not None})


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_PASS if exc.code == 0 else EXIT_USAGE
    try:
        config = make_config(args)
        report = run(config)
    except ParameterError as exc:
        print(f"vardimwalk: invalid lattice parameters: {exc}", file=sys.stderr)
        return EXIT_PARAMETERS
    except (ConfigError, OSError) as exc:
        print(f"vardimwalk: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if not config.out:
        text = report.render(config.format)
        sys.stdout.write(text if text.endswith("\n") else text + "\n")
    for m in report.metrics:
        if not m.passed:
            print(f"FAIL {report.experiment}: {m.name}", file=sys.stderr)
    return EXIT_PASS if report.passed else EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())

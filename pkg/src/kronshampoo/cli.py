"""Command-line entry point.

Exit codes: 0 success, 1 validation error, 2 self-test failure,
3 numerical failure.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import data
from .errors import KronShampooError, NumericalError
from .harness import config, experiments, plot, selftest

EXIT_OK, EXIT_INVALID, EXIT_SELFTEST, EXIT_NUMERICAL = 0, 1, 2, 3


def _load_config(args):
    cfg = config.load(args.config) if args.config else config.resolve({})
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.out is not None:
        cfg["output_dir"] = args.out
    return config.resolve(cfg)


def _cmd_figure(args):
    cfg = _load_config(args)
    path = experiments.run(cfg, args.command)
    print(path)
    return EXIT_OK


def _cmd_gen_data(args):
    cfg = _load_config(args)
    ds = experiments.build_dataset(cfg)
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    path = out / "dataset.npz"
    data.save_npz(ds, path)
    experiments.atomic_write(out / "manifest.json", config.dumps(cfg))
    print(f"{path} ({len(ds)} rows, {ds.dim} features, {ds.num_classes} classes)")
    return EXIT_OK


def _cmd_selftest(args):
    results = selftest.run_checks()
    print(selftest.format_report(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_SELFTEST


def _cmd_plot(args):
    print(plot.plot(args.csv, args.out))
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="kronshampoo",
        description="Kronecker-factored curvature estimators: figure runs and self-test.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_run(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, help="JSON experiment config")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        p.add_argument("--seed", type=int, help="master seed (overrides seed)")
        p.set_defaults(func=func)

    add_run("gen-data", _cmd_gen_data, "write the configured dataset to dataset.npz")
    add_run("figure1", _cmd_figure, "estimator cosines along training")
    add_run("figure2", _cmd_figure, "spectrum ratios of the rearranged curvature")
    add_run("figure4", _cmd_figure, "estimator cosines across batch sizes and label modes")

    p = sub.add_parser("selftest", help="run the built-in identity checks")
    p.set_defaults(func=_cmd_selftest)

    p = sub.add_parser("plot", help="render a run CSV as SVG")
    p.add_argument("csv", type=Path)
    p.add_argument("--out", type=Path, help="SVG path (default: CSV path with .svg)")
    p.set_defaults(func=_cmd_plot)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (KronShampooError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())

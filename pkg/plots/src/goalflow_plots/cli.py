"""The ``plot`` command: curves from an INI spec, bars from label=glob pairs."""

from __future__ import annotations

import argparse
import sys

from .bars import parse_inputs, render_bars
from .csvio import PlotError
from .curves import parse_curve_spec, render_curves


def run_curves(args) -> int:
    with open(args.spec) as fh:
        spec = parse_curve_spec(fh.read())
    if args.out:
        spec.output = args.out
    print(render_curves(spec))
    return 0


def run_bars(args) -> int:
    series = parse_inputs(args.inputs)
    print(render_bars(series, args.out, metric=args.metric, title=args.title))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="plot", description="Figures from training metrics CSVs"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    curves = sub.add_parser("curves", help="mean +- std training curves")
    curves.add_argument("--spec", required=True, help="INI curve spec path")
    curves.add_argument("--out", default=None, help="override the output path")
    curves.set_defaults(func=run_curves)

    bars = sub.add_parser("bars", help="final-score bars with std whiskers")
    bars.add_argument("--inputs", nargs="+", required=True, metavar="LABEL=GLOB")
    bars.add_argument("--out", default="bars.png")
    bars.add_argument("--metric", default="success_rate")
    bars.add_argument("--title", default="")
    bars.set_defaults(func=run_bars)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (PlotError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

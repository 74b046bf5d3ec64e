"""Reading the metrics CSV schema.

The contract is a plain comma-separated file with a header row naming the
columns; training runs emit ``step`` plus numeric metric columns. Nothing
here knows how the CSVs were produced.
"""

from __future__ import annotations

import csv
import glob as globlib


class PlotError(Exception):
    """Bad inputs to a figure: missing files, columns, or malformed specs."""


def read_columns(path, names) -> list:
    """The named columns of one CSV as float lists, in the given order."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise PlotError(f"{path} has no data rows")
    out = []
    for name in names:
        if name not in rows[0]:
            raise PlotError(f"{path} has no column named {name!r}")
        try:
            out.append([float(r[name]) for r in rows])
        except ValueError as exc:
            raise PlotError(f"{path} column {name!r}: {exc}")
    return out


def expand_glob(pattern) -> list:
    paths = sorted(globlib.glob(str(pattern)))
    if not paths:
        raise PlotError(f"no files match {pattern!r}")
    return paths

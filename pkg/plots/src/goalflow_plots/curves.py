"""Training curves: one mean line per label with a +-1 std band.

Each label aggregates the seed runs matched by its glob. Runs logged on
different step grids are linearly resampled onto the coarsest grid present
(with a warning), since means across seeds are only defined pointwise.
Bands use the sample standard deviation (ddof=1), collapsing to zero width
for a single run. Every figure gets a numeric sidecar CSV holding exactly
the plotted series, so the rendering is auditable without image tools.
"""

from __future__ import annotations

import configparser
import warnings
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .csvio import PlotError, expand_glob, read_columns


@dataclass
class CurveSpec:
    series: list  # (label, glob) pairs, plotted in order
    metric: str = "success_rate"
    window: int = 1
    output: str = "curves.png"
    step_column: str = "step"
    title: str = ""

    def __post_init__(self):
        if self.window < 1:
            raise PlotError("window must be >= 1")
        if not self.series:
            raise PlotError("curve spec needs at least one [series.*] section")


def parse_curve_spec(text: str) -> CurveSpec:
    """Parse the INI form: a [curves] block plus one [series.LABEL] each."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise PlotError(f"unparseable curve spec: {exc}")
    options = dict(parser.items("curves")) if parser.has_section("curves") else {}
    known = {"metric", "window", "output", "step_column", "title"}
    unknown = set(options) - known
    if unknown:
        raise PlotError(f"unknown [curves] keys: {sorted(unknown)}")
    series = []
    for section in parser.sections():
        if section == "curves":
            continue
        if not section.startswith("series."):
            raise PlotError(f"unknown section [{section}]")
        body = dict(parser.items(section))
        if set(body) != {"glob"}:
            raise PlotError(f"[{section}] must have exactly one key: glob")
        series.append((section[len("series.") :], body["glob"]))
    return CurveSpec(
        series=series,
        metric=options.get("metric", "success_rate"),
        window=int(options.get("window", 1)),
        output=options.get("output", "curves.png"),
        step_column=options.get("step_column", "step"),
        title=options.get("title", ""),
    )


def moving_average(values: np.ndarray, window: int) -> np.ndarray:
    """Centered moving average; the window is clipped at the edges."""
    if window <= 1:
        return values
    half = window // 2
    out = np.empty_like(values, dtype=np.float64)
    n = len(values)
    for i in range(n):
        lo = max(0, i - half)
        hi = min(n, i + half + 1)
        out[i] = values[lo:hi].mean()
    return out


def aggregate(paths, metric: str, step_column: str = "step", window: int = 1):
    """Per-step mean and sample std of one metric across seed files.

    Returns ``(steps, mean, std)``. Files on finer step grids are linearly
    interpolated onto the coarsest grid among the inputs.
    """
    runs = []
    for path in paths:
        steps, values = read_columns(path, [step_column, metric])
        runs.append((np.asarray(steps), np.asarray(values)))
    grid = min((s for s, _ in runs), key=len)
    resampled = []
    for steps, values in runs:
        if len(steps) != len(grid) or np.any(steps != grid):
            warnings.warn(
                f"step grids differ; resampling onto the coarsest ({len(grid)} points)"
            )
            values = np.interp(grid, steps, values)
        resampled.append(moving_average(values, window))
    stack = np.stack(resampled)
    mean = stack.mean(axis=0)
    std = (
        stack.std(axis=0, ddof=1) if len(resampled) > 1 else np.zeros_like(mean)
    )
    return grid, mean, std


def sidecar_path(output: str) -> str:
    stem, dot, _ = str(output).rpartition(".")
    return (stem if dot else str(output)) + "_data.csv"


def render_curves(spec: CurveSpec) -> str:
    """Render the figure and its numeric sidecar; returns the image path."""
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    sidecar_rows = ["series,step,mean,std"]
    for label, pattern in spec.series:
        paths = expand_glob(pattern)
        steps, mean, std = aggregate(
            paths, spec.metric, step_column=spec.step_column, window=spec.window
        )
        ax.plot(steps, mean, label=label)
        ax.fill_between(steps, mean - std, mean + std, alpha=0.2)
        for s, m, d in zip(steps, mean, std):
            sidecar_rows.append(f"{label},{float(s)!r},{float(m)!r},{float(d)!r}")
    ax.set_xlabel(spec.step_column)
    ax.set_ylabel(spec.metric)
    if spec.title:
        ax.set_title(spec.title)
    ax.legend()
    fig.tight_layout()
    Path(spec.output).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(spec.output)
    plt.close(fig)
    with open(sidecar_path(spec.output), "w") as fh:
        fh.write("\n".join(sidecar_rows) + "\n")
    return str(spec.output)

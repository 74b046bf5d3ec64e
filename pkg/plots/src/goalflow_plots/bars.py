"""Final-score bar charts: one bar per label with a sample-std whisker.

Each label aggregates the final row of the metric column across the CSVs
its glob matches (one per seed). Whiskers are the sample standard deviation
(ddof=1), zero for a single file. The numeric sidecar CSV mirrors exactly
what is drawn.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .csvio import PlotError, expand_glob, read_columns
from .curves import sidecar_path


def final_values(paths, metric: str) -> np.ndarray:
    """The last logged value of the metric in each file."""
    return np.array([read_columns(p, [metric])[0][-1] for p in paths])


def parse_inputs(items) -> list:
    """``label=glob`` pairs from the command line, kept in order."""
    series = []
    for item in items:
        label, sep, pattern = str(item).partition("=")
        if not sep or not label or not pattern:
            raise PlotError(f"expected label=glob, got {item!r}")
        series.append((label, pattern))
    if not series:
        raise PlotError("no inputs given")
    return series


def render_bars(series, output: str, metric: str = "success_rate", title: str = "") -> str:
    """Render grouped bars with whiskers; returns the image path."""
    labels = []
    means = []
    stds = []
    counts = []
    for label, pattern in series:
        values = final_values(expand_glob(pattern), metric)
        labels.append(label)
        means.append(float(values.mean()))
        stds.append(float(values.std(ddof=1)) if len(values) > 1 else 0.0)
        counts.append(len(values))
    fig, ax = plt.subplots(figsize=(1.2 + 1.1 * len(labels), 4.0))
    x = np.arange(len(labels))
    ax.bar(x, means, yerr=stds, capsize=4)
    ax.set_xticks(x)
    ax.set_xticklabels(labels)
    ax.set_ylabel(metric)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    Path(output).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(output)
    plt.close(fig)
    rows = ["label,mean,std,n"]
    for label, mean, std, n in zip(labels, means, stds, counts):
        rows.append(f"{label},{mean!r},{std!r},{n}")
    with open(sidecar_path(output), "w") as fh:
        fh.write("\n".join(rows) + "\n")
    return str(output)

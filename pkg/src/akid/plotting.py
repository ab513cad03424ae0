"""PNG figures rendered from the summary CSVs."""
from __future__ import annotations

import csv
import math
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from akid.observer import DIST_COLUMNS  # noqa: E402

# (lower, upper) column pairs, outermost band first
_BANDS = (("min", "max"), ("p7", "p93"), ("p16", "p84"), ("p31", "p69"))


def read_scalars(path) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    series: dict[str, list[tuple[int, float]]] = defaultdict(list)
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            series[row["tag"]].append((int(row["clock"]), float(row["value"])))
    return {tag: (np.array([c for c, _ in v]), np.array([x for _, x in v])) for tag, v in series.items()}


def read_distributions(path) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """tag -> (clocks [n], percentiles [n, 9] ascending)."""
    series: dict[str, list] = defaultdict(list)
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            series[row["tag"]].append([int(row["clock"])] + [float(row[c]) for c in DIST_COLUMNS])
    out = {}
    for tag, rows in series.items():
        arr = np.array(rows)
        out[tag] = (arr[:, 0].astype(int), arr[:, 1:])
    return out


def _safe(tag: str) -> str:
    return tag.replace("/", "_")


def plot_scalars(csv_path, out_path) -> Path | None:
    """One panel per scalar tag against the clock."""
    series = read_scalars(csv_path)
    if not series:
        return None
    n = len(series)
    cols = min(n, 3)
    rows = math.ceil(n / cols)
    fig, axes = plt.subplots(rows, cols, figsize=(4 * cols, 3 * rows), squeeze=False)
    for ax, (tag, (clock, value)) in zip(axes.flat, sorted(series.items())):
        ax.plot(clock, value, marker="." if len(clock) < 20 else None)
        ax.set_title(tag)
        ax.set_xlabel("step")
    for ax in list(axes.flat)[n:]:
        ax.axis("off")
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=80)
    plt.close(fig)
    return out_path


def plot_distribution(clock, pct, tag, out_path) -> Path:
    """Nested percentile bands around the median, darker toward the centre."""
    col = {name: pct[:, i] for i, name in enumerate(DIST_COLUMNS)}
    fig, ax = plt.subplots(figsize=(5, 3))
    for depth, (lo, hi) in enumerate(_BANDS):
        ax.fill_between(clock, col[lo], col[hi], color="tab:orange", alpha=0.15 + 0.15 * depth, linewidth=0)
    ax.plot(clock, col["p50"], color="tab:red", linewidth=1, marker="." if len(clock) == 1 else None)
    if len(clock) == 1:
        # a band needs two clocks; show the single record as a range bar
        ax.vlines(clock, col["min"], col["max"], color="tab:orange")
    ax.set_title(tag)
    ax.set_xlabel("step")
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=80)
    plt.close(fig)
    return out_path


def plot_distributions(csv_path, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return [plot_distribution(clock, pct, tag, out_dir / f"dist_{_safe(tag)}.png")
            for tag, (clock, pct) in sorted(read_distributions(csv_path).items())]


def render_report(log_dir, out_dir=None) -> list[Path]:
    """Render every figure for a training log directory; returns written paths."""
    log_dir = Path(log_dir)
    out_dir = Path(out_dir) if out_dir is not None else log_dir / "figures"
    out_dir.mkdir(parents=True, exist_ok=True)
    paths: list[Path] = []
    if (log_dir / "scalars.csv").exists():
        p = plot_scalars(log_dir / "scalars.csv", out_dir / "scalars.png")
        if p is not None:
            paths.append(p)
    if (log_dir / "distributions.csv").exists():
        paths.extend(plot_distributions(log_dir / "distributions.csv", out_dir))
    return paths

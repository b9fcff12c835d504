"""Optional matplotlib rendering for the report-emitting subcommands.

The delimited outputs (findings JSONL, distribution CSV, series CSV) stay the
canonical artifacts; these helpers render the same data to PNG files next to
them when --figures is given.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from tempont.drilldown import AnomalyWindow, BottleneckNode, LatencySeries  # noqa: E402
from tempont.validation import DriftPoint, MismatchDistribution  # noqa: E402


def plot_mismatch_histograms(dist: MismatchDistribution, out: Path,
                             bucket_us: int = 100, top: int = 6) -> Path | None:
    pairs = sorted(dist.pairs(), key=lambda k: -len(dist.magnitudes[k]))[:top]
    if not pairs:
        return None
    fig, axes = plt.subplots(len(pairs), 1, figsize=(8, 2.4 * len(pairs)),
                             squeeze=False)
    for ax, key in zip(axes[:, 0], pairs):
        activity, aspect, pa, pb = key
        values = dist.magnitudes[key]
        ax.hist(values, bins=40, color="#4878a8", edgecolor="white")
        ax.set_title(f"{activity} [{aspect.value}]  {pa} vs {pb}  "
                     f"(n={len(values)})", fontsize=9)
        ax.set_xlabel("discrepancy [us]", fontsize=8)
        ax.tick_params(labelsize=8)
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def plot_drift_series(series: Mapping[tuple[str, str], Sequence[DriftPoint]],
                      out: Path) -> Path | None:
    if not series:
        return None
    fig, ax = plt.subplots(figsize=(9, 4))
    for (a, b), points in sorted(series.items()):
        ts = [p.window_mid_us / 1e6 for p in points]
        ys = [p.mean_gap_us / 1000 for p in points]
        ax.plot(ts, ys, marker=".", label=f"{a} -> {b}")
    ax.axhline(0, color="black", linewidth=0.8)
    ax.set_xlabel("time [s]")
    ax.set_ylabel("mean cross-component gap [ms]")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def plot_series(series_list: Sequence[LatencySeries], out: Path,
                windows: Sequence[AnomalyWindow] = ()) -> Path | None:
    """Stacked latency series, one panel per activity, anomaly windows shaded."""
    if not series_list:
        return None
    fig, axes = plt.subplots(len(series_list), 1,
                             figsize=(9, 1.8 * len(series_list)),
                             sharex=True, squeeze=False)
    for ax, s in zip(axes[:, 0], series_list):
        ts = [p.t_us / 1e6 for p in s.points]
        ys = [p.duration_us / 1000 for p in s.points]
        ax.plot(ts, ys, linewidth=0.8, color="#30506d")
        for w in windows:
            ax.axvspan(w.start_us / 1e6, w.end_us / 1e6, color="#d98866", alpha=0.25)
        ax.set_ylabel("ms", fontsize=8)
        ax.set_title(s.path.rsplit("/", 1)[-1], fontsize=9, loc="left")
        ax.tick_params(labelsize=8)
    axes[-1, 0].set_xlabel("trace begin [s]")
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def drill_series_paths(node: BottleneckNode) -> list[str]:
    """Paths worth plotting for a verdict tree: the implicated spine plus the
    dismissed siblings directly under it."""
    out = [node.path]
    for child in node.children:
        if child.verdict in ("Implicated", "Leaf-Implicated"):
            out.extend(drill_series_paths(child))
        else:
            out.append(child.path)
    seen: set[str] = set()
    ordered = []
    for p in out:
        if p not in seen:
            seen.add(p)
            ordered.append(p)
    return ordered

"""Static SVG figures: error-vs-N sweeps and conservation curves."""
from __future__ import annotations

from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
# fixed element ids so repeated runs write byte-identical SVGs
matplotlib.rcParams["svg.hashsalt"] = "surfrann"
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def error_sweep(rows, path, metric: str = "error", title: str = "") -> bool:
    """One log-log line per width ``M`` (seeds median-aggregated). False if nothing to plot."""
    lines = defaultdict(lambda: defaultdict(list))
    for r in rows:
        v = r.get(metric)
        if v is None or not np.isfinite(float(v)):
            continue
        tag = f"M={r['M']}" + (f" {r['point_set']}" if "point_set" in r else "") + \
              (f" {r['stage']}" if "stage" in r else "")
        lines[tag][int(r["N"])].append(float(v))
    if not lines:
        return False
    fig, ax = plt.subplots(figsize=(5, 3.6))
    for tag, pts in sorted(lines.items()):
        N = sorted(pts)
        ax.loglog(N, [np.median(pts[n]) for n in N], "o-", label=tag)
    ax.set_xlabel("collocation points")
    ax.set_ylabel(metric)
    ax.set_title(title)
    ax.grid(True, which="both", alpha=0.3)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return True


def conservation(series, path) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.6))
    floor = 1e-18
    ax.semilogy(series.t, np.maximum(series.E_V, floor), "o-", label="volume drift")
    if np.all(np.isfinite(series.E_m)):
        ax.semilogy(series.t, np.maximum(series.E_m, floor), "s-", label="mass drift")
    ax.set_xlabel("t")
    ax.set_ylabel("relative change")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)

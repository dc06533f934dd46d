"""Render experiment figures next to the delimited outputs.

Convergence curves per solver variant, and for gridworlds a map of the
detected bottlenecks and partition. Files are written as PNG with fixed
metadata so report directories stay diff-friendly.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_SAVE_KW = {"dpi": 120, "metadata": {"Software": "msmdp"}}


def _finalize(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    return path


def convergence_figure(traces: dict, path, title: str = "Convergence"):
    """Error-vs-iteration curves, one per variant; log scale when possible."""
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    drew = False
    for name in sorted(traces):
        trace = traces[name]
        errs = [e for e in trace.l2_error if e is not None]
        if not errs:
            continue
        its = trace.iterations[: len(errs)]
        ax.plot(its, np.maximum(errs, 1e-300), marker="o", markersize=2.5, label=name)
        drew = True
    if drew:
        ax.set_yscale("log")
        ax.legend(fontsize=8)
    ax.set_xlabel("outer iteration")
    ax.set_ylabel("L2 error vs reference")
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    return _finalize(fig, path)


def iteration_time_figure(traces: dict, path):
    """Cumulative wall time per iteration for each variant."""
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for name in sorted(traces):
        trace = traces[name]
        ax.plot(trace.iterations, trace.elapsed_ms, marker=".", label=name)
    ax.set_xlabel("outer iteration")
    ax.set_ylabel("elapsed ms")
    ax.set_title("Wall time")
    ax.legend(fontsize=8)
    ax.grid(True, alpha=0.3)
    return _finalize(fig, path)


def grid_partition_figure(grid_spec, partition, path):
    """Cluster membership and bottlenecks over the grid layout."""
    from msmdp.domains import grid_state_ids

    cells, ids = grid_state_ids(grid_spec)
    img = np.full((grid_spec.height, grid_spec.width), -2.0)
    for (x, y) in cells:
        img[y, x] = -1.0
    for k, c in enumerate(partition.clusters):
        for s in c.interior:
            x, y = cells[int(s)]
            img[y, x] = float(k)
    fig, ax = plt.subplots(figsize=(5.0, 5.0))
    ax.imshow(img, cmap="tab20", interpolation="nearest")
    for b in partition.bottlenecks:
        x, y = cells[int(b)]
        ax.plot(x, y, "kx", markersize=6)
    gx, gy = grid_spec.goal
    ax.plot(gx, gy, "ko", markersize=8, fillstyle="none")
    ax.set_title("Partition (x = bottleneck, o = goal)")
    ax.set_xticks([])
    ax.set_yticks([])
    return _finalize(fig, path)


def grid_values_figure(grid_spec, v, path, title: str = "Values"):
    from msmdp.domains import grid_state_ids

    cells, _ = grid_state_ids(grid_spec)
    img = np.full((grid_spec.height, grid_spec.width), np.nan)
    for sid, (x, y) in enumerate(cells):
        img[y, x] = v[sid]
    fig, ax = plt.subplots(figsize=(5.0, 5.0))
    im = ax.imshow(img, interpolation="nearest")
    fig.colorbar(im, ax=ax, shrink=0.8)
    ax.set_title(title)
    ax.set_xticks([])
    ax.set_yticks([])
    return _finalize(fig, path)

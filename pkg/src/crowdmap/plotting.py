"""SVG renderings of run artifacts. Output is byte-stable for fixed input."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from crowdmap.map_model import ElementClass, VectorMap  # noqa: E402

CLASS_COLORS = {ElementClass.PED: "tab:green", ElementClass.DIV: "tab:orange", ElementClass.BOU: "tab:blue"}

_RC = {"svg.hashsalt": "crowdmap", "svg.fonttype": "none"}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
    return path


def plot_map_overlay(gt: VectorMap, fused: VectorMap, path, title: str = "") -> Path:
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(10, 4))
        for e in gt:
            ax.plot(e.xy[:, 0], e.xy[:, 1], color="0.75", lw=3.0, solid_capstyle="round")
        for e in fused:
            ax.plot(e.xy[:, 0], e.xy[:, 1], color=CLASS_COLORS[e.cls], lw=1.2)
        handles = [plt.Line2D([], [], color="0.75", lw=3, label="ground truth")]
        handles += [plt.Line2D([], [], color=c, label=k.value) for k, c in CLASS_COLORS.items()]
        ax.legend(handles=handles, loc="upper right", fontsize=8)
        ax.set_aspect("equal", adjustable="datalim")
        ax.set_xlabel("x [m]")
        ax.set_ylabel("y [m]")
        if title:
            ax.set_title(title)
        return _save(fig, path)


def plot_trajectory_errors(errors_by_cycle: dict, path) -> Path:
    """Lateral error along the trajectory, one line per cycle."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(8, 3))
        for cycle in sorted(errors_by_cycle):
            err = np.asarray(errors_by_cycle[cycle], dtype=float)
            ax.plot(np.arange(len(err)), err, lw=1.0, label=f"cycle {cycle}")
        ax.set_xlabel("frame")
        ax.set_ylabel("lateral error [m]")
        ax.legend(fontsize=8)
        return _save(fig, path)


def plot_map_curve(cycles, maps, path) -> Path:
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.plot(list(cycles), list(maps), marker="o")
        ax.set_xlabel("cycle")
        ax.set_ylabel("mAP")
        ax.set_ylim(0.0, 1.05)
        ax.set_xticks(list(cycles))
        return _save(fig, path)

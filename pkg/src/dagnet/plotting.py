"""SVG figures of roll-outs and ablation results.

Colour convention: observed prefix black, ground-truth future blue,
prediction red. Every trajectory is one polyline tagged with a ``gid`` such
as ``obs-3`` / ``truth-3`` / ``pred-3`` so the SVG can be inspected
programmatically.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .goals import SceneGrid  # noqa: E402

OBSERVED_COLOR = "#000000"
TRUTH_COLOR = "#0000ff"
PREDICTION_COLOR = "#ff0000"

_RC = {
    "svg.fonttype": "none",
    "svg.hashsalt": "dagnet",  # stable element ids across runs
    "path.simplify": False,  # keep one vertex per time-step
    "font.size": 9,
}


def _writable(path) -> Path:
    p = Path(path)
    if p.exists() and p.is_dir():
        raise OSError(f"cannot write figure: {p} is a directory")
    if not p.parent.exists():
        raise OSError(f"cannot write figure: directory {p.parent} does not exist")
    return p


def _draw_grid(ax, grid: SceneGrid) -> None:
    for x in np.linspace(grid.x_min, grid.x_max, grid.cols + 1):
        ax.plot([x, x], [grid.y_min, grid.y_max], color="#bbbbbb", lw=0.5, zorder=0, gid="grid")
    for y in np.linspace(grid.y_min, grid.y_max, grid.rows + 1):
        ax.plot([grid.x_min, grid.x_max], [y, y], color="#bbbbbb", lw=0.5, zorder=0, gid="grid")


def plot_rollout(positions, mask, T_obs: int, prediction, path, grid: SceneGrid | None = None,
                 title: str = "") -> Path:
    """Draw one scene: ``positions`` ``[n, T_obs + T_pred, 2]`` and
    ``prediction`` ``[n, T_pred, 2]``. Agents absent at the last observed step
    are skipped."""
    pos = np.asarray(positions, dtype=np.float64)
    pred = np.asarray(prediction, dtype=np.float64)
    m = np.ones(pos.shape[:2], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    n, T, _ = pos.shape
    T_pred = T - T_obs
    if T_obs < 1 or T_pred < 1:
        raise ValueError(f"scene of {T} steps cannot be split at T_obs={T_obs}")
    if pred.shape != (n, T_pred, 2):
        raise ValueError(f"prediction {pred.shape} does not match scene ({n}, {T_pred}, 2)")
    out = _writable(path)
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(5, 5))
        if grid is not None:
            _draw_grid(ax, grid)
        for i in range(n):
            if not m[i, T_obs - 1]:
                continue
            ax.plot(pos[i, :T_obs, 0], pos[i, :T_obs, 1], color=OBSERVED_COLOR, lw=1.2, gid=f"obs-{i}")
            ax.plot(pos[i, T_obs:, 0], pos[i, T_obs:, 1], color=TRUTH_COLOR, lw=1.2, gid=f"truth-{i}")
            ax.plot(pred[i, :, 0], pred[i, :, 1], color=PREDICTION_COLOR, lw=1.2, gid=f"pred-{i}")
        ax.set_aspect("equal", adjustable="datalim")
        if title:
            ax.set_title(title)
        fig.savefig(out, format="svg", metadata={"Date": None})
        plt.close(fig)
    return out


def plot_ablation(rows: list, path) -> Path:
    """Bar chart of ADE and FDE per model variant."""
    out = _writable(path)
    labels = [r.variant.label for r in rows]
    ades = [r.report.ade for r in rows]
    fdes = [r.report.fde for r in rows]
    units = rows[0].report.units if rows else ""
    x = np.arange(len(rows))
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.bar(x - 0.2, ades, width=0.4, label="ADE", color="#4c72b0")
        ax.bar(x + 0.2, fdes, width=0.4, label="FDE", color="#dd8452")
        ax.set_xticks(x)
        ax.set_xticklabels(labels)
        ax.set_ylabel(f"error ({units})")
        ax.legend(frameon=False)
        ax.spines["right"].set_visible(False)
        ax.spines["top"].set_visible(False)
        fig.tight_layout()
        fig.savefig(out, format="svg", metadata={"Date": None})
        plt.close(fig)
    return out

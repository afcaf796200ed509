"""Goal grid, one-hot goal extraction and relative/absolute coordinates."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SceneGrid:
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    rows: int
    cols: int

    def __post_init__(self):
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise ValueError(f"degenerate grid bounds {self.bounds}")
        if self.rows < 1 or self.cols < 1:
            raise ValueError(f"grid needs at least one cell, got {self.rows}x{self.cols}")

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    @property
    def K(self) -> int:
        return self.rows * self.cols

    @property
    def center(self) -> np.ndarray:
        return np.array([(self.x_min + self.x_max) / 2, (self.y_min + self.y_max) / 2])

    @property
    def half_extent(self) -> np.ndarray:
        return np.array([(self.x_max - self.x_min) / 2, (self.y_max - self.y_min) / 2])

    @classmethod
    def around(cls, points: np.ndarray, rows: int = 10, cols: int = 10, margin: float = 0.0) -> "SceneGrid":
        """Bounding-box grid over a point cloud ``[..., 2]``."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        lo = pts.min(axis=0) - margin
        hi = pts.max(axis=0) + margin
        hi = np.where(hi > lo, hi, lo + 1.0)
        return cls(float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1]), rows, cols)


# 94 x 50 ft court, centered at the origin after play normalization
COURT_GRID = SceneGrid(-47.0, -25.0, 47.0, 25.0, rows=5, cols=10)


@dataclass
class DisplacementSequence:
    initial_position: np.ndarray  # (2,)
    displacements: np.ndarray  # (T-1, 2)


def to_relative(trajectory) -> DisplacementSequence:
    traj = np.asarray(trajectory, dtype=np.float64)
    if traj.ndim != 2 or traj.shape[1] != 2:
        raise ValueError(f"trajectory must be [T, 2], got {traj.shape}")
    if len(traj) < 2:
        raise ValueError(f"need at least 2 positions, got {len(traj)}")
    a, b = traj[:-1], traj[1:]
    disp = b - a
    # nudge by single ulps where a + (b - a) != b, so to_absolute reproduces
    # the input bit for bit whenever some float displacement can
    for _ in range(4):
        miss = (a + disp) != b
        if not miss.any():
            break
        toward = np.where(a + disp < b, np.inf, -np.inf)
        disp = np.where(miss, np.nextafter(disp, toward), disp)
    return DisplacementSequence(traj[0].copy(), disp)


def to_absolute(seq: DisplacementSequence) -> np.ndarray:
    start = np.asarray(seq.initial_position, dtype=np.float64).reshape(1, 2)
    disp = np.asarray(seq.displacements, dtype=np.float64).reshape(-1, 2)
    # anchored left-to-right accumulation, same association as to_relative
    return np.cumsum(np.concatenate([start, disp]), axis=0)


def position_to_cell(grid: SceneGrid, position) -> int | np.ndarray:
    """Cell index ``row * cols + col`` with row 0 at ``y_min``.

    Cells are ``(lo, hi]`` so a coordinate on an interior boundary belongs to
    the lower-index cell; the first cell also takes its min edge. Positions
    outside the grid are clamped to the border cells. Accepts ``(2,)`` or
    ``[..., 2]``.
    """
    pos = np.asarray(position, dtype=np.float64)
    fx = (pos[..., 0] - grid.x_min) / (grid.x_max - grid.x_min) * grid.cols
    fy = (pos[..., 1] - grid.y_min) / (grid.y_max - grid.y_min) * grid.rows
    col = np.clip(np.ceil(fx) - 1, 0, grid.cols - 1).astype(np.int64)
    row = np.clip(np.ceil(fy) - 1, 0, grid.rows - 1).astype(np.int64)
    idx = row * grid.cols + col
    return int(idx) if np.ndim(idx) == 0 else idx


def onehot(indices, K: int) -> np.ndarray:
    idx = np.asarray(indices, dtype=np.int64)
    out = np.zeros(idx.shape + (K,))
    np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
    return out


def goal_anchor_steps(T: int, w: int) -> np.ndarray:
    """For each step t, the step whose position defines its goal."""
    if w < 1 or T < 1:
        raise ValueError(f"need w >= 1 and T >= 1, got w={w}, T={T}")
    t = np.arange(T)
    return np.minimum((t // w + 1) * w - 1, T - 1)


def extract_goals(grid: SceneGrid, trajectory, w: int) -> np.ndarray:
    """One-hot goals ``[T, K]`` from an absolute trajectory ``[T, 2]``.

    Works on ``[n, T, 2]`` as well, returning ``[n, T, K]``.
    """
    traj = np.asarray(trajectory, dtype=np.float64)
    T = traj.shape[-2]
    anchors = goal_anchor_steps(T, w)
    cells = position_to_cell(grid, traj[..., anchors, :])
    return onehot(cells, grid.K)

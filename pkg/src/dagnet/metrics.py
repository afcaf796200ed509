"""Average and final displacement errors."""

from __future__ import annotations

import numpy as np


def _check(predicted, truth, mask):
    pred = np.asarray(predicted, dtype=np.float64)
    true = np.asarray(truth, dtype=np.float64)
    if pred.shape != true.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {true.shape} differ in shape")
    if pred.ndim != 3 or pred.shape[-1] != 2:
        raise ValueError(f"trajectories must be [n, T, 2], got {pred.shape}")
    if mask is None:
        m = np.ones(pred.shape[:2], dtype=bool)
    else:
        m = np.asarray(mask, dtype=bool)
        if m.shape != pred.shape[:2]:
            raise ValueError(f"mask {m.shape} does not match trajectories {pred.shape[:2]}")
    return pred, true, m


def displacement_errors(predicted, truth) -> np.ndarray:
    """Per (agent, step) Euclidean distance ``[n, T]``."""
    diff = np.asarray(predicted, dtype=np.float64) - np.asarray(truth, dtype=np.float64)
    return np.sqrt(diff[..., 0] ** 2 + diff[..., 1] ** 2)


def ade(predicted, truth, mask=None) -> float:
    """Mean Euclidean distance over all valid (agent, step) pairs."""
    pred, true, m = _check(predicted, truth, mask)
    if not m.any():
        raise ValueError("ade: no valid (agent, step) entries")
    return float(displacement_errors(pred, true)[m].mean())


def fde(predicted, truth, mask=None) -> float:
    """Mean Euclidean distance at the last step, over agents valid there."""
    pred, true, m = _check(predicted, truth, mask)
    last = m[:, -1]
    if not last.any():
        raise ValueError("fde: no agent is valid at the final step")
    return float(displacement_errors(pred[:, -1:], true[:, -1:])[last, 0].mean())

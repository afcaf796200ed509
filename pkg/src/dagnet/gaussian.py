"""Diagonal Gaussians parameterized by mean and log-variance.

All functions accept a single vector ``[d]`` or a batch ``[n, d]``; reductions
run over the last axis, so a batch yields one value per row.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

LOG_VAR_MIN = -20.0
LOG_VAR_MAX = 10.0
PROB_FLOOR = 1e-12
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass
class GaussianParams:
    mean: Tensor
    log_var: Tensor

    def __post_init__(self):
        if self.mean.shape != self.log_var.shape:
            raise ShapeError(f"mean {self.mean.shape} and log_var {self.log_var.shape} differ")

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    @property
    def std(self) -> np.ndarray:
        return np.exp(0.5 * self.log_var.data)

    @classmethod
    def from_head(cls, out: Tensor, clamp: bool = True) -> "GaussianParams":
        """Split a ``[n, 2d]`` network output into mean and (clamped) log-variance."""
        d = out.shape[-1] // 2
        log_var = out[:, d:]
        if clamp:
            log_var = ad.clip(log_var, LOG_VAR_MIN, LOG_VAR_MAX)
        return cls(out[:, :d], log_var)


def sample_reparameterized(p: GaussianParams, noise) -> Tensor:
    noise = ad._as_tensor(noise)
    if noise.shape != p.mean.shape:
        raise ShapeError(f"noise {noise.shape} does not match distribution {p.mean.shape}")
    return p.mean + ad.exp(p.log_var * 0.5) * noise


def log_prob(p: GaussianParams, x) -> Tensor:
    x = ad._as_tensor(x)
    if x.shape != p.mean.shape:
        raise ShapeError(f"value {x.shape} does not match distribution {p.mean.shape}")
    diff = x - p.mean
    per_dim = -_HALF_LOG_2PI - 0.5 * p.log_var - 0.5 * diff * diff * ad.exp(-p.log_var)
    return ad.reduce_sum(per_dim, axis=-1)


def kl_divergence(q: GaussianParams, p: GaussianParams) -> Tensor:
    """KL(q || p) in closed form."""
    if q.mean.shape != p.mean.shape:
        raise ShapeError(f"kl: dimension mismatch {q.mean.shape} vs {p.mean.shape}")
    diff = q.mean - p.mean
    inv_var_p = ad.exp(-p.log_var)
    per_dim = p.log_var - q.log_var + (ad.exp(q.log_var) + diff * diff) * inv_var_p - 1.0
    return ad.reduce_sum(per_dim, axis=-1) * 0.5


def cross_entropy_categorical(target_onehot, predicted_probs) -> Tensor:
    """``-log`` of the predicted mass at the target cell, floored at 1e-12."""
    target = np.asarray(target_onehot.data if isinstance(target_onehot, Tensor) else target_onehot,
                        dtype=np.float64)
    probs = ad._as_tensor(predicted_probs)
    if target.shape != probs.shape:
        raise ShapeError(f"target {target.shape} does not match predictions {probs.shape}")
    rows = target.reshape(-1, target.shape[-1])
    if not (np.all((rows == 0) | (rows == 1)) and np.all(rows.sum(axis=-1) == 1)):
        raise ValueError("target is not one-hot")
    logp = ad.log(ad.clip(probs, PROB_FLOOR, 1.0))
    return -ad.reduce_sum(logp * target, axis=-1)

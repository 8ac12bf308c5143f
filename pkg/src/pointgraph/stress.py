"""Kruskal stress between input-space and mapped-space distances, and the stress-regularized loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DegenerateInputError(ValueError):
    pass


@dataclass(frozen=True)
class StressValue:
    s: float
    s_squared: float


def pairwise_distances(points: np.ndarray) -> np.ndarray:
    """Euclidean distances over pairs i < j in lexicographic (i, j) order."""
    x = np.asarray(points, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if len(x) < 2:
        raise ValueError("need at least 2 points")
    i, j = np.triu_indices(len(x), k=1)
    return np.sqrt(((x[j] - x[i]) ** 2).sum(axis=1))


def stress(d: np.ndarray, d_hat: np.ndarray) -> StressValue:
    d = np.asarray(d, dtype=np.float64)
    d_hat = np.asarray(d_hat, dtype=np.float64)
    if d.shape != d_hat.shape:
        raise ValueError(f"distance vectors differ in length: {d.shape} vs {d_hat.shape}")
    denom = float(np.sum(d * d))
    if denom == 0:
        raise DegenerateInputError("all input distances are zero")
    s2 = float(np.sum((d - d_hat) ** 2)) / denom
    return StressValue(float(np.sqrt(s2)), s2)


def _full_distances(x: np.ndarray) -> np.ndarray:
    diff = x[..., :, None, :] - x[..., None, :, :]
    return np.sqrt((diff * diff).sum(axis=-1)), diff


def stress_squared_grad(points_in: np.ndarray, mapped: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Squared stress and its gradient w.r.t. the mapped coordinates.

    Works on a single cloud (N, d) or a batch (B, N, d); ``s_squared`` then has
    the leading batch shape. Pairs that coincide in the mapped space contribute
    a zero subgradient.
    """
    x = np.asarray(points_in)
    y = np.asarray(mapped)
    if x.shape[:-1] != y.shape[:-1]:
        raise ValueError("points_in and mapped must index the same points")
    d, _ = _full_distances(x)
    d_hat, diff = _full_distances(y)
    # each unordered pair appears twice in the full matrix
    denom = 0.5 * (d * d).sum(axis=(-1, -2))
    if np.any(denom == 0):
        raise DegenerateInputError("input cloud has all points identical")
    resid = d_hat - d
    s2 = 0.5 * (resid * resid).sum(axis=(-1, -2)) / denom
    with np.errstate(divide="ignore", invalid="ignore"):
        coef = np.where(d_hat > 0, resid / d_hat, 0.0)
    grad = (2.0 / denom)[..., None, None] * (coef[..., None] * diff).sum(axis=-2)
    return s2, grad


def combined_loss(task_loss: float, s_squared, gamma: float) -> float:
    """Task loss plus ``gamma`` times the batch mean of per-cloud squared stress."""
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    s2 = float(np.mean(s_squared)) if np.size(s_squared) else 0.0
    if not (np.isfinite(task_loss) and np.isfinite(s2)):
        raise FloatingPointError("non-finite loss component")
    return float(task_loss) + gamma * s2

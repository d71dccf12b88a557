"""Trajectory distances, tricube-weighted neighbour batches, batch loss."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffmath as dm
from .odecore import Trajectory

__all__ = [
    "DISTANCE_GRID",
    "BatchPlan",
    "trajectory_distance",
    "distance_matrix",
    "tricube_weight",
    "assign_batches",
    "random_batches",
    "batch_loss",
    "batch_purity",
    "write_distance_csv",
    "write_plan_csv",
]

# 11 equidistant points on [0, 10]; 10 is the upper end of the follow-up window
DISTANCE_GRID = np.linspace(0.0, 10.0, 11)


def _values(traj) -> tuple[np.ndarray | None, np.ndarray]:
    if isinstance(traj, Trajectory):
        return traj.times, traj.values
    return None, np.asarray(traj, dtype=np.float64)


def trajectory_distance(traj_i, traj_j) -> float:
    """Centred discretised L2 distance between two trajectories.

    Each trajectory has its per-dimension grid mean removed, then
    ``d = sqrt(sum_t ||mu_i(t) - mu_j(t)||^2 / m)`` with ``m + 1`` grid points.
    Accepts :class:`Trajectory` objects or ``(n_points, dim)`` arrays.
    """
    ti, a = _values(traj_i)
    tj, b = _values(traj_j)
    if a.shape != b.shape or (ti is not None and tj is not None and not np.array_equal(ti, tj)):
        raise ValueError("trajectories are not on the same grid")
    m = a.shape[0] - 1
    if m < 1:
        raise ValueError("need at least two grid points")
    diff = (a - a.mean(axis=0)) - (b - b.mean(axis=0))
    return float(np.sqrt(np.sum(diff * diff) / m))


def distance_matrix(trajectories: np.ndarray) -> np.ndarray:
    """Pairwise distances for an ``(n, n_points, dim)`` array.

    Rows containing NaN (failed solves) are at infinite distance from
    everyone but themselves.
    """
    trajs = np.asarray(trajectories, dtype=np.float64)
    n, T = trajs.shape[:2]
    centred = trajs - trajs.mean(axis=1, keepdims=True)
    flat = centred.reshape(n, -1)
    D = np.zeros((n, n))
    for i in range(n):
        diff = flat[i + 1 :] - flat[i]
        d = np.sqrt(np.sum(diff * diff, axis=1) / (T - 1))
        D[i, i + 1 :] = d
        D[i + 1 :, i] = d
    D[np.isnan(D)] = np.inf
    np.fill_diagonal(D, 0.0)
    return D


def tricube_weight(d, bandwidth: float = 1.0):
    """``(1 - (d/h)^3)^3`` for ``d < h``, else 0."""
    if not bandwidth > 0:
        raise ValueError("bandwidth must be positive")
    u = np.asarray(d, dtype=np.float64) / bandwidth
    w = np.where(u < 1.0, (1.0 - np.clip(u, 0.0, 1.0) ** 3) ** 3, 0.0)
    return float(w) if w.ndim == 0 else w


@dataclass(frozen=True)
class BatchPlan:
    """``members[i]`` are indices of batch ``B_i`` (reference ``i`` first)."""

    members: tuple[np.ndarray, ...]
    weights: tuple[np.ndarray, ...]

    def __len__(self) -> int:
        return len(self.members)


def assign_batches(trajectories, b: int, bandwidth: float = 1.0, distances: np.ndarray | None = None) -> BatchPlan:
    """Each individual plus its ``b - 1`` nearest neighbours, tricube-weighted.

    Ties in distance go to the smaller index.  If a batch has no kernel
    mass at all, the reference gets weight 1 and everyone else 0.
    """
    D = distance_matrix(trajectories) if distances is None else np.asarray(distances)
    n = D.shape[0]
    if not 1 <= b <= n:
        raise ValueError(f"batch size must lie in [1, {n}], got {b}")
    idx = np.arange(n)
    members, weights = [], []
    for i in range(n):
        key = D[i].copy()
        key[i] = -1.0
        order = np.lexsort((idx, key))[:b]
        k = tricube_weight(D[i, order], bandwidth)
        total = k.sum()
        if total > 0 and np.isfinite(total):
            w = k / total
        else:
            w = np.zeros(b)
            w[0] = 1.0
        members.append(order)
        weights.append(w)
    return BatchPlan(tuple(members), tuple(weights))


def random_batches(n: int, b: int, rng: np.random.Generator) -> BatchPlan:
    """Reference plus ``b - 1`` uniformly drawn others, equal weights."""
    if not 1 <= b <= n:
        raise ValueError(f"batch size must lie in [1, {n}], got {b}")
    members, weights = [], []
    for i in range(n):
        others = np.delete(np.arange(n), i)
        pick = rng.choice(others, size=b - 1, replace=False)
        members.append(np.concatenate([[i], pick]).astype(int))
        weights.append(np.full(b, 1.0 / b))
    return BatchPlan(tuple(members), tuple(weights))


def batch_loss(weights: Sequence[float], member_losses: Sequence) -> dm.Tensor:
    """Weighted sum of member losses; differentiable through the members."""
    if len(weights) != len(member_losses):
        raise ValueError("one weight per member loss required")
    return dm.lincomb(list(member_losses), [float(w) for w in weights])


def batch_purity(plan: BatchPlan, groups) -> float:
    """Mean fraction of batch members sharing the reference's group."""
    groups = np.asarray(groups)
    fr = [np.mean(groups[m] == groups[m[0]]) for m in plan.members]
    return float(np.mean(fr))


def write_distance_csv(D: np.ndarray, ids: Sequence[str], path) -> None:
    with open(Path(path), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", *ids])
        for ident, row in zip(ids, D):
            w.writerow([ident, *(f"{x:.17g}" for x in row)])


def write_plan_csv(plan: BatchPlan, ids: Sequence[str], path) -> None:
    with open(Path(path), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["reference_id", "member_id", "weight"])
        for members, weights in zip(plan.members, plan.weights):
            ref = ids[members[0]]
            for j, wt in zip(members, weights):
                w.writerow([ref, ids[j], f"{wt:.17g}"])

"""Recovery metrics against simulation ground truth.

A VAE may rescale, shift, flip or swap its latent coordinates freely, so
fitted trajectories are first mapped onto the true ones with an
:class:`AlignmentMap` fitted on group-mean trajectories.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datagen import TRUE_SYSTEMS, Dataset, true_state
from .diffmath import no_grad
from .model import ModelParams, encode, ode_net
from .odecore import OdeSystem, SolverConfig, SolverInstability, solve_grid

__all__ = [
    "EVAL_GRID",
    "AlignmentMap",
    "RecoveryReport",
    "fitted_trajectories",
    "true_trajectories",
    "fit_alignment",
    "trend_labels",
    "label_accuracy",
    "group_recovery_accuracy",
    "trajectory_rmse",
    "group_mean_rmse",
    "recovery_report",
    "write_recovery_csv",
    "write_trajectory_csv",
]

EVAL_GRID = np.linspace(0.0, 10.0, 11)


@dataclass(frozen=True)
class AlignmentMap:
    """``aligned[..., d] = sign[d] * scale[d] * fitted[..., perm[d]] + offset[d]``."""

    perm: tuple[int, ...]
    sign: tuple[float, ...]
    scale: tuple[float, ...]
    offset: tuple[float, ...]

    def apply(self, fitted: np.ndarray) -> np.ndarray:
        fitted = np.asarray(fitted, dtype=np.float64)
        out = np.empty_like(fitted)
        for d, src in enumerate(self.perm):
            out[..., d] = self.sign[d] * self.scale[d] * fitted[..., src] + self.offset[d]
        return out

    @classmethod
    def identity(cls, dim: int = 2) -> AlignmentMap:
        return cls(tuple(range(dim)), (1.0,) * dim, (1.0,) * dim, (0.0,) * dim)


def fitted_trajectories(
    ds: Dataset, params: ModelParams, sys: OdeSystem, grid=EVAL_GRID, solver: SolverConfig | None = None
) -> np.ndarray:
    """Latent ODE solutions from each individual's first encoding, shape
    ``(n, len(grid), 2)``; rows of failed solves are NaN."""
    grid = np.asarray(grid, dtype=np.float64)
    P = params.bind()
    out = np.full((len(ds), len(grid), params.spec.latent), np.nan)
    with no_grad():
        for i, ind in enumerate(ds.individuals):
            mu0, _ = encode(ind.values[0], P)
            eta = ode_net(ind.baseline, P)
            try:
                out[i] = solve_grid(sys, eta, mu0, grid, solver).values
            except SolverInstability:
                pass
    return out


def true_trajectories(ds: Dataset, scenario: str, grid=EVAL_GRID) -> np.ndarray:
    if not ds.has_truth:
        raise ValueError("dataset carries no ground truth")
    grid = np.asarray(grid, dtype=np.float64)
    cache: dict[tuple, np.ndarray] = {}
    out = np.empty((len(ds), len(grid), 2))
    for i, ind in enumerate(ds.individuals):
        key = tuple(ind.true_eta)
        if key not in cache:
            cache[key] = np.array([true_state(scenario, ind.true_eta, t) for t in grid])
        out[i] = cache[key]
    return out


def fit_alignment(fitted, truth) -> AlignmentMap:
    """Exhaustive search over dimension permutations and sign patterns with a
    least-squares non-negative scale and offset per dimension."""
    fitted = np.asarray(fitted, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if fitted.shape != truth.shape:
        raise ValueError(f"shape mismatch {fitted.shape} vs {truth.shape}")
    dim = fitted.shape[-1]
    F = fitted.reshape(-1, dim)
    Y = truth.reshape(-1, dim)
    best, best_err = None, np.inf
    for perm in itertools.permutations(range(dim)):
        for signs in itertools.product((1.0, -1.0), repeat=dim):
            scales, offsets, err = [], [], 0.0
            for d in range(dim):
                x = signs[d] * F[:, perm[d]]
                y = Y[:, d]
                xc = x - x.mean()
                sxx = float(xc @ xc)
                if sxx <= 1e-300:
                    a = 1.0
                else:
                    a = max(float(xc @ (y - y.mean())) / sxx, 0.0)
                c = float(y.mean() - a * x.mean())
                r = y - (a * x + c)
                err += float(r @ r)
                scales.append(a)
                offsets.append(c)
            if best is None or err < best_err - 1e-12 * max(1.0, best_err):
                best_err = err
                best = AlignmentMap(perm, signs, tuple(scales), tuple(offsets))
    return best


def _group_means(values: np.ndarray, groups: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    labels = np.unique(groups)
    means = np.array([np.nanmean(values[groups == g], axis=0) for g in labels])
    return labels, means


def trend_labels(aligned: np.ndarray) -> np.ndarray:
    """+1 where the second dimension increases over the grid, else -1."""
    change = aligned[:, -1, 1] - aligned[:, 0, 1]
    return np.where(change > 0, 1, -1)


def label_accuracy(labels, groups) -> float:
    """Best match fraction over the two label-to-group assignments."""
    labels = np.asarray(labels)
    groups = np.asarray(groups)
    uniq = np.unique(groups)
    if len(uniq) != 2:
        raise ValueError("label accuracy needs exactly two true groups")
    truth = np.where(groups == uniq[0], 1, -1)
    acc = float(np.mean(labels == truth))
    return max(acc, 1.0 - acc)


def _aligned(ds, params, sys, scenario, grid, solver):
    fitted = fitted_trajectories(ds, params, sys, grid, solver)
    truth = true_trajectories(ds, scenario, grid)
    groups = ds.groups
    ok = ~np.isnan(fitted).any(axis=(1, 2))
    _, fit_means = _group_means(fitted[ok], groups[ok])
    _, true_means = _group_means(truth[ok], groups[ok])
    amap = fit_alignment(fit_means, true_means)
    return amap, amap.apply(fitted), truth, groups, ok


def _scenario(ds: Dataset, params: ModelParams) -> str:
    scenario = params.scenario or ds.metadata.get("scenario", "")
    if scenario not in TRUE_SYSTEMS:
        raise ValueError("scenario unknown; cannot build ground-truth trajectories")
    return scenario


def group_recovery_accuracy(
    ds: Dataset, params: ModelParams, sys: OdeSystem, grid=EVAL_GRID, solver: SolverConfig | None = None
) -> float:
    """Fraction of individuals whose aligned second latent dimension moves in
    the direction that identifies their true group."""
    if not ds.has_truth:
        raise ValueError("dataset carries no ground truth")
    _, aligned, _, groups, ok = _aligned(ds, params, sys, _scenario(ds, params), grid, solver)
    labels = np.zeros(len(ds), dtype=int)
    labels[ok] = trend_labels(aligned[ok])
    return label_accuracy(labels, groups)


def trajectory_rmse(
    ds: Dataset, params: ModelParams, sys: OdeSystem, grid=EVAL_GRID, solver: SolverConfig | None = None
) -> dict[int, np.ndarray]:
    """Per group, RMSE of aligned fitted vs true trajectories per dimension."""
    _, aligned, truth, groups, ok = _aligned(ds, params, sys, _scenario(ds, params), grid, solver)
    out = {}
    for g in np.unique(groups):
        sel = (groups == g) & ok
        out[int(g)] = np.sqrt(np.mean((aligned[sel] - truth[sel]) ** 2, axis=(0, 1)))
    return out


def group_mean_rmse(
    ds: Dataset, params: ModelParams, sys: OdeSystem, grid=EVAL_GRID, solver: SolverConfig | None = None
) -> float:
    """RMSE between aligned group-mean fitted and group-mean true trajectories."""
    _, aligned, truth, groups, ok = _aligned(ds, params, sys, _scenario(ds, params), grid, solver)
    _, fm = _group_means(aligned[ok], groups[ok])
    _, tm = _group_means(truth[ok], groups[ok])
    return float(np.sqrt(np.mean((fm - tm) ** 2)))


@dataclass
class RecoveryReport:
    accuracy: float
    rmse: dict[int, np.ndarray]
    group_mean_rmse: float
    alignment: AlignmentMap
    trend: dict[str, int] = field(default_factory=dict)


def recovery_report(
    ds: Dataset, params: ModelParams, sys: OdeSystem, grid=EVAL_GRID, solver: SolverConfig | None = None
) -> RecoveryReport:
    scenario = _scenario(ds, params)
    amap, aligned, truth, groups, ok = _aligned(ds, params, sys, scenario, grid, solver)
    labels = np.zeros(len(ds), dtype=int)
    labels[ok] = trend_labels(aligned[ok])
    rmse = {}
    for g in np.unique(groups):
        sel = (groups == g) & ok
        rmse[int(g)] = np.sqrt(np.mean((aligned[sel] - truth[sel]) ** 2, axis=(0, 1)))
    _, fm = _group_means(aligned[ok], groups[ok])
    _, tm = _group_means(truth[ok], groups[ok])
    return RecoveryReport(
        accuracy=label_accuracy(labels, groups),
        rmse=rmse,
        group_mean_rmse=float(np.sqrt(np.mean((fm - tm) ** 2))),
        alignment=amap,
        trend={ind.id: int(lab) for ind, lab in zip(ds.individuals, labels)},
    )


def write_recovery_csv(report: RecoveryReport, path) -> None:
    with open(Path(path), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "group", "dim", "value"])
        w.writerow(["accuracy", "", "", f"{report.accuracy:.17g}"])
        w.writerow(["group_mean_rmse", "", "", f"{report.group_mean_rmse:.17g}"])
        for g, vals in sorted(report.rmse.items()):
            for d, v in enumerate(vals, start=1):
                w.writerow(["rmse", g, d, f"{v:.17g}"])
        a = report.alignment
        for d in range(len(a.perm)):
            w.writerow(["align_source_dim", "", d + 1, a.perm[d] + 1])
            w.writerow(["align_sign", "", d + 1, f"{a.sign[d]:g}"])
            w.writerow(["align_scale", "", d + 1, f"{a.scale[d]:.17g}"])
            w.writerow(["align_offset", "", d + 1, f"{a.offset[d]:.17g}"])
        for ident, lab in report.trend.items():
            w.writerow(["trend", ident, 2, lab])


def write_trajectory_csv(
    ds: Dataset,
    params: ModelParams,
    sys: OdeSystem,
    path,
    dense_grid=None,
    solver: SolverConfig | None = None,
) -> None:
    """Long format ``id,t,dim,mu_encoder,mu_smooth``.

    Encoder means appear at the observed times (``mu_smooth`` empty); the
    smooth ODE solution appears on the dense grid (``mu_encoder`` empty).
    """
    if dense_grid is None:
        tmax = max(10.0, max(float(ind.times[-1]) for ind in ds.individuals))
        dense_grid = np.linspace(0.0, tmax, 101)
    P = params.bind()
    with open(Path(path), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "t", "dim", "mu_encoder", "mu_smooth"])
        with no_grad():
            for ind in ds.individuals:
                grid = ind.times[0] + np.asarray(dense_grid) - dense_grid[0]
                mus = [encode(y, P)[0] for y in ind.values]
                for t, mu in zip(ind.times, mus):
                    for d, v in enumerate(mu.data, start=1):
                        w.writerow([ind.id, f"{t:.17g}", d, f"{v:.17g}", ""])
                try:
                    traj = solve_grid(sys, ode_net(ind.baseline, P), mus[0], grid, solver).values
                except SolverInstability:
                    continue
                for t, row in zip(grid, traj):
                    for d, v in enumerate(row, start=1):
                        w.writerow([ind.id, f"{t:.17g}", d, "", f"{v:.17g}"])

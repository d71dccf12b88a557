"""ADAM, per-individual training and the similarity-batched training loop."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .datagen import Dataset
from .diffmath import Tape, backward
from .model import ModelParams, compute_loss, loss_and_grad
from .odecore import OdeSystem, SolverConfig, SolverInstability
from .similarity import DISTANCE_GRID, BatchPlan, assign_batches, batch_loss, random_batches

__all__ = [
    "TrainConfig",
    "AdamState",
    "EpochStats",
    "TrainReport",
    "rng_streams",
    "adam_step",
    "train_plain",
    "train_similarity",
    "train",
    "write_report_csv",
]

log = logging.getLogger(__name__)

_TERMS = ("total", "kl", "recon", "match", "penalty")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 20
    alpha: float = 1.0
    batch_size: int = 10
    bandwidth: float = 1.0
    use_similarity_batching: bool = False
    random_batches: bool = False
    seed: int = 0
    solver: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if not self.bandwidth > 0:
            raise ValueError("bandwidth must be positive")


def rng_streams(seed: int) -> dict[str, np.random.Generator]:
    """Independent generators for initialisation, shuffling, noise draws
    and random batch membership, all derived from one master seed."""
    names = ("init", "shuffle", "eps", "batches")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(c) for n, c in zip(names, children)}


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> AdamState:
        return cls({k: np.zeros_like(v) for k, v in params.items()}, {k: np.zeros_like(v) for k, v in params.items()})


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState, lr: float):
    """Bias-corrected ADAM update, applied in place; returns ``(params, state)``."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ValueError(f"{k}: gradient shape {g.shape} != parameter shape {p.shape}")
        m = state.m[k]
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


@dataclass
class EpochStats:
    epoch: int
    total: float
    kl: float
    recon: float
    match: float
    penalty: float
    skips: int


@dataclass
class TrainReport:
    epochs: list[EpochStats] = field(default_factory=list)
    skips: int = 0
    steps: int = 0
    duration: float = 0.0
    last_plan: BatchPlan | None = None

    @property
    def final_loss(self) -> float:
        return self.epochs[-1].total if self.epochs else float("nan")

    @property
    def skip_fraction(self) -> float:
        attempts = self.steps + self.skips
        return self.skips / attempts if attempts else 0.0


def _finite(grads: dict[str, np.ndarray]) -> bool:
    return all(np.all(np.isfinite(g)) for g in grads.values())


def _epoch_stats(epoch: int, sums: dict[str, float], count: int, skips: int) -> EpochStats:
    mean = {k: (sums[k] / count if count else float("nan")) for k in _TERMS}
    return EpochStats(epoch, mean["total"], mean["kl"], mean["recon"], mean["match"], mean["penalty"], skips)


EpochCallback = Callable[[int, ModelParams, EpochStats], None]


def train_plain(
    ds: Dataset,
    model: ModelParams,
    sys: OdeSystem,
    cfg: TrainConfig,
    on_epoch: EpochCallback | None = None,
) -> tuple[ModelParams, TrainReport]:
    """One ADAM step per individual, individuals in shuffled order."""
    if not len(ds):
        raise ValueError("dataset is empty")
    params = model.copy()
    rngs = rng_streams(cfg.seed)
    state = AdamState.zeros_like(params.values)
    report = TrainReport()
    start = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        sums = dict.fromkeys(_TERMS, 0.0)
        count = skips = 0
        for i in rngs["shuffle"].permutation(len(ds)):
            ind = ds.individuals[i]
            eps = rngs["eps"].standard_normal((params.spec.latent, len(ind.times)))
            try:
                vals, grads = loss_and_grad(ind, params, sys, cfg.alpha, eps, cfg.solver)
            except SolverInstability as exc:
                log.debug("epoch %d: skipped individual %s (%s)", epoch, ind.id, exc)
                skips += 1
                continue
            if not (_finite(grads) and np.isfinite(vals["total"])):
                skips += 1
                continue
            adam_step(params.values, grads, state, cfg.learning_rate)
            assert params.is_finite(), "parameters became non-finite"
            for k in _TERMS:
                sums[k] += vals[k]
            count += 1
        stats = _epoch_stats(epoch, sums, count, skips)
        report.epochs.append(stats)
        report.skips += skips
        report.steps += count
        log.info("epoch %d: loss %.4f (%d skipped)", epoch, stats.total, skips)
        if on_epoch:
            on_epoch(epoch, params, stats)
    report.duration = time.perf_counter() - start
    return params, report


def _batch_plan(ds, params, sys, cfg, rngs) -> BatchPlan:
    if cfg.random_batches:
        return random_batches(len(ds), cfg.batch_size, rngs["batches"])
    from .evaluate import fitted_trajectories

    trajs = fitted_trajectories(ds, params, sys, DISTANCE_GRID, cfg.solver)
    return assign_batches(trajs, cfg.batch_size, cfg.bandwidth)


def train_similarity(
    ds: Dataset,
    model: ModelParams,
    sys: OdeSystem,
    cfg: TrainConfig,
    on_epoch: EpochCallback | None = None,
) -> tuple[ModelParams, TrainReport]:
    """Alternate batch assignment and training on weighted batch losses.

    At the start of every epoch the current model's latent ODE solutions
    define nearest-neighbour batches (or random ones when
    ``cfg.random_batches`` is set).  Each reference individual's batch then
    contributes one ADAM step on the weighted sum of member losses.
    Members with zero weight are not evaluated; a member whose solve fails
    is dropped from that step and counted as a skip.
    """
    n = len(ds)
    if not n:
        raise ValueError("dataset is empty")
    if cfg.batch_size > n:
        raise ValueError(f"batch size {cfg.batch_size} exceeds {n} individuals")
    params = model.copy()
    rngs = rng_streams(cfg.seed)
    state = AdamState.zeros_like(params.values)
    report = TrainReport()
    start = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        plan = _batch_plan(ds, params, sys, cfg, rngs)
        report.last_plan = plan
        sums = dict.fromkeys(_TERMS, 0.0)
        count = skips = 0
        for i in rngs["shuffle"].permutation(n):
            members, weights = plan.members[i], plan.weights[i]
            with Tape() as tape:
                P = params.bind(tape)
                parts, used = [], []
                for j, w in zip(members, weights):
                    if w <= 0:
                        continue
                    ind = ds.individuals[j]
                    eps = rngs["eps"].standard_normal((params.spec.latent, len(ind.times)))
                    try:
                        parts.append(compute_loss(ind, P, sys, cfg.alpha, eps, cfg.solver))
                    except SolverInstability:
                        skips += 1
                        continue
                    used.append(w)
                if not parts:
                    continue
                total = batch_loss(used, [p.total for p in parts])
            grads = backward(total, P.t).grads
            if not (_finite(grads) and np.isfinite(total.item())):
                skips += 1
                continue
            adam_step(params.values, grads, state, cfg.learning_rate)
            assert params.is_finite(), "parameters became non-finite"
            sums["total"] += total.item()
            for key, attr in (("kl", "kl_term"), ("recon", "recon_term"), ("match", "match_term"), ("penalty", "weight_penalty")):
                sums[key] += sum(w * getattr(p, attr).item() for w, p in zip(used, parts))
            count += 1
        stats = _epoch_stats(epoch, sums, count, skips)
        report.epochs.append(stats)
        report.skips += skips
        report.steps += count
        log.info("epoch %d: batch loss %.4f (%d skipped)", epoch, stats.total, skips)
        if on_epoch:
            on_epoch(epoch, params, stats)
    report.duration = time.perf_counter() - start
    return params, report


def train(ds, model, sys, cfg: TrainConfig, on_epoch: EpochCallback | None = None):
    if cfg.use_similarity_batching or cfg.random_batches:
        return train_similarity(ds, model, sys, cfg, on_epoch)
    return train_plain(ds, model, sys, cfg, on_epoch)


def write_report_csv(report: TrainReport, path) -> None:
    with open(Path(path), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "total", "kl", "recon", "match", "penalty", "skips"])
        for s in report.epochs:
            w.writerow([s.epoch, *(f"{getattr(s, k):.17g}" for k in _TERMS), s.skips])

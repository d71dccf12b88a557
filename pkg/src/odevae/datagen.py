"""Simulated two-time-point cohorts and CSV import/export.

Each simulated individual follows one of two ground-truth ODE systems.
Observations are noisy copies of the latent components at ``t0 = 0`` and a
random follow-up time; baseline variables carry noisy information about
either the group (``+1``/``-1``) or the true ODE parameters.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .diffmath import no_grad
from .odecore import SCENARIOS, SolverConfig, linear_closed_form, make_scenario_system, solve_at, system_matrix

__all__ = [
    "ScenarioConfig",
    "Individual",
    "Dataset",
    "DataFormatError",
    "TRUE_SYSTEMS",
    "true_state",
    "simulate",
    "export_csv",
    "import_csv",
]


class DataFormatError(ValueError):
    """A CSV input does not follow the expected layout."""


# per scenario: initial condition and the (group 1, group 2) parameter vectors
TRUE_SYSTEMS = {
    "linear2": {
        "u0": (2.0, 1.0),
        "eta": ((-0.2, 0.2), (-0.2, -0.2)),
    },
    "lotka-volterra": {
        "u0": (2.0, 2.0),
        "eta": ((0.5, 2.0), (1.0, 0.5)),
    },
    "linear4": {
        "u0": (4.0, 2.0),
        "eta": ((-0.2, 0.1, -0.1, 0.25), (-0.2, 0.1, 0.1, -0.2)),
    },
}

_DEFAULTS = {
    "linear2": dict(
        n_individuals=100, n_informative=10, sigma_var=0.1, sigma_ind=0.1,
        sigma_info=0.5, sigma_noise=0.5, baseline_mode="group-membership",
    ),
    "lotka-volterra": dict(
        n_individuals=200, n_informative=30, sigma_var=0.1, sigma_ind=0.1,
        sigma_info=0.5, sigma_noise=0.5, baseline_mode="group-membership",
    ),
    "linear4": dict(
        n_individuals=100, n_informative=20, sigma_var=0.1, sigma_ind=0.5,
        sigma_info=0.1, sigma_noise=0.1, baseline_mode="true-ode-params",
    ),
}

_TRUTH_SOLVER = SolverConfig(abs_tol=1e-11, rel_tol=1e-11, max_steps=1_000_000)


@dataclass(frozen=True)
class ScenarioConfig:
    scenario: str = "linear2"
    n_individuals: int = 100
    p_timevars: int = 10
    q_baseline: int = 50
    n_informative: int = 10
    sigma_var: float = 0.1
    sigma_ind: float = 0.1
    sigma_info: float = 0.5
    sigma_noise: float = 0.5
    t_range: tuple[float, float] = (1.5, 10.0)
    baseline_mode: str = "group-membership"
    seed: int = 0

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}; expected one of {', '.join(SCENARIOS)}")
        if self.baseline_mode not in ("group-membership", "true-ode-params"):
            raise ValueError(f"unknown baseline mode {self.baseline_mode!r}")
        if min(self.sigma_var, self.sigma_ind, self.sigma_info, self.sigma_noise) < 0:
            raise ValueError("noise standard deviations must be non-negative")
        if not 0 <= self.n_informative <= self.q_baseline:
            raise ValueError("n_informative must lie in [0, q_baseline]")
        if self.n_individuals < 1 or self.p_timevars < 2:
            raise ValueError("need at least one individual and two time-dependent variables")
        lo, hi = self.t_range
        if not 0 < lo <= hi:
            raise ValueError("t_range must satisfy 0 < lower <= upper")
        if self.baseline_mode == "true-ode-params":
            k = len(TRUE_SYSTEMS[self.scenario]["eta"][0])
            if self.n_informative % k:
                raise ValueError(f"n_informative must be a multiple of the {k} ODE parameters")

    @classmethod
    def for_scenario(cls, scenario: str, **overrides) -> ScenarioConfig:
        """Configuration with the published per-scenario settings."""
        if scenario not in _DEFAULTS:
            raise ValueError(f"unknown scenario {scenario!r}; expected one of {', '.join(SCENARIOS)}")
        return cls(scenario=scenario, **{**_DEFAULTS[scenario], **overrides})


@dataclass(eq=False)
class Individual:
    id: str
    times: np.ndarray
    values: np.ndarray  # (K, p), row k observed at times[k]
    baseline: np.ndarray
    true_group: int | None = None
    true_eta: np.ndarray | None = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        self.baseline = np.asarray(self.baseline, dtype=np.float64)
        if self.true_eta is not None:
            self.true_eta = np.asarray(self.true_eta, dtype=np.float64)
        if len(self.times) < 2:
            raise ValueError(f"individual {self.id}: need at least 2 observations, got {len(self.times)}")
        if self.values.shape[0] != len(self.times):
            raise ValueError(f"individual {self.id}: {len(self.times)} times but {self.values.shape[0]} rows")
        if np.any(np.diff(self.times) < 0):
            raise ValueError(f"individual {self.id}: observation times must be ascending")

    @property
    def observations(self) -> list[tuple[float, np.ndarray]]:
        return list(zip(self.times.tolist(), self.values))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Individual):
            return NotImplemented
        return (
            self.id == other.id
            and np.array_equal(self.times, other.times)
            and np.array_equal(self.values, other.values)
            and np.array_equal(self.baseline, other.baseline)
            and self.true_group == other.true_group
            and (
                (self.true_eta is None and other.true_eta is None)
                or (
                    self.true_eta is not None
                    and other.true_eta is not None
                    and np.array_equal(self.true_eta, other.true_eta)
                )
            )
        )


@dataclass(eq=False)
class Dataset:
    individuals: list[Individual]
    variable_names: list[str]
    baseline_names: list[str]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        p, q = len(self.variable_names), len(self.baseline_names)
        for ind in self.individuals:
            if ind.values.shape[1] != p or ind.baseline.shape != (q,):
                raise ValueError(f"individual {ind.id}: expected {p} variables and {q} baseline values")

    def __len__(self) -> int:
        return len(self.individuals)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.variable_names == other.variable_names
            and self.baseline_names == other.baseline_names
            and len(self.individuals) == len(other.individuals)
            and all(a == b for a, b in zip(self.individuals, other.individuals))
        )

    @property
    def has_truth(self) -> bool:
        return bool(self.individuals) and all(i.true_group is not None for i in self.individuals)

    @property
    def groups(self) -> np.ndarray:
        return np.array([ind.true_group for ind in self.individuals])

    def subset(self, n: int) -> Dataset:
        return replace(self, individuals=self.individuals[:n])


def true_state(scenario: str, eta, t: float) -> np.ndarray:
    """Ground-truth latent state at time ``t`` for parameters ``eta``."""
    sys = make_scenario_system(scenario)
    u0 = np.array(TRUE_SYSTEMS[scenario]["u0"])
    if sys.kind == "lotka-volterra":
        with no_grad():
            return solve_at(sys, eta, u0, 0.0, t, _TRUTH_SOLVER).data.copy()
    return linear_closed_form(system_matrix(sys, eta), u0, t)


def simulate(cfg: ScenarioConfig) -> Dataset:
    rng = np.random.default_rng(cfg.seed)
    n, p, q = cfg.n_individuals, cfg.p_timevars, cfg.q_baseline
    truth = TRUE_SYSTEMS[cfg.scenario]

    groups = np.repeat([1, 2], n // 2)
    if n % 2:
        groups = np.append(groups, rng.integers(1, 3))
    groups = rng.permutation(groups)
    t1 = rng.uniform(cfg.t_range[0], cfg.t_range[1], size=n)

    n_first = p // 2
    individuals = []
    for i in range(n):
        eta = np.array(truth["eta"][groups[i] - 1])
        times = np.array([0.0, t1[i]])
        rows = []
        for t in times:
            u = true_state(cfg.scenario, eta, t)
            clean = np.concatenate([np.full(n_first, u[0]), np.full(p - n_first, u[1])])
            delta = rng.normal(0.0, cfg.sigma_var, size=p)
            eps = rng.normal(0.0, cfg.sigma_ind, size=p)
            rows.append(clean + delta + eps)

        if cfg.baseline_mode == "group-membership":
            sign = 1.0 if groups[i] == 1 else -1.0
            means = np.full(cfg.n_informative, sign)
        else:
            means = np.repeat(eta, cfg.n_informative // len(eta))
        informative = rng.normal(means, cfg.sigma_info)
        noise = rng.normal(0.0, cfg.sigma_noise, size=q - cfg.n_informative)
        individuals.append(
            Individual(
                id=str(i + 1),
                times=times,
                values=np.array(rows),
                baseline=np.concatenate([informative, noise]),
                true_group=int(groups[i]),
                true_eta=eta,
            )
        )
    return Dataset(
        individuals,
        [f"var_{j + 1}" for j in range(p)],
        [f"b_{j + 1}" for j in range(q)],
        {"scenario": cfg.scenario, "seed": cfg.seed},
    )


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def export_csv(ds: Dataset, path) -> dict[str, Path]:
    """Write ``observations.csv``, ``baseline.csv`` and, for simulated data,
    ``truth.csv`` into directory ``path``."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    files = {"observations": out / "observations.csv", "baseline": out / "baseline.csv"}
    with open(files["observations"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "time", *ds.variable_names])
        for ind in ds.individuals:
            for t, row in zip(ind.times, ind.values):
                w.writerow([ind.id, _fmt(t), *map(_fmt, row)])
    with open(files["baseline"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", *ds.baseline_names])
        for ind in ds.individuals:
            w.writerow([ind.id, *map(_fmt, ind.baseline)])
    if ds.has_truth:
        files["truth"] = out / "truth.csv"
        k = len(ds.individuals[0].true_eta)
        with open(files["truth"], "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id", "group", *[f"eta_{j + 1}" for j in range(k)], "t1"])
            for ind in ds.individuals:
                w.writerow([ind.id, ind.true_group, *map(_fmt, ind.true_eta), _fmt(ind.times[1])])
    return files


def _read_rows(path: Path, first: str):
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty file, header row required") from None
        if not header or header[0] != first:
            raise DataFormatError(f"{path}: header must start with '{first}'")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataFormatError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            rows.append((lineno, row))
    return header, rows


def _floats(path, lineno, fields) -> list[float]:
    try:
        vals = [float(v) for v in fields]
    except ValueError as exc:
        raise DataFormatError(f"{path}:{lineno}: {exc}") from None
    if not all(math.isfinite(v) for v in vals):
        raise DataFormatError(f"{path}:{lineno}: non-finite value")
    return vals


def import_csv(obs_path, baseline_path, truth_path=None) -> Dataset:
    """Read a long-format observation file and a wide-format baseline file.

    Individuals keep the order of their first appearance in the observation
    file; their observations are sorted by time.
    """
    obs_path, baseline_path = Path(obs_path), Path(baseline_path)
    header, rows = _read_rows(obs_path, "id")
    if len(header) < 3 or header[1] != "time":
        raise DataFormatError(f"{obs_path}: header must be id,time,<variables...>")
    per_id: dict[str, list] = {}
    for lineno, row in rows:
        vals = _floats(obs_path, lineno, row[1:])
        per_id.setdefault(row[0], []).append((vals[0], vals[1:]))

    bheader, brows = _read_rows(baseline_path, "id")
    baseline = {}
    for lineno, row in brows:
        if row[0] in baseline:
            raise DataFormatError(f"{baseline_path}:{lineno}: duplicate id {row[0]!r}")
        baseline[row[0]] = _floats(baseline_path, lineno, row[1:])
    missing = [i for i in per_id if i not in baseline]
    if missing:
        raise DataFormatError(f"{baseline_path}: no baseline row for id(s) {', '.join(missing[:5])}")

    truth = {}
    if truth_path is not None:
        theader, trows = _read_rows(Path(truth_path), "id")
        for lineno, row in trows:
            vals = _floats(truth_path, lineno, row[2:-1])
            try:
                group = int(row[1])
            except ValueError:
                raise DataFormatError(f"{truth_path}:{lineno}: group must be an integer") from None
            truth[row[0]] = (group, np.array(vals))

    individuals = []
    for ident, obs in per_id.items():
        obs.sort(key=lambda o: o[0])
        times = [o[0] for o in obs]
        if len(obs) < 2:
            raise DataFormatError(f"{obs_path}: individual {ident!r} has fewer than 2 observations")
        group, eta = truth.get(ident, (None, None))
        individuals.append(
            Individual(ident, times, [o[1] for o in obs], baseline[ident], true_group=group, true_eta=eta)
        )
    return Dataset(individuals, header[2:], bheader[1:], {})

"""Command line: ``odevae {simulate,train,evaluate,plotdata}``.

Settings resolve as command-line flag, then ``--config`` file, then the
built-in per-scenario defaults.  The config file is flat ``key = value``
text with ``#`` comments; keys are the long flag names without dashes
(``batch-size`` or ``batch_size``).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path

from . import __version__
from .datagen import DataFormatError, ScenarioConfig, export_csv, import_csv, simulate
from .evaluate import recovery_report, write_recovery_csv, write_trajectory_csv
from .model import init_params, load_checkpoint, save_checkpoint, spec_for_scenario
from .odecore import SCENARIOS, SolverConfig, make_scenario_system
from .plotting import (
    batch_bundle,
    individuals_bundle,
    read_groups,
    read_plan,
    read_trajectory_csv,
    render_bundle_svg,
    write_bundle,
)
from .similarity import write_plan_csv
from .train import TrainConfig, rng_streams, train, write_report_csv

log = logging.getLogger("odevae")

OUT_ENV = "ODEVAE_OUT"

# option name -> type; used for config-file parsing and validation
_OPTIONS = {
    "scenario": str,
    "seed": int,
    "out": str,
    "data": str,
    "baseline": str,
    "truth": str,
    "checkpoint": str,
    "alpha": float,
    "lr": float,
    "epochs": int,
    "batch_size": int,
    "bandwidth": float,
    "similarity": bool,
    "random_batches": bool,
    "solver_tol": float,
    "checkpoint_every": int,
    "n": int,
    "trajectories": str,
    "plan": str,
    "reference": str,
    "ids": str,
}

_DEFAULTS = {
    "scenario": "linear2",
    "seed": 0,
    "alpha": 1.0,
    "lr": 1e-3,
    "epochs": 20,
    "batch_size": 10,
    "bandwidth": 1.0,
    "similarity": False,
    "random_batches": False,
    "solver_tol": 1e-6,
    "checkpoint_every": 0,
}


class UsageError(Exception):
    pass


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def read_config(path) -> dict:
    """Parse a flat ``key = value`` file; unknown keys are rejected."""
    path = Path(path)
    if not path.exists():
        raise UsageError(f"config file not found: {path}")
    out = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _OPTIONS:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        conv = _OPTIONS[key]
        try:
            out[key] = _parse_bool(value) if conv is bool else conv(value)
        except ValueError as exc:
            raise UsageError(f"{path}:{lineno}: {exc}") from None
    return out


def _settings(args: argparse.Namespace) -> dict:
    merged = dict(_DEFAULTS)
    if getattr(args, "config", None):
        merged.update(read_config(args.config))
    merged.update({k: v for k, v in vars(args).items() if k in _OPTIONS and v is not None})
    if merged["scenario"] not in SCENARIOS:
        raise UsageError(f"unknown scenario {merged['scenario']!r}; choose from {', '.join(SCENARIOS)}")
    if not merged.get("out"):
        merged["out"] = os.environ.get(OUT_ENV, ".")
    return merged


def _data_paths(s: dict) -> tuple[Path, Path, Path | None]:
    if not s.get("data"):
        raise UsageError("--data is required")
    data = Path(s["data"])
    if data.is_dir():
        obs = data / "observations.csv"
        base = Path(s["baseline"]) if s.get("baseline") else data / "baseline.csv"
        truth = Path(s["truth"]) if s.get("truth") else data / "truth.csv"
    else:
        obs = data
        base = Path(s["baseline"]) if s.get("baseline") else data.with_name("baseline.csv")
        truth = Path(s["truth"]) if s.get("truth") else data.with_name("truth.csv")
    for p in (obs, base):
        if not p.exists():
            raise UsageError(f"file not found: {p}")
    if s.get("truth") and not truth.exists():
        raise UsageError(f"file not found: {truth}")
    return obs, base, truth if truth.exists() else None


def _solver(s: dict) -> SolverConfig:
    tol = s["solver_tol"]
    return SolverConfig(abs_tol=tol, rel_tol=tol)


def cmd_simulate(s: dict) -> int:
    kw = {"seed": s["seed"]}
    if s.get("n"):
        kw["n_individuals"] = s["n"]
    ds = simulate(ScenarioConfig.for_scenario(s["scenario"], **kw))
    files = export_csv(ds, s["out"])
    for f in files.values():
        print(f)
    return 0


def cmd_train(s: dict) -> int:
    obs, base, truth = _data_paths(s)
    ds = import_csv(obs, base, truth)
    scenario = s["scenario"]
    ds.metadata["scenario"] = scenario
    spec = spec_for_scenario(scenario, p=len(ds.variable_names), q=len(ds.baseline_names))
    model = init_params(spec, rng_streams(s["seed"])["init"], scenario)
    cfg = TrainConfig(
        learning_rate=s["lr"],
        epochs=s["epochs"],
        alpha=s["alpha"],
        batch_size=s["batch_size"],
        bandwidth=s["bandwidth"],
        use_similarity_batching=s["similarity"],
        random_batches=s["random_batches"],
        seed=s["seed"],
        solver=_solver(s),
    )
    out = Path(s["out"])
    out.mkdir(parents=True, exist_ok=True)
    every = s["checkpoint_every"]

    def on_epoch(epoch, params, stats):
        if every and epoch % every == 0 and epoch < cfg.epochs:
            save_checkpoint(params, out / f"checkpoint_epoch{epoch:03d}.txt")

    started = time.time()
    params, report = train(ds, model, make_scenario_system(scenario), cfg, on_epoch)
    save_checkpoint(params, out / "checkpoint.txt")
    write_report_csv(report, out / "train_report.csv")
    if report.last_plan is not None:
        write_plan_csv(report.last_plan, [i.id for i in ds.individuals], out / "batch_plan.csv")
    (out / "run_meta.txt").write_text(
        f"started {time.strftime('%Y-%m-%dT%H:%M:%S', time.localtime(started))}\n"
        f"duration_s {report.duration:.3f}\nskips {report.skips}\nsteps {report.steps}\n",
        encoding="utf-8",
    )
    print(out / "checkpoint.txt")
    return 0


def cmd_evaluate(s: dict) -> int:
    if not s.get("checkpoint"):
        raise UsageError("--checkpoint is required")
    ckpt = Path(s["checkpoint"])
    if not ckpt.exists():
        raise UsageError(f"file not found: {ckpt}")
    params = load_checkpoint(ckpt)
    obs, base, truth = _data_paths(s)
    ds = import_csv(obs, base, truth)
    if (params.spec.p, params.spec.q) != (len(ds.variable_names), len(ds.baseline_names)):
        raise UsageError(
            f"checkpoint expects p={params.spec.p}, q={params.spec.q}; "
            f"data has p={len(ds.variable_names)}, q={len(ds.baseline_names)}"
        )
    scenario = params.scenario or s["scenario"]
    ds.metadata["scenario"] = scenario
    sys_ = make_scenario_system(scenario)
    out = Path(s["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_trajectory_csv(ds, params, sys_, out / "trajectories.csv", solver=_solver(s))
    print(out / "trajectories.csv")
    if ds.has_truth:
        rep = recovery_report(ds, params, sys_, solver=_solver(s))
        write_recovery_csv(rep, out / "recovery.csv")
        print(out / "recovery.csv")
        print(f"accuracy {rep.accuracy:.4f}")
    return 0


def cmd_plotdata(s: dict) -> int:
    out = Path(s["out"])
    traj_path = Path(s.get("trajectories") or out / "trajectories.csv")
    if not traj_path.exists():
        raise UsageError(f"file not found: {traj_path}")
    trajectories = read_trajectory_csv(traj_path)
    groups = read_groups(s["truth"]) if s.get("truth") else None
    ids = [x for x in s["ids"].split(",") if x] if s.get("ids") is not None else None
    out.mkdir(parents=True, exist_ok=True)

    rows = individuals_bundle(trajectories, groups, ids)
    write_bundle(rows, out / "fig_individuals.csv")
    render_bundle_svg(rows, out / "fig_individuals.svg", "individual and group latent trajectories")
    print(out / "fig_individuals.csv")

    if s.get("plan"):
        plan = read_plan(s["plan"])
        ref = s.get("reference") or next(iter(plan), "")
        rows = batch_bundle(trajectories, plan, ref)
        write_bundle(rows, out / "fig_batch.csv")
        render_bundle_svg(rows, out / "fig_batch.svg", f"batch of reference {ref}")
        print(out / "fig_batch.csv")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="odevae", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key = value settings file")
        p.add_argument("--scenario", help=f"one of {', '.join(SCENARIOS)}")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help=f"output directory (default ${OUT_ENV} or .)")

    def data(p):
        p.add_argument("--data", help="observations CSV or a directory holding observations.csv")
        p.add_argument("--baseline", help="baseline CSV (default: baseline.csv next to --data)")
        p.add_argument("--truth", help="truth sidecar CSV (default: truth.csv next to --data, if present)")
        p.add_argument("--solver-tol", dest="solver_tol", type=float)

    p = sub.add_parser("simulate", help="write a simulated cohort as CSV")
    common(p)
    p.add_argument("--n", type=int, help="number of individuals (default per scenario)")

    p = sub.add_parser("train", help="fit the model to a dataset")
    common(p)
    data(p)
    p.add_argument("--alpha", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--bandwidth", type=float)
    p.add_argument("--similarity", action="store_true", default=None, help="similarity-batched training")
    p.add_argument("--random-batches", dest="random_batches", action="store_true", default=None,
                   help="random batches with equal weights (ablation)")
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)

    p = sub.add_parser("evaluate", help="export latent trajectories and recovery metrics")
    common(p)
    data(p)
    p.add_argument("--checkpoint")

    p = sub.add_parser("plotdata", help="group trajectories into figure bundles and SVGs")
    common(p)
    p.add_argument("--trajectories", help="trajectory CSV from evaluate (default OUT/trajectories.csv)")
    p.add_argument("--truth", help="truth sidecar for group labels")
    p.add_argument("--plan", help="batch plan CSV from similarity training")
    p.add_argument("--reference", help="reference id for the batch figure")
    p.add_argument("--ids", help="comma-separated ids to include")
    return parser


_COMMANDS = {"simulate": cmd_simulate, "train": cmd_train, "evaluate": cmd_evaluate, "plotdata": cmd_plotdata}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return _COMMANDS[args.command](_settings(args))
    except UsageError as exc:
        parser.exit(2, f"odevae {args.command}: error: {exc}\n")
    except (DataFormatError, FileNotFoundError, ValueError, OSError) as exc:
        parser.exit(1, f"odevae {args.command}: error: {exc}\n")


if __name__ == "__main__":
    sys.exit(main())

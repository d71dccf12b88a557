"""Figure bundles from trajectory CSVs, rendered to SVG with matplotlib.

A bundle is a flat table ``panel,id,is_reference,t,dim,mu_encoder,mu_smooth``
collecting the rows that make up one multi-panel figure.  The CSV is the
data product; the SVG is a convenience rendering of it.
"""

from __future__ import annotations

import csv
from collections import OrderedDict
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

__all__ = [
    "BUNDLE_HEADER",
    "read_trajectory_csv",
    "read_groups",
    "read_plan",
    "individuals_bundle",
    "batch_bundle",
    "write_bundle",
    "render_bundle_svg",
]

BUNDLE_HEADER = ["panel", "id", "is_reference", "t", "dim", "mu_encoder", "mu_smooth"]

_DIM_COLORS = ("#1f77b4", "#ff7f0e")


def read_trajectory_csv(path) -> "OrderedDict[str, list[dict]]":
    """Rows of an evaluate trajectory file grouped by id, in file order."""
    rows: OrderedDict[str, list[dict]] = OrderedDict()
    with open(Path(path), newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            rows.setdefault(row["id"], []).append(row)
    return rows


def read_groups(truth_path) -> dict[str, str]:
    with open(Path(truth_path), newline="", encoding="utf-8") as fh:
        return {row["id"]: row["group"] for row in csv.DictReader(fh)}


def read_plan(plan_path) -> "OrderedDict[str, list[str]]":
    """Batch members per reference id from a plan CSV (reference first)."""
    plan: OrderedDict[str, list[str]] = OrderedDict()
    with open(Path(plan_path), newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            plan.setdefault(row["reference_id"], []).append(row["member_id"])
    return plan


def _emit(panel: str, ident: str, ref: bool, rows: Iterable[dict]) -> list[list[str]]:
    return [[panel, ident, "1" if ref else "0", r["t"], r["dim"], r["mu_encoder"], r["mu_smooth"]] for r in rows]


def individuals_bundle(
    trajectories: Mapping[str, list[dict]],
    groups: Mapping[str, str] | None = None,
    ids: Sequence[str] | None = None,
) -> list[list[str]]:
    """One single-individual panel and one all-individuals panel per group.

    Without group labels everything is treated as one group.
    """
    keep = [i for i in trajectories if ids is None or i in set(ids)]
    by_group: OrderedDict[str, list[str]] = OrderedDict()
    for ident in keep:
        g = groups.get(ident, "all") if groups else "all"
        by_group.setdefault(g, []).append(ident)
    out: list[list[str]] = []
    for g in sorted(by_group):
        first = by_group[g][0]
        out += _emit(f"single-{g}", first, False, trajectories[first])
    for g in sorted(by_group):
        for ident in by_group[g]:
            out += _emit(f"group-{g}", ident, False, trajectories[ident])
    return out


def batch_bundle(
    trajectories: Mapping[str, list[dict]],
    plan: Mapping[str, list[str]],
    reference: str,
) -> list[list[str]]:
    """All members of one batch, with the reference marked."""
    if reference not in plan:
        return []
    out: list[list[str]] = []
    for ident in plan[reference]:
        out += _emit(f"batch-{reference}", ident, ident == reference, trajectories.get(ident, []))
    return out


def write_bundle(rows: list[list[str]], path) -> None:
    with open(Path(path), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BUNDLE_HEADER)
        w.writerows(rows)


def render_bundle_svg(rows: list[list[str]], path, title: str = "") -> None:
    """Dots are encoder means, lines are ODE solutions; one colour per latent
    dimension; the reference individual is drawn thick and dark."""
    panels: OrderedDict[str, list[list[str]]] = OrderedDict()
    for r in rows:
        panels.setdefault(r[0], []).append(r)
    n = max(1, len(panels))
    ncol = 2 if n > 1 else 1
    nrow = (n + ncol - 1) // ncol
    plt.rcParams["svg.hashsalt"] = "odevae"
    fig, axes = plt.subplots(nrow, ncol, figsize=(5 * ncol, 3.5 * nrow), squeeze=False)
    for ax, (name, prow) in zip(axes.flat, panels.items()):
        series: OrderedDict[tuple, dict] = OrderedDict()
        for panel, ident, ref, t, dim, enc, smooth in prow:
            s = series.setdefault((ident, dim), {"ref": ref == "1", "enc": [], "smooth": []})
            if enc:
                s["enc"].append((float(t), float(enc)))
            if smooth:
                s["smooth"].append((float(t), float(smooth)))
        has_ref = any(s["ref"] for s in series.values())
        for (ident, dim), s in series.items():
            color = _DIM_COLORS[(int(dim) - 1) % len(_DIM_COLORS)]
            emph = s["ref"] or not has_ref
            lw, alpha = (2.0, 1.0) if emph else (0.7, 0.4)
            if s["smooth"]:
                ts, vs = zip(*s["smooth"])
                ax.plot(ts, vs, color=color, lw=lw, alpha=alpha)
            if s["enc"]:
                ts, vs = zip(*s["enc"])
                ax.scatter(ts, vs, color=color, s=18 if emph else 8, alpha=alpha, zorder=3)
        ax.set_title(name, fontsize=10)
        ax.set_xlabel("t")
        ax.set_ylabel("latent value")
    for ax in list(axes.flat)[len(panels):]:
        ax.axis("off")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(Path(path), format="svg", metadata={"Date": None})
    plt.close(fig)

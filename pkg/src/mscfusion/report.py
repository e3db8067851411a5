"""Cross-fold aggregation of probe and alignment results, with figures.

Aggregates the selected-checkpoint metrics of several experiment
directories into one table (median and interquartile range across folds)
and renders static summary figures next to the CSV output.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .errors import DependencyError


def _read_selected(exp_dir: Path) -> dict:
    path = exp_dir / "selected.json"
    if not path.exists():
        raise DependencyError(f"{exp_dir}: no selected.json (run probe first)")
    return json.loads(path.read_text())


def _read_config(exp_dir: Path) -> dict:
    path = exp_dir / "config.json"
    if not path.exists():
        raise DependencyError(f"{exp_dir}: no config.json")
    return json.loads(path.read_text())


def _read_cka(exp_dir: Path) -> float | None:
    path = exp_dir / "cka.csv"
    if not path.exists():
        return None
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return float(rows[0]["cka"]) if rows else None


def collect_runs(exp_dirs: list[str | Path]) -> list[dict]:
    """One record per experiment directory: model, fold, task, per-modality
    selected metrics, and CKA when present."""
    runs = []
    for d in exp_dirs:
        exp = Path(d)
        config = _read_config(exp)
        selected = _read_selected(exp)
        runs.append(
            {
                "model": config["objective"]["name"],
                "fold": config["fold"],
                "task": selected["task"],
                "metrics": selected["metrics"],
                "cka": _read_cka(exp),
            }
        )
    return runs


def _median_iqr(values: list[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    q25, q50, q75 = np.percentile(arr, [25, 50, 75])
    return float(q50), float(q75 - q25)


def aggregate(runs: list[dict]) -> list[dict]:
    """Median and IQR across folds per (model, task, modality)."""
    groups: dict[tuple, dict[str, list[float]]] = {}
    for run in runs:
        for modality, metrics in run["metrics"].items():
            key = (run["model"], run["task"], modality)
            g = groups.setdefault(key, {"val": [], "test": []})
            g["val"].append(metrics["metric_val"])
            if np.isfinite(metrics["metric_test"]):
                g["test"].append(metrics["metric_test"])
    rows = []
    for (model, task, modality), g in sorted(groups.items()):
        med_v, iqr_v = _median_iqr(g["val"])
        med_t, iqr_t = _median_iqr(g["test"]) if g["test"] else (float("nan"),) * 2
        rows.append(
            {
                "model": model,
                "task": task,
                "modality": modality,
                "n_folds": len(g["val"]),
                "median_val": med_v,
                "iqr_val": iqr_v,
                "median_test": med_t,
                "iqr_test": iqr_t,
            }
        )
    return rows


def aggregate_cka(runs: list[dict]) -> list[dict]:
    groups: dict[tuple, list[float]] = {}
    for run in runs:
        if run["cka"] is not None:
            groups.setdefault((run["model"], run["task"]), []).append(run["cka"])
    rows = []
    for (model, task), values in sorted(groups.items()):
        med, iqr = _median_iqr(values)
        rows.append(
            {
                "model": model,
                "task": task,
                "n_folds": len(values),
                "median_cka": med,
                "iqr_cka": iqr,
            }
        )
    return rows


def write_csv(path: Path, rows: list[dict]) -> None:
    if not rows:
        path.write_text("")
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(v) for k, v in row.items()})


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def performance_figure(rows: list[dict], cka_rows: list[dict], path: Path) -> None:
    """Scatter of median test metric, modality 1 vs modality 2, one marker
    per (model, task), colored by CKA when available."""
    by_model: dict[tuple, dict] = {}
    for row in rows:
        key = (row["model"], row["task"])
        by_model.setdefault(key, {})[row["modality"]] = row["median_test"]
    cka_of = {(r["model"], r["task"]): r["median_cka"] for r in cka_rows}

    fig, ax = plt.subplots(figsize=(6.5, 6))
    markers = {"2way": "o", "3way": "s"}
    xs, ys, cs, keys = [], [], [], []
    for key, per_mod in sorted(by_model.items()):
        if "m1" not in per_mod or "m2" not in per_mod:
            continue
        xs.append(per_mod["m1"])
        ys.append(per_mod["m2"])
        cs.append(cka_of.get(key, np.nan))
        keys.append(key)
    if xs:
        colored = np.isfinite(cs).all() and len(cs) > 0
        for x, y, c, key in zip(xs, ys, cs, keys):
            ax.scatter(
                [x],
                [y],
                c=[c] if colored else None,
                vmin=min(cs) if colored else None,
                vmax=max(cs) if colored else None,
                cmap="viridis" if colored else None,
                marker=markers.get(key[1], "o"),
                s=60,
            )
            ax.annotate(
                key[0], (x, y), textcoords="offset points", xytext=(4, 4),
                fontsize=8,
            )
        lims = [min(xs + ys) - 0.02, max(xs + ys) + 0.02]
        ax.plot(lims, lims, "k--", linewidth=0.8, alpha=0.5)
        ax.set_xlim(lims)
        ax.set_ylim(lims)
    ax.set_xlabel("median test metric (m1)")
    ax.set_ylabel("median test metric (m2)")
    ax.set_title("probe performance per model")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def cka_figure(cka_rows: list[dict], path: Path) -> None:
    fig, ax = plt.subplots(figsize=(7, 4))
    if cka_rows:
        rows = sorted(cka_rows, key=lambda r: -r["median_cka"])
        names = [f"{r['model']}" for r in rows]
        ax.bar(range(len(rows)), [r["median_cka"] for r in rows],
               yerr=[r["iqr_cka"] / 2 for r in rows], capsize=3)
        ax.set_xticks(range(len(rows)))
        ax.set_xticklabels(names, rotation=45, ha="right", fontsize=8)
    ax.set_ylabel("median CKA between modalities")
    ax.set_title("representation alignment per model")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_report(exp_dirs: list[str | Path], out_dir: str | Path) -> Path:
    """Aggregate experiment directories into report.csv, cka_report.csv, and
    summary figures under ``out_dir``; returns the report.csv path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    runs = collect_runs(exp_dirs)
    rows = aggregate(runs)
    cka_rows = aggregate_cka(runs)
    write_csv(out / "report.csv", rows)
    write_csv(out / "cka_report.csv", cka_rows)
    performance_figure(rows, cka_rows, out / "performance_scatter.png")
    cka_figure(cka_rows, out / "cka_bars.png")
    return out / "report.csv"

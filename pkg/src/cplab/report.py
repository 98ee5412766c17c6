"""Report emission: JSON + CSV tables and static plots, written atomically."""
from __future__ import annotations

import csv
import json
import os
import shutil
import tempfile
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt     # noqa: E402
import numpy as np                  # noqa: E402

from .errors import InvalidInputError                   # noqa: E402
from .experiments import ExperimentResult, to_jsonable  # noqa: E402


def result_payload(result: ExperimentResult) -> dict:
    return to_jsonable({
        "family": result.family,
        "spec": result.spec,
        "ok": result.ok,
        "rows": result.rows,
        "reports": {k: r.to_dict() for k, r in result.reports.items()},
        "logs": {k: {"epoch_ipr": l.epoch_ipr, "initial_ipr": l.initial_ipr,
                     "block_shape": list(l.block_shape), "seconds": l.seconds}
                 for k, l in result.logs.items()},
        "extras": result.extras,
    })


def write_rows_csv(path: Path, rows: list[dict]) -> None:
    columns: list[str] = []
    for row in rows:
        columns += [k for k in row if k not in columns]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: json.dumps(v) if isinstance(v, (list, dict)) else v
                             for k, v in to_jsonable(row).items()})


# ---------------------------------------------------------------------------
# plots


def plot_ipr_curves(logs: dict) -> plt.Figure:
    fig, ax = plt.subplots(figsize=(6, 4))
    for key, tlog in logs.items():
        epochs = np.arange(len(tlog.epoch_ipr) + 1)
        ax.plot(epochs, [tlog.initial_ipr] + list(tlog.epoch_ipr), marker=".", label=key)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean training IPR")
    ax.legend(fontsize=6)
    return fig


def plot_sweep(rows: list[dict], x: str, group: str | None = None) -> plt.Figure:
    """RMSE and SNR against a sweep variable, one line per group."""
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    good = [r for r in rows if "error" not in r]
    groups = sorted({r[group] for r in good}) if group else [None]
    for g in groups:
        sel = sorted((r for r in good if group is None or r[group] == g), key=lambda r: r[x])
        xs = [r[x] for r in sel]
        for ax, metric in zip(axes, ("rmse", "mean_snr")):
            ax.plot(xs, [np.nan if r[metric] is None else r[metric] for r in sel], marker="o",
                    label=g)
    for ax, label in zip(axes, ("RMSE (bpm)", "SNR (dB)")):
        ax.set_xlabel(x)
        ax.set_ylabel(label)
        if group:
            ax.legend(fontsize=7)
    fig.tight_layout()
    return fig


def plot_boxplots(intra: list[float], cross: list[float]) -> plt.Figure:
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.boxplot([intra, cross], showfliers=False)
    ax.set_xticks([1, 2], ["intra-video", "cross-video"])
    ax.set_ylabel("PSD pair MSE")
    return fig


def plot_saliency(maps: dict[str, list]) -> plt.Figure:
    fig, axes = plt.subplots(1, len(maps), figsize=(3 * len(maps), 3), squeeze=False)
    for ax, (key, sal) in zip(axes[0], maps.items()):
        ax.imshow(np.asarray(sal), cmap="inferno")
        ax.set_title(key, fontsize=8)
        ax.axis("off")
    return fig


def plot_waveform(traces: dict) -> plt.Figure:
    """Standardized rPPG over GT (when present) for one evaluation window."""
    def z(v):
        v = np.asarray(v, dtype=np.float64)
        sd = v.std()
        return (v - v.mean()) / sd if sd > 0 else v - v.mean()

    fig, ax = plt.subplots(figsize=(8, 2.5))
    t = np.arange(len(traces["rppg"])) / traces["fps"]
    ax.plot(t, z(traces["rppg"]), label="rPPG")
    if traces.get("gt") is not None:
        gt = z(traces["gt"])
        ax.plot(np.arange(len(gt)) / traces["fps"], gt, label="GT", alpha=0.7)
    ax.set_xlabel("time (s)")
    ax.legend()
    return fig


def _figures(result: ExperimentResult) -> dict[str, plt.Figure]:
    figs: dict[str, plt.Figure] = {}
    if result.logs:
        figs["ipr_curves"] = plot_ipr_curves(result.logs)
    if result.family == "label_ratio":
        figs["label_ratio"] = plot_sweep(result.rows, "ratio")
    elif result.family == "desync":
        figs["desync"] = plot_sweep(result.rows, "d_max", group="method")
    elif result.family == "stats":
        figs["boxplot"] = plot_boxplots(result.extras["intra_mse"], result.extras["cross_mse"])
    if result.extras.get("saliency_maps"):
        figs["saliency"] = plot_saliency(result.extras["saliency_maps"])
    for key, report in result.reports.items():
        if report.traces:
            first = next(iter(report.traces.values()))
            figs["waveform_" + key.replace("/", "_").replace("=", "")] = plot_waveform(first)
    return figs


def emit_report(result: ExperimentResult, path: str | Path) -> Path:
    """Write results.json, results.csv and PNG plots into ``path``.

    Files go to a temporary sibling directory that replaces ``path`` only
    once everything has been written.
    """
    if not result.rows:
        raise InvalidInputError("no results to report")
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        (tmp / "results.json").write_text(json.dumps(result_payload(result), indent=1))
        write_rows_csv(tmp / "results.csv", result.rows)
        for key, tlog in result.logs.items():
            tlog.to_csv(tmp / f"log_{key.replace('/', '_').replace('=', '')}.csv")
        for name, fig in _figures(result).items():
            fig.savefig(tmp / f"{name}.png", dpi=80)
            plt.close(fig)
        if out.exists():
            old = out.with_name(f".{out.name}.old")
            shutil.rmtree(old, ignore_errors=True)
            os.replace(out, old)
            os.replace(tmp, out)
            shutil.rmtree(old)
        else:
            os.replace(tmp, out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return out

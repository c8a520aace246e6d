"""Raster plots for the ablation tables.

Each function reads one of the CSVs emitted by the evaluation harness and
renders a PNG. Rendering is headless (Agg) and deterministic apart from
matplotlib's own font rasterization.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

__all__ = ["plot_bars", "plot_data_efficiency", "plot_denoise_sweep", "plot_table"]

_STYLE = {"figsize": (5.0, 3.2), "dpi": 120}


def _read(csv_path: Path) -> list[dict]:
    with Path(csv_path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"empty table: {csv_path}")
    return rows


def plot_bars(
    csv_path: Path,
    out_png: Path,
    *,
    label_field: str = "variant",
    title: str = "",
) -> Path:
    """Bar chart of success means with ±1 std whiskers, one bar per row."""
    rows = _read(csv_path)
    labels = [r[label_field] for r in rows]
    means = [float(r["success_mean"]) for r in rows]
    stds = [float(r["success_std"]) for r in rows]

    fig, ax = plt.subplots(**_STYLE)
    xs = range(len(rows))
    ax.bar(xs, means, yerr=stds, capsize=3, color="#4878cf", edgecolor="black", linewidth=0.5)
    ax.set_xticks(list(xs))
    ax.set_xticklabels(labels, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel("success rate")
    ax.set_ylim(0.0, 1.05)
    if title:
        ax.set_title(title, fontsize=10)
    fig.tight_layout()
    out_png = Path(out_png)
    out_png.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_png)
    plt.close(fig)
    return out_png


def plot_data_efficiency(csv_path: Path, out_png: Path, *, title: str = "data efficiency") -> Path:
    """Success rate vs training-data fraction, with an error band."""
    rows = _read(csv_path)
    fracs = [float(r["fraction"]) for r in rows]
    means = [float(r["success_mean"]) for r in rows]
    stds = [float(r["success_std"]) for r in rows]

    fig, ax = plt.subplots(**_STYLE)
    ax.plot(fracs, means, marker="o", color="#4878cf")
    lo = [m - s for m, s in zip(means, stds)]
    hi = [m + s for m, s in zip(means, stds)]
    ax.fill_between(fracs, lo, hi, alpha=0.2, color="#4878cf")
    ax.set_xlabel("training data fraction")
    ax.set_ylabel("success rate")
    ax.set_xscale("log")
    ax.set_xticks(fracs)
    ax.set_xticklabels([f"{f:g}" for f in fracs])
    ax.set_title(title, fontsize=10)
    fig.tight_layout()
    out_png = Path(out_png)
    out_png.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_png)
    plt.close(fig)
    return out_png


def plot_denoise_sweep(csv_path: Path, out_png: Path) -> Path:
    """Success vs denoising step count, with wall-clock on a twin axis."""
    rows = _read(csv_path)
    steps = [int(r["steps"]) for r in rows]
    means = [float(r["success_mean"]) for r in rows]
    stds = [float(r["success_std"]) for r in rows]
    clocks = [float(r["wall_clock_s"]) for r in rows]

    fig, ax = plt.subplots(**_STYLE)
    ax.errorbar(steps, means, yerr=stds, marker="o", capsize=3, color="#4878cf", label="success")
    ax.set_xlabel("denoising steps")
    ax.set_ylabel("success rate")
    ax.set_xscale("log")
    ax.set_xticks(steps)
    ax.set_xticklabels([str(s) for s in steps])
    twin = ax.twinx()
    twin.plot(steps, clocks, marker="s", linestyle="--", color="#d65f5f", label="wall clock")
    twin.set_ylabel("imagination wall clock (s)")
    fig.tight_layout()
    out_png = Path(out_png)
    out_png.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_png)
    plt.close(fig)
    return out_png


_TABLE_KINDS = {
    "modalities": ("plot_bars", "modality ablation"),
    "design": ("plot_bars", "latent-action design"),
    "controls": ("plot_bars", "future-conditioning controls"),
    "pretrain": ("plot_bars", "pretraining effect (10% data)"),
    "freeze": ("plot_bars", "fine-tuning effect"),
    "head": ("plot_bars", "action head"),
    "data-eff": ("plot_data_efficiency", None),
    "denoise-steps": ("plot_denoise_sweep", None),
}


def plot_table(kind: str, csv_path: Path, out_png: Path) -> Path:
    """Dispatch a named table kind to its renderer."""
    if kind not in _TABLE_KINDS:
        raise ValueError(f"unknown table kind {kind!r}; choose from {sorted(_TABLE_KINDS)}")
    fn_name, title = _TABLE_KINDS[kind]
    if fn_name == "plot_bars":
        return plot_bars(csv_path, out_png, title=title or "")
    if fn_name == "plot_data_efficiency":
        return plot_data_efficiency(csv_path, out_png)
    return plot_denoise_sweep(csv_path, out_png)

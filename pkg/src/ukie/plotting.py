"""Figures for the report command; always rendered off-screen."""

from __future__ import annotations

import csv
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from ukie.evaluation import EvalReport  # noqa: E402


def _num(v: str) -> float:
    return float(v) if v not in ("", None) else math.nan


def plot_training_curves(metrics_csv: str | Path, out_path: str | Path) -> Path:
    """Loss and probe curves from a ``metrics.csv`` (one point per phase)."""
    with open(metrics_csv) as f:
        rows = list(csv.DictReader(f))
    fig, axes = plt.subplots(1, 3, figsize=(13, 3.6))
    for key, ax in (("L_rec", axes[0]), ("L_iv", axes[0]), ("L_v", axes[0]), ("L_gtc", axes[1]), ("L_adv", axes[1])):
        pts = [(int(r["step"]), _num(r[key])) for r in rows if r.get(key, "") != ""]
        if pts:
            ax.plot(*zip(*pts), marker=".", label=key)
    for key in ("probe_psnr",):
        pts = [(int(r["step"]), _num(r[key])) for r in rows if r.get(key, "") != ""]
        if pts:
            axes[2].plot(*zip(*pts), marker=".", color="tab:blue", label="PSNR (dB)")
    acc_ax = axes[2].twinx()
    pts = [(int(r["step"]), _num(r["probe_acc"])) for r in rows if r.get("probe_acc", "") != ""]
    if pts:
        acc_ax.plot(*zip(*pts), marker=".", color="tab:orange", label="accuracy")
    acc_ax.set_ylim(0, 1.05)
    axes[0].set_title("generator phase")
    axes[1].set_title("discriminator phase")
    axes[2].set_title("held-out probe")
    for ax in axes:
        ax.set_xlabel("step")
        ax.legend(loc="best", fontsize=8)
    acc_ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    return _save(fig, out_path)


def plot_report(report: EvalReport, x_field: str, out_path: str | Path, title: str = "") -> Path:
    """PSNR and accuracy against one report column, one line per channel kind."""
    fig, (a, b) = plt.subplots(1, 2, figsize=(9, 3.6))
    kinds = sorted({r.channel for r in report.rows})
    for kind in kinds:
        rows = sorted((r for r in report.rows if r.channel == kind), key=lambda r: getattr(r, x_field))
        xs = [getattr(r, x_field) for r in rows]
        a.plot(xs, [r.psnr_db for r in rows], marker="o", label=kind)
        b.plot(xs, [r.accuracy for r in rows], marker="o", label=kind)
    a.set_ylabel("PSNR (dB)")
    b.set_ylabel("accuracy")
    for ax in (a, b):
        ax.set_xlabel(x_field)
        ax.legend(fontsize=8)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    return _save(fig, out_path)


def plot_labeled_report(report: EvalReport, out_path: str | Path, title: str = "") -> Path:
    """Bar-style view of a sweep whose rows are identified by their label."""
    labels = [r.label or str(i) for i, r in enumerate(report.rows)]
    fig, (a, b) = plt.subplots(1, 2, figsize=(max(8, 0.7 * len(labels) + 4), 3.6))
    a.plot(labels, [r.psnr_db for r in report.rows], marker="o")
    b.plot(labels, [r.accuracy for r in report.rows], marker="o", color="tab:orange")
    a.set_ylabel("PSNR (dB)")
    b.set_ylabel("accuracy")
    for ax in (a, b):
        ax.tick_params(axis="x", rotation=45)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    return _save(fig, out_path)


def plot_ledger(ledger_csv: str | Path, out_path: str | Path) -> Path:
    """Scalars transmitted against the broadcast threshold."""
    with open(ledger_csv) as f:
        rows = list(csv.DictReader(f))
    fig, ax = plt.subplots(figsize=(5, 3.6))
    pts = sorted((_num(r["kappa"]), _num(r["scalars_transmitted"])) for r in rows)
    finite = [(k, s) for k, s in pts if math.isfinite(k)]
    if finite:
        ax.plot(*zip(*finite), marker="o")
    ax.set_xlabel("kappa")
    ax.set_ylabel("scalars transmitted")
    fig.tight_layout()
    return _save(fig, out_path)


def plot_divergence(div_csv: str | Path, out_path: str | Path) -> Path:
    with open(div_csv) as f:
        rows = list(csv.DictReader(f))
    fig, ax = plt.subplots(figsize=(5, 3.6))
    for kappa in sorted({r.get("kappa", "") for r in rows}):
        pts = [(int(r["step"]), _num(r["max_pairwise_distance"])) for r in rows if r.get("kappa", "") == kappa]
        ax.plot(*zip(*pts), label=f"kappa={kappa}" if kappa else None)
    ax.set_xlabel("step")
    ax.set_ylabel("max pairwise memory distance")
    if any(r.get("kappa") for r in rows):
        ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, out_path)


def _save(fig, out_path) -> Path:
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    # fixed metadata keeps reruns byte-identical
    fig.savefig(out, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return out

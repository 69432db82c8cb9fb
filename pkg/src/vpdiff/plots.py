"""SVG line charts for series, coefficient curves, and scans."""

from __future__ import annotations

import matplotlib
import numpy as np

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def plot_series(series_list, path, title=None, ylabel=None, logy=False):
    fig, ax = plt.subplots(figsize=(6, 4))
    for s in series_list:
        ax.plot(s.steps, s.values, label=s.name)
        finite = s.stderr[np.isfinite(s.stderr)]
        if finite.size and finite.max() > 0:
            ax.fill_between(s.steps, s.values - s.stderr, s.values + s.stderr, alpha=0.25)
    if logy:
        ax.set_yscale("log")
    ax.set_xlabel("n")
    if ylabel:
        ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def plot_curve_table(table, path, title=None):
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(table.steps, table.mean_coeff, label="mean coeff")
    ax.plot(table.steps, table.std_coeff, label="std coeff")
    ax.set_xlabel("n")
    if title:
        ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def plot_scan(scan, path, title=None):
    fig, ax = plt.subplots(figsize=(6, 4))
    ku = [r.mmd2 for r in scan.kid_uturn]
    su = [r.stderr for r in scan.kid_uturn]
    kn = [r.mmd2 for r in scan.kid_noise]
    sn = [r.stderr for r in scan.kid_noise]
    ax.errorbar(scan.turn_steps, ku, yerr=su, label="turn-around", marker="o", capsize=2)
    ax.errorbar(scan.turn_steps, kn, yerr=sn, label="noise init", marker="s", capsize=2)
    if scan.knee_step is not None:
        ax.axvline(scan.knee_step, color="gray", linestyle="--", label=f"knee {scan.knee_step}")
    ax.set_xlabel("turn step")
    ax.set_ylabel("discrepancy")
    if title:
        ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)

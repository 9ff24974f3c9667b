"""Report figures written next to the CSV/JSON outputs."""

from __future__ import annotations

import os
import tempfile
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
    "savefig.dpi": 150,
}


def new_figure(width=4.5, height=None):
    golden = (np.sqrt(5.0) - 1.0) / 2.0
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(width, height or width * golden))
    return fig, ax


def save(fig, path):
    """Render to a temp file, then rename (PNG metadata stripped for reproducibility)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.stem}.", suffix=path.suffix)
    os.close(fd)
    try:
        with plt.rc_context(STYLE):
            fig.tight_layout()
            fig.savefig(tmp, metadata={"Software": None})
        os.replace(tmp, path)
    finally:
        plt.close(fig)
        if os.path.exists(tmp):
            os.unlink(tmp)
    return path


def energy_rounds(trajs, lam, path):
    fig, ax = new_figure()
    for tr in trajs:
        if tr.failed:
            continue
        ax.plot(range(len(tr.energies)), tr.objective(lam), lw=0.8, alpha=0.7)
    ax.set_xlabel("round")
    ax.set_ylabel("potential + penalty")
    ax.set_title("objective during game rounds")
    return save(fig, path)


def loss_curve(curve, path):
    fig, ax = new_figure()
    ax.plot(curve, color="k", lw=1)
    ax.axhline(np.log(2), ls=":", color="grey", lw=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("ranking loss")
    return save(fig, path)


def learned_vs_true(d_learned, d_true, path):
    fig, ax = new_figure(4.0, 4.0)
    ax.scatter(d_true, d_learned, s=6, alpha=0.6, edgecolors="none")
    ax.axhline(0, color="grey", lw=0.5)
    ax.axvline(0, color="grey", lw=0.5)
    ax.set_xlabel("true energy difference")
    ax.set_ylabel("learned energy difference")
    return save(fig, path)


def decoy_energies(base_energy, energies, path):
    fig, ax = new_figure()
    ax.hist(energies, bins=min(30, max(5, len(energies) // 2)), color="0.6")
    ax.axvline(base_energy, color="C3", lw=1.2, label="input assembly")
    ax.set_xlabel("energy")
    ax.set_ylabel("decoys")
    ax.legend(frameon=False)
    return save(fig, path)


def cluster_counts(counts, path):
    fig, ax = new_figure()
    ax.bar(range(len(counts)), counts, color="0.4")
    ax.set_xlabel("cluster")
    ax.set_ylabel("members")
    return save(fig, path)


def metric_histograms(crmsd, tm, path):
    fig, axes = plt.subplots(1, 2, figsize=(7.0, 2.8))
    with plt.rc_context(STYLE):
        axes[0].hist(crmsd, bins=15, color="0.5")
        axes[0].set_xlabel("C-RMSD (A)")
        tm_ok = [v for v in tm if v == v]
        if tm_ok:
            axes[1].hist(tm_ok, bins=15, range=(0, 1), color="0.5")
        axes[1].set_xlabel("TM-score")
    return save(fig, path)

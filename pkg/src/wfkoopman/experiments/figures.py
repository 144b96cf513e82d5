"""PNG figures written next to the CSV outputs (Agg backend, no display)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed metadata keeps repeated renders byte-identical
_META = {"Software": None}


def plot_simlog(log, path, title: str = "") -> Path:
    k = np.asarray(log["k"])
    fig, axes = plt.subplots(3, 1, figsize=(7, 7), sharex=True)
    axes[0].plot(k, np.asarray(log["Pref"]) / 1e6, "k--", lw=1, label="reference")
    axes[0].plot(k, np.asarray(log["PWF"]) / 1e6, lw=1, label="farm power")
    axes[0].set_ylabel("P [MW]")
    axes[0].legend(loc="lower right", fontsize=8)
    axes[1].plot(k, log["CT1"], lw=1, label="C_T1")
    axes[1].plot(k, log["CT2"], lw=1, label="C_T2")
    axes[1].set_ylabel("thrust input")
    axes[1].legend(loc="lower right", fontsize=8)
    for ch in ("Ur1", "Ur2"):
        line, = axes[2].plot(k, log[f"{ch}_true"], lw=1, label=f"{ch}")
        est = np.asarray(log[f"{ch}_est"])
        if np.all(np.isfinite(est)):
            axes[2].plot(k, est, ":", color=line.get_color(), lw=1, label=f"{ch} est.")
    axes[2].set_ylabel("U_r [m/s]")
    axes[2].set_xlabel("sample k")
    axes[2].legend(loc="lower right", fontsize=8, ncol=2)
    if title:
        axes[0].set_title(title)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=110, metadata=_META)
    plt.close(fig)
    return path


def plot_loss_curve(hist, path) -> Path:
    rows = np.array([lb.as_row() for lb in hist.curve])
    fig, ax = plt.subplots(figsize=(6, 4))
    for i, name in enumerate(("recon", "pred", "lin", "total")):
        ax.semilogy(np.arange(rows.shape[0]), rows[:, i], lw=1, label=name)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=110, metadata=_META)
    plt.close(fig)
    return path


def plot_te_bars(rows, path) -> Path:
    labels = [f"S{r['scenario']} {r['controller']}" for r in rows]
    te = [r["te_watts"] / 1e3 for r in rows]
    fig, ax = plt.subplots(figsize=(6, 0.5 * len(rows) + 1.5))
    ax.barh(np.arange(len(rows)), te)
    ax.set_yticks(np.arange(len(rows)))
    ax.set_yticklabels(labels, fontsize=8)
    ax.set_xlabel("TE [kW]")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=110, metadata=_META)
    plt.close(fig)
    return path

"""Figure rendering for the report paths.

Every CLI report writes its delimited output first; these helpers render a
PNG next to it. File output only, no interactive viewer.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .backbones import PredictionSet
from .trajdata import SequenceSample


def plot_scene_prediction(sample: SequenceSample, pred: PredictionSet, path,
                          title: str = "") -> None:
    """Observed, ground-truth, and sampled trajectories of one window."""
    fig, ax = plt.subplots(figsize=(6, 6))
    tgt = np.flatnonzero(sample.targets)
    for k in range(pred.n_samples):
        for i in range(pred.samples.shape[1]):
            ax.plot(pred.samples[k, i, :, 0], pred.samples[k, i, :, 1],
                    color="tab:orange", alpha=0.15, lw=0.8,
                    label="samples" if k == 0 and i == 0 else None)
    for row, i in enumerate(tgt):
        obs = sample.ped_obs[i][sample.ped_mask[i, :8]]
        fut = sample.ped_future[i]
        ax.plot(obs[:, 0], obs[:, 1], "b-o", ms=2.5, lw=1.2,
                label="obs" if row == 0 else None)
        ax.plot(fut[:, 0], fut[:, 1], "g--s", ms=2.5, lw=1.2,
                label="gt" if row == 0 else None)
        mean = pred.mean_trajectory()[row]
        ax.plot(mean[:, 0], mean[:, 1], "r-", lw=1.4,
                label="pred mean" if row == 0 else None)
    for j in range(sample.n_veh):
        veh = sample.veh_obs[j][sample.veh_mask[j]]
        if len(veh):
            ax.plot(veh[:, 0], veh[:, 1], "k-^", ms=3, lw=1.8, alpha=0.6,
                    label="veh obs" if j == 0 else None)
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_aspect("equal")
    ax.legend(loc="best", fontsize=8)
    if title:
        ax.set_title(title, fontsize=10)
    fig.tight_layout()
    _save(fig, path)


def plot_training_curves(history: list, path) -> None:
    """Per-epoch training NLL and validation ADE/FDE."""
    if not history:
        return
    epochs = [h[0] for h in history]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(epochs, [h[1] for h in history], "b-", label="train NLL")
    ax.set_xlabel("epoch")
    ax.set_ylabel("train NLL", color="b")
    if any(np.isfinite(h[2]) for h in history):
        ax2 = ax.twinx()
        ax2.plot(epochs, [h[2] for h in history], "g-", label="val ADE")
        ax2.plot(epochs, [h[3] for h in history], "g--", label="val FDE")
        ax2.set_ylabel("val ADE / FDE [m]", color="g")
        ax2.legend(loc="upper right", fontsize=8)
    ax.legend(loc="upper left", fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def plot_ablation(rows: list[dict], path) -> None:
    """Grouped bars of ADE and FDE per model (median over seeds)."""
    by_name: dict[str, list] = {}
    for r in rows:
        if r["status"] == "ok":
            by_name.setdefault(r["name"], []).append((r["ade"], r["fde"]))
    if not by_name:
        return
    names = list(by_name)
    ades = [float(np.median([a for a, _ in by_name[n]])) for n in names]
    fdes = [float(np.median([f for _, f in by_name[n]])) for n in names]
    x = np.arange(len(names))
    fig, ax = plt.subplots(figsize=(1.6 * len(names) + 2.5, 4))
    ax.bar(x - 0.18, ades, width=0.36, label="ADE", color="tab:blue")
    ax.bar(x + 0.18, fdes, width=0.36, label="FDE", color="tab:orange")
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel("error [m]")
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def _save(fig, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=150)
    plt.close(fig)

"""Figure rendering for the report path.

Reads the delimited outputs a run already wrote (per-user losses, training
logs, proportion table) and renders PNG figures next to them. The core
pipeline never depends on this module; matplotlib is imported lazily and the
Agg backend keeps rendering headless and reproducible.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np


def _plt():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def gaussian_kde_1d(values: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Silverman-rule Gaussian kernel density, enough for loss histograms."""
    v = np.asarray(values, dtype=np.float64)
    n = len(v)
    if n < 2:
        return np.zeros_like(grid)
    sd = v.std()
    if sd == 0:
        sd = max(abs(v[0]), 1.0) * 1e-3
    bw = 1.06 * sd * n ** (-1 / 5)
    z = (grid[:, None] - v[None, :]) / bw
    return np.exp(-0.5 * z * z).sum(axis=1) / (n * bw * np.sqrt(2 * np.pi))


def read_per_user_losses(path) -> dict:
    out: dict = {}
    with open(path, encoding="utf-8") as f:
        for row in csv.DictReader(f):
            if row["user_id"] == "__all__":
                continue
            out.setdefault(row["method"], []).append(float(row["mean_logloss"]))
    return {m: np.array(v) for m, v in out.items()}


def render_loss_density(run_dir: Path, out_path: Path) -> bool:
    src = run_dir / "per_user_loss.csv"
    if not src.exists():
        return False
    losses = read_per_user_losses(src)
    if not losses:
        return False
    plt = _plt()
    lo = min(v.min() for v in losses.values())
    hi = max(v.max() for v in losses.values())
    pad = 0.1 * (hi - lo + 1e-9)
    grid = np.linspace(lo - pad, hi + pad, 256)
    fig, ax = plt.subplots(figsize=(6, 4))
    for method in sorted(losses):
        ax.plot(grid, gaussian_kde_1d(losses[method], grid), label=method, lw=1.5)
    ax.set_xlabel("per-user mean log-loss")
    ax.set_ylabel("density")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return True


def render_training_curves(run_dir: Path, out_path: Path) -> bool:
    logs = sorted(run_dir.glob("training_log_*.csv"))
    if not logs:
        return False
    plt = _plt()
    fig, ax = plt.subplots(figsize=(6, 4))
    for log in logs:
        label = log.stem.replace("training_log_", "")
        episodes, q = [], []
        with open(log, encoding="utf-8") as f:
            for row in csv.DictReader(f):
                episodes.append(int(row["episode"]))
                q.append(float(row["mean_query_loss"]))
        if episodes:
            ax.plot(episodes, q, label=label, lw=1.0)
    ax.set_xlabel("episode")
    ax.set_ylabel("mean query loss")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return True


def render_proportions(run_dir: Path, out_path: Path) -> bool:
    src = run_dir / "proportions.csv"
    if not src.exists():
        return False
    names, pct = [], []
    with open(src, encoding="utf-8") as f:
        for row in csv.DictReader(f):
            names.append(row["model"])
            pct.append(float(row["user_proportion_pct"]))
    if not names:
        return False
    plt = _plt()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.bar(names, pct, color="tab:blue")
    ax.set_ylabel("users best served (%)")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return True


def render_run_figures(run_dir) -> list:
    """Render every figure whose source CSV exists; returns written paths."""
    run_dir = Path(run_dir)
    fig_dir = run_dir / "figures"
    fig_dir.mkdir(exist_ok=True)
    written = []
    for fn, name in (
        (render_loss_density, "per_user_loss_density.png"),
        (render_training_curves, "training_curves.png"),
        (render_proportions, "best_model_proportions.png"),
    ):
        path = fig_dir / name
        if fn(run_dir, path):
            written.append(path)
    return written

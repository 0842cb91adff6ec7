"""Static figures rendered from CSV artifacts only (no model access)."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np


def _read(path: Path):
    with path.open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    return rows


def _columns(rows, *names):
    return [np.array([float(r[n]) for r in rows]) for n in names]


def _fig():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def scatter(path: Path, dst: Path) -> Path:
    plt = _fig()
    x0, x1 = _columns(_read(path), "x0", "x1")
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.scatter(x0, x1, s=1, alpha=0.4)
    ax.set_aspect("equal")
    ax.set_title(path.stem)
    fig.savefig(dst, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return dst


def heatmap(path: Path, dst: Path) -> Path:
    plt = _fig()
    x0, x1, e = _columns(_read(path), "x0", "x1", "energy")
    n = int(round(np.sqrt(len(e))))
    fig, ax = plt.subplots(figsize=(4.5, 4))
    im = ax.imshow(e.reshape(n, n), origin="lower", extent=(x0.min(), x0.max(), x1.min(), x1.max()), cmap="viridis")
    fig.colorbar(im, ax=ax, label="marginal energy")
    ax.set_title("energy")
    fig.savefig(dst, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return dst


def histogram(path: Path, dst: Path) -> Path:
    plt = _fig()
    edges, counts = _columns(_read(path), "bin_edge", "count")
    width = edges[1] - edges[0] if len(edges) > 1 else 0.05
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.bar(edges, counts / max(counts.sum(), 1), width=width, align="edge")
    ax.set_xlabel("cosine similarity")
    ax.set_title(path.stem)
    fig.savefig(dst, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return dst


def curves(path: Path, dst: Path) -> Path:
    plt = _fig()
    rows = _read(path)
    it, le, lh, er, ef = _columns(rows, "iter", "loss_ebm", "loss_le", "energy_real_mean", "energy_fake_mean")
    fig, axes = plt.subplots(1, 2, figsize=(8, 3))
    axes[0].plot(it, le, label="L_EBM")
    axes[0].plot(it, lh, label="L_LE")
    axes[0].legend()
    axes[1].plot(it, er, label="real")
    axes[1].plot(it, ef, label="generated")
    axes[1].set_ylabel("mean marginal energy")
    axes[1].legend()
    fig.savefig(dst, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return dst


def ablation_bars(path: Path, dst: Path) -> Path:
    plt = _fig()
    rows = _read(path)
    fig, ax = plt.subplots(figsize=(12, 3.5))
    ax.bar(range(len(rows)), [float(r["mmd"]) for r in rows])
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels([r["cell"] for r in rows], rotation=90, fontsize=6)
    ax.set_ylabel("MMD^2")
    fig.savefig(dst, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return dst


def render_directory(src, dst) -> list:
    """Render every recognised CSV under ``src`` into PNGs in ``dst``."""
    src, dst = Path(src), Path(dst)
    dst.mkdir(parents=True, exist_ok=True)
    written = []
    for path in sorted(src.rglob("*.csv")):
        if dst in path.parents:
            continue
        name = path.stem
        target = dst / f"{path.parent.name}_{name}.png" if path.parent != src else dst / f"{name}.png"
        if name.endswith("samples"):
            written.append(scatter(path, target))
        elif name == "energy_grid":
            written.append(heatmap(path, target))
        elif name.startswith("cosine_hist"):
            written.append(histogram(path, target))
        elif name == "metrics":
            written.append(curves(path, target))
        elif name == "ablation":
            written.append(ablation_bars(path, target))
    return written

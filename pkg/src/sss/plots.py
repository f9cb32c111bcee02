"""Static figures (PNG) for the CLI."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def tau_plot(path, taus, dice) -> None:
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.plot(taus, dice, marker="o")
    ax.set_xlabel("connectivity threshold tau")
    ax.set_ylabel("Dice (%)")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def metrics_plot(path, records) -> None:
    steps = [r["step"] for r in records]
    fig, axes = plt.subplots(1, 2, figsize=(9, 3))
    for key in ("l_sup", "l_unsup", "l_total"):
        vals = [r[key] if isinstance(r[key], (int, float)) else np.nan for r in records]
        axes[0].plot(steps, vals, label=key, lw=0.8)
    axes[0].set_xlabel("step")
    axes[0].legend()
    sims = [r.get("dfe_similarity") or [] for r in records]
    n = max((len(s) for s in sims), default=0)
    for k in range(n):
        axes[1].plot(steps, [s[k] if len(s) > k else np.nan for s in sims], label=f"scale {k}",
                     lw=0.8)
    axes[1].set_xlabel("step")
    axes[1].set_ylabel("pooled cosine similarity")
    if n:
        axes[1].legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def mask_overlays(out_dir: Path, hard: np.ndarray, volume, result) -> list[Path]:
    """One PNG per slice; slices inside the selected window get a green title."""
    out_dir.mkdir(parents=True, exist_ok=True)
    window = set(result.window.slices) if result.window is not None else set()
    paths = []
    for z in range(hard.shape[0]):
        fig, ax = plt.subplots(figsize=(3, 3))
        if volume is not None:
            ax.imshow(volume.slices[z], cmap="gray", vmin=0, vmax=1)
        ax.imshow(np.ma.masked_equal(hard[z], 0), cmap="autumn", alpha=0.5)
        for p in result.prompts.for_slice(z).points:
            ax.plot(p.x, p.y, "c+", ms=8)
        ax.set_title(f"slice {z}", color="green" if z in window else "black")
        ax.axis("off")
        path = out_dir / f"slice_{z:03d}.png"
        fig.savefig(path, dpi=80)
        plt.close(fig)
        paths.append(path)
    return paths

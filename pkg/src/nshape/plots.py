"""Report figures; matplotlib runs headless."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_COLORS = {"normal": "C0", "none": "C7", "fo": "C1", "sdf": "C2", "color": "C3"}


def chamfer_figure(rows, path) -> None:
    """Per-seed Chamfer points with the mean bar for each shaping target."""
    shapings = list(dict.fromkeys(r["shaping"] for r in rows))
    fig, ax = plt.subplots(figsize=(5, 3.2))
    labels = []
    for i, s in enumerate(shapings):
        cd = np.array([r["chamfer"] for r in rows if r["shaping"] == s])
        ok = cd[np.isfinite(cd)]
        # runs whose mesh vanished under culling have infinite Chamfer; count them in the label
        labels.append(s if len(ok) == len(cd) else f"{s}\n({len(cd) - len(ok)} empty)")
        if len(ok):
            ax.bar(i, ok.mean(), color=_COLORS.get(s, "C4"), alpha=0.5, width=0.6)
            ax.plot(np.full(len(ok), i), ok, "o", color=_COLORS.get(s, "C4"), ms=4)
    ax.set_xticks(range(len(shapings)), labels)
    ax.set_ylabel("Chamfer (L2)")
    ax.set_title("reconstruction error by shaping target")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _smooth(y, k: int = 20):
    if len(y) < k:
        return y
    return np.convolve(y, np.ones(k) / k, mode="valid")


def loss_figure(curves, path) -> None:
    """Photometric loss and L_M over training, one line per run."""
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.2))
    for s, runs in curves.items():
        for j, m in enumerate(runs):
            label = s if j == 0 else None
            c = _COLORS.get(s, "C4")
            y = _smooth(m["L_C"])
            axes[0].plot(m["step"][-len(y):], y, color=c, lw=0.8, label=label)
            if np.any(m["L_M"]):
                axes[1].plot(m["step"][-len(_smooth(m["L_M"])):], _smooth(m["L_M"]), color=c, lw=0.8,
                             label=label)
    axes[0].set_yscale("log")
    axes[0].set_xlabel("step")
    axes[0].set_ylabel("L_C")
    axes[1].set_xlabel("step")
    axes[1].set_ylabel("L_M")
    axes[0].legend(fontsize=7)
    if axes[1].lines:
        axes[1].legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)

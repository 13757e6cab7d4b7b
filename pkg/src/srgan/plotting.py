"""Static figures written next to the CSV/JSON outputs of the CLI."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_loss_curves(columns: dict[str, np.ndarray], iterations: np.ndarray, path,
                     title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, values in columns.items():
        ax.plot(iterations, values, label=name, linewidth=1)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    if any(np.all(v > 0) for v in columns.values()):
        ax.set_yscale("log")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_depth_profile(rows: list[dict], path) -> Path:
    """Median forward time against residual-block count, one line per skip setting."""
    fig, ax = plt.subplots(figsize=(6, 4))
    colours = {"on": "tab:blue", "off": "tab:red"}
    for skip in ("on", "off"):
        sel = sorted((r for r in rows if r["skip"] == skip), key=lambda r: r["blocks"])
        if sel:
            ax.plot([r["blocks"] for r in sel], [r["median_s"] for r in sel], "o-",
                    color=colours[skip], label=f"skip {skip}")
    ax.set_xlabel("residual blocks")
    ax.set_ylabel("median forward time (s)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)

"""SVG line charts of sweep results."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .experiments import SweepResult  # noqa: E402

# fixed ids and no timestamp so repeated runs give identical files
_RC = {"svg.hashsalt": "onebit-rof", "svg.fonttype": "path", "font.size": 9}


def plot_sweep(rows: list[SweepResult], path: str | Path, xlabel: str, title: str = "") -> Path:
    x = [r.sweep_db for r in rows]

    def finite(v):
        return v if math.isfinite(v) else float("nan")

    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(5.0, 3.4))
        ax.plot(x, [finite(r.nmse_dnn_db) for r in rows], "o-", ms=3, label="DNN")
        ax.plot(x, [finite(r.nmse_blmmse_db) for r in rows], "s--", ms=3, label="BLMMSE")
        ax.set_xlabel(xlabel)
        ax.set_ylabel("NMSE [dB]")
        if title:
            ax.set_title(title)
        ax.grid(True, lw=0.4, alpha=0.6)
        ax.legend(frameon=False)
        fig.tight_layout()
        path = Path(path)
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
    return path

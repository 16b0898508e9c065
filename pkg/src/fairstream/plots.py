"""SVG figures: RMSE along the sensitive axis and per-group deviation bars."""
from __future__ import annotations

from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# stable element ids and no timestamp, so identical inputs give identical files
plt.rcParams["svg.hashsalt"] = "fairstream"
_META = {"Date": None, "Creator": "fairstream"}


def window_curve_svg(path, curves: Mapping[str, Sequence[Sequence[float]]], overall: float | None = None) -> None:
    """``curves`` maps a window-size label to [(window center, rmse), ...]."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for label, pts in curves.items():
        if pts:
            xs, ys = zip(*pts)
            ax.plot(xs, ys, label=f"window {label}", linewidth=1.2)
    if overall is not None:
        ax.axhline(overall, color="grey", linestyle="--", linewidth=0.8, label="overall")
    ax.set_xlabel("sensitive value (window center)")
    ax.set_ylabel("RMSE")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata=_META)
    plt.close(fig)


def group_bars_svg(path, series: Mapping[str, Mapping[str, float]], ylabel: str = "|group RMSE - overall|") -> None:
    """Grouped bars: one bar cluster per group, one bar per series (e.g. sampler mode)."""
    names = list(series)
    groups = sorted({g for s in series.values() for g in s})
    width = 0.8 / max(1, len(names))
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for k, name in enumerate(names):
        vals = [series[name].get(g, 0.0) for g in groups]
        ax.bar([x + k * width for x in range(len(groups))], vals, width=width, label=name)
    ax.set_xticks([x + width * (len(names) - 1) / 2 for x in range(len(groups))])
    ax.set_xticklabels(groups)
    ax.set_ylabel(ylabel)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata=_META)
    plt.close(fig)

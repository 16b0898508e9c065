"""Accuracy and fairness metrics: RMSE, group deviation, sliding worst window."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np


def rmse(pred, obs, subset=None) -> float:
    """Root mean squared error over ``subset`` (a boolean mask; default all finite cells)."""
    pred = np.asarray(pred, dtype=float)
    obs = np.asarray(obs, dtype=float)
    subset = np.isfinite(obs) if subset is None else np.asarray(subset, dtype=bool)
    if not subset.any():
        raise ValueError("RMSE over an empty subset")
    err = pred[subset] - obs[subset]
    return math.sqrt(float(np.mean(err * err)))


def squared_error_totals(pred, obs, mask) -> tuple[np.ndarray, np.ndarray]:
    """Per-segment (sum of squared errors, observation count) over ``mask``; arrays are (N, T)."""
    mask = np.asarray(mask, dtype=bool)
    diff = np.where(mask, np.asarray(pred, dtype=float) - np.where(mask, obs, 0.0), 0.0)
    return (diff * diff).sum(axis=1), mask.sum(axis=1)


def group_rmse(
    sse: np.ndarray, counts: np.ndarray, codes: Sequence[int], labels: Sequence[str], pooling: str = "observations"
) -> dict[str, float]:
    """RMSE per group; ``pooling='segments'`` averages per-segment RMSEs instead of pooling cells.

    Groups without observations are left out with a warning.
    """
    codes = np.asarray(codes)
    out = {}
    for k, lab in enumerate(labels):
        sel = (codes == k) & (counts > 0)
        if not sel.any():
            warnings.warn(f"group {lab!r} has no test observations; excluded from fairness", stacklevel=2)
            continue
        if pooling == "observations":
            out[lab] = math.sqrt(float(sse[sel].sum() / counts[sel].sum()))
        elif pooling == "segments":
            out[lab] = float(np.mean(np.sqrt(sse[sel] / counts[sel])))
        else:
            raise ValueError(f"unknown pooling {pooling!r}")
    return out


def group_fairness(group_values: Mapping[str, float], overall: float) -> float:
    """Mean absolute deviation of per-group performance from overall performance."""
    if not group_values:
        raise ValueError("no groups to compare")
    return sum(abs(v - overall) for v in group_values.values()) / len(group_values)


@dataclass
class WindowResult:
    worst_rmse: float
    window: tuple[float, float]
    positions: np.ndarray  # window starts that were evaluated (non-empty ones)
    curve: np.ndarray  # RMSE per evaluated window


def window_starts(s_min: float, s_max: float, width: float, stride: float) -> np.ndarray:
    """Starts ``s_min + k*stride`` for k = 0.. until a window reaches past ``s_max``."""
    k_last = max(0, math.ceil((s_max - s_min - width) / stride))
    while s_min + k_last * stride + width <= s_max:
        k_last += 1
    return s_min + np.arange(k_last + 1) * stride


def worst_window(
    sse: np.ndarray,
    counts: np.ndarray,
    sensitive: np.ndarray,
    width: float,
    stride_fraction: float = 0.1,
) -> WindowResult:
    """Slide a half-open window [a, a + width) along the sensitive axis; return the worst pooled RMSE.

    ``stride_fraction=0`` evaluates every distinct membership set (a dense scan).
    """
    if not width > 0:
        raise ValueError("window width must be positive")
    sse = np.asarray(sse, dtype=float)
    counts = np.asarray(counts, dtype=float)
    s = np.asarray(sensitive, dtype=float)
    keep = counts > 0
    if not keep.any():
        raise ValueError("no segment has observations")
    s, sse, counts = s[keep], sse[keep], counts[keep]
    order = np.argsort(s, kind="stable")
    s, sse, counts = s[order], sse[order], counts[order]
    csse = np.concatenate([[0.0], np.cumsum(sse)])
    ccnt = np.concatenate([[0.0], np.cumsum(counts)])

    if stride_fraction > 0:
        starts = window_starts(s[0], s[-1], width, stride_fraction * width)
        lo = np.searchsorted(s, starts, side="left")
        hi = np.searchsorted(s, starts + width, side="left")
    else:
        # membership of segment k is the interval s_k - width < a <= s_k, so every distinct set
        # is realised at one of these right endpoints
        starts = np.unique(np.concatenate([s, s - width]))
        lo = np.searchsorted(s, starts, side="left")
        hi = np.searchsorted(s - width, starts, side="left")
    n = ccnt[hi] - ccnt[lo]
    ok = n > 0
    if not ok.any():
        raise ValueError("every window is empty")
    vals = np.sqrt((csse[hi] - csse[lo])[ok] / n[ok])
    starts = starts[ok]
    k = int(np.argmax(vals))
    return WindowResult(float(vals[k]), (float(starts[k]), float(starts[k] + width)), starts, vals)

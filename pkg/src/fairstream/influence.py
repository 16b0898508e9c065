"""Flow-ratio influence between upstream and downstream segments."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import PredictionGraph


@dataclass
class FlowTable:
    flow: np.ndarray  # (N, T), strictly positive
    observed: np.ndarray  # (N, T) bool; False means the simulated value was used

    @property
    def source_flag(self) -> np.ndarray:
        return np.where(self.observed, "observed", "simulated")


def fill_flow(observed: np.ndarray, mask: np.ndarray, simulated: np.ndarray) -> FlowTable:
    """Observed flow where available, simulated flow everywhere else."""
    observed = np.asarray(observed, dtype=float)
    simulated = np.asarray(simulated, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    if not observed.shape == simulated.shape == mask.shape:
        raise ValueError("observed, mask and simulated must share one shape")
    gaps = ~mask & ~np.isfinite(simulated)
    if gaps.any():
        seg, day = np.argwhere(gaps)[0]
        raise ValueError(f"no simulated flow for unobserved cell (segment {seg}, day {day})")
    flow = np.where(mask, observed, simulated)
    if np.any(~(flow > 0)):
        seg, day = np.argwhere(~(flow > 0))[0]
        raise ValueError(f"non-positive flow {flow[seg, day]} at (segment {seg}, day {day})")
    return FlowTable(flow=flow, observed=mask.copy())


def one_hop_influence(q_j, q_i):
    """Share of mixed flow contributed by the upstream segment: q_j / (q_j + q_i)."""
    q_j = np.asarray(q_j, dtype=float)
    q_i = np.asarray(q_i, dtype=float)
    if np.any(~(q_j > 0)) or np.any(~(q_i > 0)):
        raise ValueError("influence needs strictly positive flows")
    out = q_j / (q_j + q_i)
    return float(out) if out.ndim == 0 else out


def path_influence(pgraph: PredictionGraph, j: int, i: int, t: int, flows: np.ndarray) -> float:
    """Product of one-hop influences along the stored stream path from j to i at day t."""
    path = pgraph.paths[pgraph.edge_index(j, i)]
    value = 1.0
    for a, b in zip(path, path[1:]):
        value *= one_hop_influence(flows[a, t], flows[b, t])
    return value


@dataclass
class InfluenceTable:
    """Influence per prediction-graph edge, dense (edge, day) layout."""

    per_step: np.ndarray | None  # (E, T)
    time_averaged: np.ndarray  # (E,)

    def window_mean(self, start: int, stop: int) -> np.ndarray:
        if self.per_step is None:
            raise ValueError("table was built in averaged mode; no per-step values kept")
        return self.per_step[:, start:stop].mean(axis=1)

    def value(self, edge: int, day: int | None = None) -> float:
        if day is None:
            return float(self.time_averaged[edge])
        return float(self.per_step[edge, day])


def build_table(pgraph: PredictionGraph, flows: np.ndarray, mode: str = "per-step") -> InfluenceTable:
    """Precompute influence for every edge and day.

    Hops are multiplied left to right starting from 1.0, matching ``path_influence``
    bit for bit. ``mode='averaged'`` drops the per-step array after averaging.
    """
    if mode not in ("per-step", "averaged"):
        raise ValueError(f"unknown influence mode {mode!r}")
    flows = np.asarray(flows, dtype=float)
    if np.any(~(flows > 0)):
        raise ValueError("influence needs strictly positive flows")
    T = flows.shape[1]
    hop_cache: dict[tuple[int, int], np.ndarray] = {}
    table = np.empty((pgraph.n_edges, T))
    for k, path in enumerate(pgraph.paths):
        value = np.ones(T)
        for a, b in zip(path, path[1:]):
            factor = hop_cache.get((a, b))
            if factor is None:
                factor = hop_cache[(a, b)] = flows[a] / (flows[a] + flows[b])
            value = value * factor
        table[k] = value
    averaged = table.mean(axis=1) if T else np.zeros(pgraph.n_edges)
    return InfluenceTable(per_step=table if mode == "per-step" else None, time_averaged=averaged)


def write_influence_csv(path, pgraph: PredictionGraph, table: InfluenceTable, include_steps: bool = False) -> None:
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        fh.write("upstream_id,downstream_id,day_or_AVG,value\n")
        for k, (j, i) in enumerate(pgraph.edges):
            if include_steps and table.per_step is not None:
                for t, v in enumerate(table.per_step[k]):
                    fh.write(f"{j},{i},{t},{v:.17g}\n")
            fh.write(f"{j},{i},AVG,{table.time_averaged[k]:.17g}\n")

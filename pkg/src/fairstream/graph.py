"""River network graphs: direct topology, multi-hop prediction graph, sensitive groups."""
from __future__ import annotations

from dataclasses import dataclass, field
from graphlib import CycleError, TopologicalSorter
from typing import Iterable, Sequence

import numpy as np


class EdgeNotFoundError(LookupError):
    pass


@dataclass(frozen=True)
class BasinGraph:
    """Directed river network. Edges point downstream as (upstream, downstream, distance)."""

    segments: tuple[int, ...]
    direct_edges: tuple[tuple[int, int, float], ...]
    outlets: tuple[int, ...]

    def __post_init__(self):
        known = set(self.segments)
        for u, d, dist in self.direct_edges:
            if u not in known or d not in known:
                raise ValueError(f"edge ({u}, {d}) references an unknown segment")
            if not dist > 0:
                raise ValueError(f"edge ({u}, {d}) has non-positive distance {dist}")

    @property
    def n_segments(self) -> int:
        return len(self.segments)

    def upstream(self) -> dict[int, list[tuple[int, float]]]:
        """Map each segment to its direct upstream (segment, distance) pairs, sorted by id."""
        up: dict[int, list[tuple[int, float]]] = {s: [] for s in self.segments}
        for u, d, dist in self.direct_edges:
            up[d].append((u, dist))
        for v in up.values():
            v.sort()
        return up

    def downstream(self) -> dict[int, list[int]]:
        down: dict[int, list[int]] = {s: [] for s in self.segments}
        for u, d, _ in self.direct_edges:
            down[u].append(d)
        return down

    def topological_order(self) -> list[int]:
        """Upstream-first order. Raises ValueError on cycles."""
        ts = TopologicalSorter({s: [u for u, _ in ups] for s, ups in self.upstream().items()})
        try:
            return list(ts.static_order())
        except CycleError as exc:
            raise ValueError(f"river network contains a cycle: {exc.args[1]}") from None

    def edge_set(self) -> set[tuple[int, int]]:
        return {(u, d) for u, d, _ in self.direct_edges}

    def to_dict(self) -> dict:
        return {
            "segments": list(self.segments),
            "edges": [{"upstream": u, "downstream": d, "distance": dist} for u, d, dist in self.direct_edges],
            "outlets": list(self.outlets),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "BasinGraph":
        edges = tuple((int(e["upstream"]), int(e["downstream"]), float(e["distance"])) for e in data["edges"])
        return cls(tuple(int(s) for s in data["segments"]), edges, tuple(int(s) for s in data["outlets"]))


@dataclass
class PredictionGraph:
    """Expanded graph with an edge (j, i) whenever j is upstream of i within the hop limit.

    Edge-indexed arrays share one ordering: edges are sorted by (downstream, upstream).
    """

    segments: tuple[int, ...]
    edges: list[tuple[int, int]]
    distances: np.ndarray
    hops: np.ndarray
    paths: list[tuple[int, ...]]
    adjacency: np.ndarray | None = None
    _index: dict[tuple[int, int], int] = field(default_factory=dict, repr=False)
    _in_edges: dict[int, list[int]] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._index = {e: k for k, e in enumerate(self.edges)}
        self._in_edges = {s: [] for s in self.segments}
        for k, (_, i) in enumerate(self.edges):
            self._in_edges[i].append(k)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def edge_index(self, j: int, i: int) -> int:
        try:
            return self._index[(j, i)]
        except KeyError:
            raise EdgeNotFoundError(f"({j}, {i}) is not an edge of the prediction graph") from None

    def in_edges(self, i: int) -> list[int]:
        """Edge indices (j, i) into segment i, ordered by upstream id."""
        return self._in_edges[i]

    def in_neighbors(self, i: int) -> list[int]:
        return [self.edges[k][0] for k in self._in_edges[i]]

    def has_edge(self, j: int, i: int) -> bool:
        return (j, i) in self._index

    def to_dict(self) -> dict:
        return {
            "segments": list(self.segments),
            "edges": [
                {
                    "upstream": j,
                    "downstream": i,
                    "distance": float(self.distances[k]),
                    "hops": int(self.hops[k]),
                    "path": list(self.paths[k]),
                    "weight": None if self.adjacency is None else float(self.adjacency[k]),
                }
                for k, (j, i) in enumerate(self.edges)
            ],
        }


def expand_multihop(graph: BasinGraph, hop_limit: int | None = None) -> PredictionGraph:
    """Connect every segment to all segments upstream of it (within ``hop_limit`` hops).

    Routes on non-tree networks use the fewest hops, then the smallest total
    distance, then the lexicographically smallest segment sequence.
    """
    if hop_limit is not None and hop_limit < 1:
        raise ValueError("hop_limit must be a positive integer or None")
    graph.topological_order()  # cycle check
    up = graph.upstream()

    found: list[tuple[int, int, float, int, tuple[int, ...]]] = []
    for i in graph.segments:
        # best[u] = (distance, path from u to i)
        best: dict[int, tuple[float, tuple[int, ...]]] = {i: (0.0, (i,))}
        frontier = [i]
        hop = 0
        while frontier and (hop_limit is None or hop < hop_limit):
            hop += 1
            layer: dict[int, tuple[float, tuple[int, ...]]] = {}
            for v in frontier:
                dv, pv = best[v]
                for u, dist in up[v]:
                    if u in best:
                        continue
                    cand = (dv + dist, (u,) + pv)
                    if u not in layer or cand < layer[u]:
                        layer[u] = cand
            for u, (du, pu) in layer.items():
                best[u] = (du, pu)
                found.append((i, u, du, hop, pu))
            frontier = sorted(layer)

    found.sort(key=lambda r: (r[0], r[1]))
    return PredictionGraph(
        segments=tuple(graph.segments),
        edges=[(j, i) for i, j, *_ in found],
        distances=np.array([r[2] for r in found], dtype=float),
        hops=np.array([r[3] for r in found], dtype=int),
        paths=[r[4] for r in found],
    )


def compute_adjacency(pgraph: PredictionGraph) -> np.ndarray:
    """Logistic edge weights 1 / (1 + exp(z)) of standardized stream distances.

    Also stores the result on ``pgraph.adjacency``.
    """
    d = np.asarray(pgraph.distances, dtype=float)
    if d.size == 0:
        weights = np.zeros(0)
    else:
        sd = d.std()
        z = np.zeros_like(d) if d.size < 2 or sd == 0 else (d - d.mean()) / sd
        weights = 1.0 / (1.0 + np.exp(z))
    pgraph.adjacency = weights
    return weights


def enumerate_path(pgraph: PredictionGraph, j: int, i: int) -> tuple[int, ...]:
    return pgraph.paths[pgraph.edge_index(j, i)]


@dataclass(frozen=True)
class GroupPartition:
    thresholds: tuple[float, ...]
    labels: tuple[str, ...]
    membership: dict[int, str]

    def group_of(self, segment: int) -> str:
        return self.membership[segment]

    def members(self, label: str) -> list[int]:
        return sorted(s for s, g in self.membership.items() if g == label)

    def codes(self, segments: Sequence[int]) -> np.ndarray:
        """Integer group index (position in ``labels``) for each segment."""
        pos = {lab: k for k, lab in enumerate(self.labels)}
        return np.array([pos[self.membership[s]] for s in segments], dtype=int)


def default_labels(n_groups: int) -> tuple[str, ...]:
    if n_groups == 1:
        return ("all",)
    if n_groups == 2:
        return ("low", "high")
    if n_groups == 3:
        return ("low", "middle", "high")
    return tuple(f"g{k}" for k in range(n_groups))


def discretize(
    values: dict[int, float],
    thresholds: Iterable[float],
    labels: Sequence[str] | None = None,
) -> GroupPartition:
    """Bin sensitive values into half-open intervals ``[cut_k, cut_k+1)``.

    A value sitting exactly on a cut point belongs to the upper group.
    """
    cuts = tuple(float(t) for t in thresholds)
    if any(b <= a for a, b in zip(cuts, cuts[1:])):
        raise ValueError(f"thresholds must be strictly increasing, got {cuts}")
    labels = tuple(labels) if labels is not None else default_labels(len(cuts) + 1)
    if len(labels) != len(cuts) + 1:
        raise ValueError(f"{len(cuts)} thresholds need {len(cuts) + 1} labels, got {len(labels)}")
    membership = {}
    for seg, v in values.items():
        membership[seg] = labels[int(np.searchsorted(cuts, v, side="right"))]
    return GroupPartition(cuts, labels, membership)

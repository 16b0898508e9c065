"""Neighbour sampling and the fairness-driven edge modifier.

Modes
-----
random             uniform sample of ``neighbor_budget`` upstream neighbours
fair-discrete      balance physical influence across sensitive groups, then rescale weights
fair-continuous    inject low-density candidates that spread the sensitive values
fair-edge-ablation as fair-discrete with every influence set to 1 (balances edge counts)
fair-adj-ablation  as fair-discrete with influence replaced by the base edge weight
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .graph import PredictionGraph

MODES = ("random", "fair-discrete", "fair-continuous", "fair-edge-ablation", "fair-adj-ablation")
DISCRETE_MODES = ("fair-discrete", "fair-edge-ablation", "fair-adj-ablation")


@dataclass(frozen=True)
class SamplerConfig:
    mode: str = "random"
    neighbor_budget: int = 10
    balance_tolerance: float = 0.1
    feature_similarity_weight: float = 0.3
    seed: int = 0
    # "averaged" uses the time-mean influence; "window" averages over the training window
    influence_mode: str = "averaged"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown sampler mode {self.mode!r}; expected one of {MODES}")
        if self.neighbor_budget < 1:
            raise ValueError("neighbor_budget must be >= 1")
        if self.balance_tolerance < 0:
            raise ValueError("balance_tolerance must be >= 0")
        if not 0.0 <= self.feature_similarity_weight <= 1.0:
            raise ValueError("feature_similarity_weight must be in [0, 1]")
        if self.influence_mode not in ("averaged", "window"):
            raise ValueError(f"unknown influence_mode {self.influence_mode!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class NeighborSample:
    target: int
    neighbors: list[int]
    weights: list[float]
    influence: list[float]
    groups_present: dict[str, float] = field(default_factory=dict)
    headwater: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def node_rng(seed: int, node: int, epoch: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, node])


def sample_initial(
    pgraph: PredictionGraph, i: int, budget: int, seed: int, epoch: int = 0
) -> tuple[list[int], list[int]]:
    """Uniform ``budget``-subset of i's upstream neighbours, and the remaining candidates.

    Both lists come back sorted by segment id. A headwater yields two empty lists.
    """
    nbrs = pgraph.in_neighbors(i)
    if len(nbrs) <= budget:
        return sorted(nbrs), []
    pick = node_rng(seed, i, epoch).choice(len(nbrs), size=budget, replace=False)
    chosen = set(int(k) for k in pick)
    initial = sorted(nbrs[k] for k in chosen)
    pool = sorted(nbrs[k] for k in range(len(nbrs)) if k not in chosen)
    return initial, pool


def group_sums(members: Sequence[int], groups: Mapping[int, str], influence: Mapping[int, float]) -> dict[str, float]:
    sums: dict[str, float] = {}
    for j in members:
        sums[groups[j]] = sums.get(groups[j], 0.0) + influence[j]
    return sums


def balance_ratio(members: Sequence[int], target_groups: Sequence[str], groups, influence) -> float:
    """max/min of per-group influence sums over ``target_groups`` (inf if a group is empty)."""
    if len(target_groups) < 2:
        return 1.0
    sums = group_sums(members, groups, influence)
    vals = [sums.get(g, 0.0) for g in target_groups]
    lo = min(vals)
    return math.inf if lo <= 0 else max(vals) / lo


def modify_discrete(
    initial: Sequence[int],
    candidates: Sequence[int],
    groups: Mapping[int, str],
    influence: Mapping[int, float],
    config: SamplerConfig,
    similarity: Mapping[int, float] | None = None,
) -> list[int]:
    """Greedy injection/removal until group influence sums are within tolerance.

    Each move injects the best-scoring candidate of the weakest group or, when
    that group has no candidates, drops the least influential neighbour of the
    strongest group. A move is applied only if it lowers the max/min ratio.
    """
    current = list(initial)
    pool = list(candidates)
    target = sorted({groups[j] for j in current} | {groups[j] for j in pool})
    if len(target) < 2 or not current:
        return sorted(current)
    w = config.feature_similarity_weight
    ratio = balance_ratio(current, target, groups, influence)
    moves = 0
    while ratio > 1.0 + config.balance_tolerance and moves < 4 * config.neighbor_budget:
        sums = group_sums(current, groups, influence)
        weakest = min(target, key=lambda g: (sums.get(g, 0.0), g))
        strongest = max(target, key=lambda g: (sums.get(g, 0.0), g))
        cands = [j for j in pool if groups[j] == weakest]
        if cands:
            top = max(influence[j] for j in cands)

            def score(j):
                sim = 0.0 if similarity is None else similarity[j]
                return (1.0 - w) * influence[j] / top + w * sim

            pick = min(cands, key=lambda j: (-score(j), j))
            proposal = current + [pick]
        else:
            members = [j for j in current if groups[j] == strongest]
            # ties go to the largest id, so smaller ids are kept
            pick = min(sorted(members, reverse=True), key=lambda j: influence[j])
            proposal = [j for j in current if j != pick]
        new_ratio = balance_ratio(proposal, target, groups, influence)
        if not new_ratio < ratio:
            break
        current = proposal
        if pick in pool:
            pool.remove(pick)
        ratio = new_ratio
        moves += 1
    return sorted(current)


def rescale_weights(
    neighbors: Sequence[int],
    base_weights: Mapping[int, float],
    groups: Mapping[int, str],
    influence: Mapping[int, float],
) -> dict[int, float]:
    """Scale each edge by max_k SI_k / SI_g, where SI_g sums the influence of group g."""
    sums = group_sums(neighbors, groups, influence)
    if not sums:
        return {}
    top = max(sums.values())
    return {j: base_weights[j] * (top / sums[groups[j]]) for j in neighbors}


def similarity_range(members: Sequence[int], sensitive: Mapping[int, float]) -> float:
    vals = [sensitive[j] for j in members]
    return (max(vals) - min(vals)) if vals else 0.0


def sensitive_similarity(a: float, b: float, value_range: float) -> float:
    if value_range <= 0:
        return 1.0
    return 1.0 - abs(a - b) / value_range


def density(
    j: int,
    initial: Sequence[int],
    sensitive: Mapping[int, float],
    influence: Mapping[int, float],
    value_range: float,
) -> float:
    """Influence of the initial neighbours, weighted by their sensitive similarity to j."""
    total = 0.0
    for k in initial:
        total += sensitive_similarity(sensitive[j], sensitive[k], value_range) * influence[k]
    return total


def modify_continuous(
    initial: Sequence[int],
    candidates: Sequence[int],
    sensitive: Mapping[int, float],
    influence: Mapping[int, float],
    config: SamplerConfig,
) -> list[int]:
    """Inject candidates in ascending density order while each one raises the variance of s."""
    current = list(initial)
    if not candidates or not current:
        return sorted(current)
    r = similarity_range(list(initial) + list(candidates), sensitive)
    ranked = sorted(candidates, key=lambda j: (density(j, initial, sensitive, influence, r), -influence[j], j))
    limit = max(1, config.neighbor_budget // 2)
    var = float(np.var([sensitive[k] for k in current]))
    for j in ranked[:limit]:
        new_var = float(np.var([sensitive[k] for k in current] + [sensitive[j]]))
        if not new_var > var:
            break
        current.append(j)
        var = new_var
    return sorted(current)


def _ablation_influence(mode: str, members, influence, base_weights) -> dict[int, float]:
    if mode == "fair-edge-ablation":
        return {j: 1.0 for j in members}
    if mode == "fair-adj-ablation":
        return {j: base_weights[j] for j in members}
    return influence


def ablation_fair_edge(initial, candidates, groups, base_weights, config, similarity=None):
    """Discrete modifier + rescaling with every influence equal to 1."""
    ones = {j: 1.0 for j in list(initial) + list(candidates)}
    chosen = modify_discrete(initial, candidates, groups, ones, config, similarity)
    return chosen, rescale_weights(chosen, base_weights, groups, ones)


def ablation_fair_adj(initial, candidates, groups, base_weights, config, similarity=None):
    """Discrete modifier + rescaling with influence replaced by the base edge weight."""
    chosen = modify_discrete(initial, candidates, groups, base_weights, config, similarity)
    return chosen, rescale_weights(chosen, base_weights, groups, base_weights)


def feature_similarity_matrix(mean_features: np.ndarray) -> np.ndarray:
    """Cosine similarity of standardized time-mean feature vectors, mapped to [0, 1]."""
    x = np.asarray(mean_features, dtype=float)
    sd = x.std(axis=0)
    z = (x - x.mean(axis=0)) / np.where(sd > 0, sd, 1.0)
    norm = np.linalg.norm(z, axis=1)
    z = z / np.where(norm > 0, norm, 1.0)[:, None]
    return (1.0 + np.clip(z @ z.T, -1.0, 1.0)) / 2.0


def sample_node(
    pgraph: PredictionGraph,
    i: int,
    config: SamplerConfig,
    edge_influence: np.ndarray,
    groups: Mapping[int, str] | None = None,
    sensitive: Mapping[int, float] | None = None,
    feature_similarity: np.ndarray | None = None,
    epoch: int = 0,
) -> NeighborSample:
    edges = pgraph.in_edges(i)
    if not edges:
        return NeighborSample(i, [], [], [], {}, headwater=True)
    adjacency = pgraph.adjacency
    if adjacency is None:
        raise ValueError("prediction graph has no adjacency weights; call compute_adjacency first")
    nbrs = [pgraph.edges[k][0] for k in edges]
    inf = {j: float(edge_influence[k]) for j, k in zip(nbrs, edges)}
    base = {j: float(adjacency[k]) for j, k in zip(nbrs, edges)}
    initial, pool = sample_initial(pgraph, i, config.neighbor_budget, config.seed, epoch)
    sim = None if feature_similarity is None else {j: float(feature_similarity[i, j]) for j in nbrs}

    mode = config.mode
    weights = base
    if mode == "random":
        chosen = initial
    elif mode == "fair-continuous":
        if sensitive is None:
            raise ValueError("fair-continuous sampling needs sensitive values")
        chosen = modify_continuous(initial, pool, sensitive, inf, config)
    else:
        if groups is None:
            raise ValueError(f"{mode} sampling needs group labels")
        balance = _ablation_influence(mode, nbrs, inf, base)
        chosen = modify_discrete(initial, pool, groups, balance, config, sim)
        weights = rescale_weights(chosen, base, groups, balance)

    present = group_sums(chosen, groups, inf) if groups is not None else {}
    return NeighborSample(
        target=i,
        neighbors=list(chosen),
        weights=[weights[j] for j in chosen],
        influence=[inf[j] for j in chosen],
        groups_present=present,
    )


def sample_neighborhoods(
    pgraph: PredictionGraph,
    config: SamplerConfig,
    edge_influence: np.ndarray,
    groups: Mapping[int, str] | None = None,
    sensitive: Mapping[int, float] | None = None,
    feature_similarity: np.ndarray | None = None,
    epoch: int = 0,
) -> dict[int, NeighborSample]:
    """Sample every segment's neighbourhood. Each node draws from its own (seed, epoch, node) stream."""
    return {
        i: sample_node(pgraph, i, config, edge_influence, groups, sensitive, feature_similarity, epoch)
        for i in pgraph.segments
    }


def write_neighborhoods(path, samples: Mapping[int, NeighborSample], epoch: int, config: SamplerConfig) -> None:
    doc = {
        "schema_version": 1,
        "epoch": epoch,
        "sampler": config.to_dict(),
        "neighborhoods": [samples[i].to_dict() for i in sorted(samples)],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fairstream.graph import BasinGraph, compute_adjacency, expand_multihop
from fairstream.influence import build_table
from fairstream.sampler import (
    SamplerConfig,
    ablation_fair_adj,
    ablation_fair_edge,
    balance_ratio,
    density,
    feature_similarity_matrix,
    group_sums,
    modify_continuous,
    modify_discrete,
    rescale_weights,
    sample_initial,
    sample_neighborhoods,
    sample_node,
    write_neighborhoods,
)
from oracles import brute_density, random_tree


def star(n_up):
    """Segment 0 with ``n_up`` direct upstream leaves 1..n_up."""
    edges = tuple((k, 0, float(k)) for k in range(1, n_up + 1))
    g = BasinGraph(tuple(range(n_up + 1)), edges, (0,))
    pg = expand_multihop(g)
    compute_adjacency(pg)
    return pg


def test_initial_takes_all_when_few():
    init, pool = sample_initial(star(3), 0, 5, seed=1)
    assert init == [1, 2, 3] and pool == []


def test_initial_cardinality_and_determinism():
    pg = star(10)
    init, pool = sample_initial(pg, 0, 4, seed=1)
    assert len(init) == 4 and len(pool) == 6
    assert sorted(init + pool) == list(range(1, 11))
    assert sample_initial(pg, 0, 4, seed=1) == (init, pool)
    # other epochs draw differently at least sometimes
    draws = {tuple(sample_initial(pg, 0, 4, seed=1, epoch=e)[0]) for e in range(10)}
    assert len(draws) > 1


def test_headwater_flagged():
    pg = star(2)
    s = sample_node(pg, 1, SamplerConfig(), np.full(pg.n_edges, 0.5))
    assert s.headwater and s.neighbors == []


CFG0 = SamplerConfig(mode="fair-discrete", balance_tolerance=0.0, feature_similarity_weight=0.0)


def test_discrete_single_group_unchanged():
    groups = {1: "g", 2: "g", 3: "g"}
    assert modify_discrete([1, 2], [3], groups, {1: 0.2, 2: 0.3, 3: 0.9}, CFG0) == [1, 2]


def test_discrete_single_injection():
    out = modify_discrete(["a"], ["b"], {"a": "G1", "b": "G2"}, {"a": 0.4, "b": 0.4}, CFG0)
    assert out == ["a", "b"]


def test_discrete_removal_then_stop():
    cfg = SamplerConfig(balance_tolerance=0.5, feature_similarity_weight=0.0)
    groups = {"a": "G1", "b": "G1", "c": "G2"}
    inf = {"a": 0.6, "b": 0.1, "c": 0.1}
    assert modify_discrete(["a", "b", "c"], [], groups, inf, cfg) == ["a", "c"]


def test_discrete_feature_similarity_breaks_influence_order():
    groups = {1: "A", 2: "B", 3: "B"}
    inf = {1: 0.5, 2: 0.5, 3: 0.45}
    sim = {1: 0.0, 2: 0.0, 3: 1.0}
    only_inf = modify_discrete([1], [2, 3], groups, inf, SamplerConfig(balance_tolerance=0.2,
                                                                       feature_similarity_weight=0.0))
    with_sim = modify_discrete([1], [2, 3], groups, inf, SamplerConfig(balance_tolerance=0.2,
                                                                       feature_similarity_weight=0.5), sim)
    assert only_inf == [1, 2] and with_sim == [1, 3]


@st.composite
def neighborhoods(draw, max_n=12):
    n = draw(st.integers(1, max_n))
    m = draw(st.integers(0, max_n))
    ids = list(range(n + m))
    groups = {j: draw(st.sampled_from("ABC")) for j in ids}
    inf = {j: draw(st.floats(1e-4, 1.0)) for j in ids}
    return ids[:n], ids[n:], groups, inf


@settings(max_examples=200, deadline=None)
@given(neighborhoods(), st.floats(0, 1), st.floats(0, 1))
def test_discrete_never_worsens_ratio(nb, tol, w):
    init, cand, groups, inf = nb
    cfg = SamplerConfig(balance_tolerance=tol, feature_similarity_weight=w, neighbor_budget=len(init))
    sim = {j: (j * 0.37) % 1 for j in groups}
    out = modify_discrete(init, cand, groups, inf, cfg, sim)
    target = sorted({groups[j] for j in init + cand})
    assert balance_ratio(out, target, groups, inf) <= balance_ratio(init, target, groups, inf)
    assert set(out) <= set(init) | set(cand)
    assert out == modify_discrete(init, cand, groups, inf, cfg, sim)


def test_rescale_hand():
    groups = {1: "G1", 2: "G2", 3: "G2"}
    inf = {1: 2.0, 2: 1.0, 3: 3.0}
    base = {1: 0.3, 2: 0.4, 3: 0.5}
    out = rescale_weights([1, 2, 3], base, groups, inf)
    assert out == {1: 0.6, 2: 0.4, 3: 0.5}


def test_rescale_noop_cases():
    base = {1: 0.3, 2: 0.4}
    assert rescale_weights([1, 2], base, {1: "A", 2: "B"}, {1: 0.5, 2: 0.5}) == base
    assert rescale_weights([1, 2], base, {1: "A", 2: "A"}, {1: 0.1, 2: 0.9}) == base


@settings(max_examples=200)
@given(neighborhoods())
def test_rescale_equalizes_scaled_influence(nb):
    init, _, groups, inf = nb
    base = {j: 0.1 + (j % 7) / 10 for j in init}
    out = rescale_weights(init, base, groups, inf)
    scaled = {}
    for j in init:
        scaled[groups[j]] = scaled.get(groups[j], 0.0) + inf[j] * out[j] / base[j]
    vals = list(scaled.values())
    assert max(vals) - min(vals) <= 1e-9 * max(vals)
    assert all(v > 0 for v in out.values())


def test_density_hand_cases():
    s = {"x": 0.0, "y": 1.0, "c0": 0.0, "c5": 0.5}
    inf = {"x": 0.5, "y": 0.5}
    assert density("c0", [], s, inf, 1.0) == 0.0
    assert density("c0", ["x", "y"], s, inf, 1.0) == 0.5
    assert density("c5", ["x", "y"], s, inf, 1.0) == 0.5
    # zero range: every similarity is 1
    assert density("c0", ["x"], {"x": 2.0, "c0": 2.0}, inf, 0.0) == 0.5


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 50), st.integers(0, 10_000))
def test_density_matches_double_loop(n, seed):
    from fairstream.sampler import similarity_range

    rng = np.random.default_rng(seed)
    k = int(rng.integers(1, n + 1))
    ids = list(range(n))
    s = {j: float(rng.choice([0.0, 1.0, 2.5, rng.normal(5e4, 2e4)])) for j in ids}
    inf = {j: float(rng.uniform(0.01, 1)) for j in ids}
    init, cand = ids[:k], ids[k:]
    R = similarity_range(init + cand, s)
    for j in cand or init:
        assert density(j, init, s, inf, R) == brute_density(j, init, cand, s, inf)


def test_continuous_injects_spread_first():
    s = {1: 0.5, 2: 0.5, 3: 0.5, 4: 0.9}
    inf = {1: 0.5, 2: 0.5, 3: 0.5, 4: 0.5}
    out = modify_continuous([1, 2], [3, 4], s, inf, SamplerConfig(neighbor_budget=4))
    assert out == [1, 2, 4]


def test_continuous_trivial_cases():
    cfg = SamplerConfig(neighbor_budget=4)
    assert modify_continuous([1, 2], [], {1: 0.1, 2: 0.2}, {1: 1, 2: 1}, cfg) == [1, 2]
    s = {1: 0.3, 2: 0.3, 3: 0.3}
    assert modify_continuous([1, 2], [3], s, {1: 1, 2: 1, 3: 1}, cfg) == [1, 2]


@settings(max_examples=200, deadline=None)
@given(neighborhoods(), st.integers(1, 12))
def test_continuous_variance_and_budget(nb, budget):
    init, cand, _, inf = nb
    s = {j: float((j * 7919) % 101) for j in inf}
    cfg = SamplerConfig(neighbor_budget=budget)
    out = modify_continuous(init, cand, s, inf, cfg)
    assert set(init) <= set(out)
    assert len(out) - len(init) <= max(1, budget // 2)
    assert np.var([s[j] for j in out]) >= np.var([s[j] for j in init])


def test_fair_edge_balanced_counts_no_moves():
    groups = {1: "A", 2: "A", 3: "B", 4: "B", 5: "B"}
    base = {j: 0.5 for j in groups}
    chosen, w = ablation_fair_edge([1, 2, 3, 4], [5], groups, base, CFG0)
    assert chosen == [1, 2, 3, 4] and w == {1: 0.5, 2: 0.5, 3: 0.5, 4: 0.5}


def test_fair_adj_rescales_by_weight_sums():
    groups = {1: "G1", 2: "G2", 3: "G2"}
    base = {1: 0.5, 2: 0.4, 3: 0.6}
    chosen, w = ablation_fair_adj([1, 2, 3], [], groups, base, SamplerConfig(balance_tolerance=10))
    assert chosen == [1, 2, 3]
    assert w[1] == pytest.approx(1.0) and w[2] == 0.4 and w[3] == 0.6


def test_fair_edge_rescale_equalizes_counts():
    groups = {1: "A", 2: "B", 3: "B", 4: "B"}
    base = {1: 0.2, 2: 0.3, 3: 0.3, 4: 0.3}
    _, w = ablation_fair_edge([1, 2, 3, 4], [], groups, base, SamplerConfig(balance_tolerance=10))
    assert w[1] == pytest.approx(0.6) and w[2] == 0.3


def test_feature_similarity_range():
    x = np.random.default_rng(0).normal(size=(6, 4))
    sim = feature_similarity_matrix(x)
    assert sim.shape == (6, 6)
    assert np.all((sim >= 0) & (sim <= 1))
    np.testing.assert_allclose(np.diag(sim), 1.0)
    np.testing.assert_allclose(sim, sim.T)


def _setup(n=25, seed=3):
    rng = np.random.default_rng(seed)
    pg = expand_multihop(random_tree(rng, n))
    compute_adjacency(pg)
    flows = rng.lognormal(0, 1, size=(n, 5))
    inf = build_table(pg, flows, "averaged").time_averaged
    s = {j: float(rng.uniform(0, 1e5)) for j in range(n)}
    groups = {j: "low" if v < 5e4 else "high" for j, v in s.items()}
    return pg, inf, groups, s


@pytest.mark.parametrize("mode", ["random", "fair-discrete", "fair-continuous", "fair-edge-ablation",
                                  "fair-adj-ablation"])
def test_all_modes_pure_and_positive(mode):
    pg, inf, groups, s = _setup()
    cfg = SamplerConfig(mode=mode, neighbor_budget=3, seed=7)
    a = sample_neighborhoods(pg, cfg, inf, groups, s, epoch=2)
    b = sample_neighborhoods(pg, cfg, inf, groups, s, epoch=2)
    assert {i: x.to_dict() for i, x in a.items()} == {i: x.to_dict() for i, x in b.items()}
    for i, smp in a.items():
        assert all(w > 0 for w in smp.weights)
        assert set(smp.neighbors) <= set(pg.in_neighbors(i))
        if mode == "fair-discrete":
            nb = set(pg.in_neighbors(i))
            present = {groups[j] for j in nb}
            if len(present) > 1 and smp.neighbors:
                assert set(smp.groups_present) <= present


def test_discrete_mode_rescale_balances_per_node():
    pg, inf, groups, s = _setup(40, 5)
    cfg = SamplerConfig(mode="fair-discrete", neighbor_budget=4, seed=1)
    for i, smp in sample_neighborhoods(pg, cfg, inf, groups, s).items():
        if len(set(groups[j] for j in smp.neighbors)) < 2:
            continue
        base = {j: pg.adjacency[pg.edge_index(j, i)] for j in smp.neighbors}
        scaled = {}
        for j, w, f in zip(smp.neighbors, smp.weights, smp.influence):
            scaled[groups[j]] = scaled.get(groups[j], 0.0) + f * w / base[j]
        vals = list(scaled.values())
        assert max(vals) == pytest.approx(min(vals), rel=1e-9)


def test_needs_adjacency_and_labels():
    g = BasinGraph((0, 1), ((1, 0, 1.0),), (0,))
    pg = expand_multihop(g)
    with pytest.raises(ValueError):
        sample_node(pg, 0, SamplerConfig(), np.array([0.5]))
    compute_adjacency(pg)
    with pytest.raises(ValueError):
        sample_node(pg, 0, SamplerConfig(mode="fair-discrete"), np.array([0.5]))
    with pytest.raises(ValueError):
        SamplerConfig(mode="nope")
    with pytest.raises(ValueError):
        SamplerConfig(neighbor_budget=0)


def test_write_neighborhoods(tmp_path):
    import json

    pg, inf, groups, s = _setup()
    cfg = SamplerConfig(mode="fair-discrete", neighbor_budget=3)
    smp = sample_neighborhoods(pg, cfg, inf, groups, s)
    write_neighborhoods(tmp_path / "n.json", smp, 0, cfg)
    doc = json.loads((tmp_path / "n.json").read_text())
    assert doc["schema_version"] == 1 and len(doc["neighborhoods"]) == 25


def test_group_sums_and_ratio():
    groups = {1: "A", 2: "B"}
    inf = {1: 0.25, 2: 0.5}
    assert group_sums([1, 2], groups, inf) == {"A": 0.25, "B": 0.5}
    assert balance_ratio([1, 2], ["A", "B"], groups, inf) == 2.0
    assert balance_ratio([2], ["A", "B"], groups, inf) == math.inf
    assert balance_ratio([2], ["B"], groups, inf) == 1.0

import math

import networkx as nx
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fairstream.graph import BasinGraph
from fairstream.synth import (
    BasinSpec,
    accumulate_flow,
    assign_sensitive,
    generate_basin,
    generate_topology,
    mask_observations,
    mix_step,
    simulate_flow_and_weather,
    simulate_temperature,
)


def test_two_segments_one_edge():
    g = generate_topology(BasinSpec(segment_count=2, seed=7))
    assert len(g.direct_edges) == 1


def test_topology_deterministic():
    spec = BasinSpec(segment_count=40, seed=11)
    assert generate_topology(spec).edge_set() == generate_topology(spec).edge_set()


def test_fifty_segments_acyclic_with_networkx():
    g = generate_topology(BasinSpec(segment_count=50, tree_branching=2, seed=1))
    assert len(g.direct_edges) == 49
    dg = nx.DiGraph([(u, d) for u, d, _ in g.direct_edges])
    assert nx.is_directed_acyclic_graph(dg)
    # every non-outlet segment drains to an outlet
    for s in g.segments:
        if s not in g.outlets:
            assert any(nx.has_path(dg, s, o) for o in g.outlets)


@pytest.mark.parametrize("field,value", [("segment_count", 1), ("time_steps", 1), ("observation_density", 1.5),
                                         ("sensitive_clustering", -0.1), ("streamflow_observation_density", 2.0)])
def test_spec_validation(field, value):
    with pytest.raises(ValueError):
        BasinSpec(**{field: value})


def test_distances_in_range():
    g = generate_topology(BasinSpec(segment_count=30, seed=2, distance_range=(3.0, 4.0)))
    assert all(3.0 <= d <= 4.0 for _, _, d in g.direct_edges)


def test_leaf_flow_equals_runoff():
    g = BasinGraph((0, 1, 2), ((1, 0, 1.0), (2, 0, 2.0)), (0,))
    runoff = np.array([[1.0, 2.0], [0.5, 0.25], [3.0, 1.0]])
    flow = accumulate_flow(g, runoff)
    np.testing.assert_array_equal(flow[1:], runoff[1:])
    # confluence: own runoff plus both leaves, by hand
    np.testing.assert_array_equal(flow[0], [1.0 + 0.5 + 3.0, 2.0 + 0.25 + 1.0])


def test_flow_floor_and_monotone_downstream():
    spec = BasinSpec(segment_count=30, time_steps=100, seed=5)
    g = generate_topology(spec)
    out = simulate_flow_and_weather(g, spec)
    assert np.all(out["flow_true"] >= spec.min_flow)
    assert np.all(out["runoff"] >= spec.min_flow)
    for u, d, _ in g.direct_edges:
        assert np.all(out["flow_true"][d] >= out["flow_true"][u])
    assert out["features"].shape == (30, 100, 5)


def test_mix_step_hand_value():
    assert mix_step(10.0, 3.0, [20.0], [1.0]) == pytest.approx(12.5, abs=0)


def _quiet(spec):
    return BasinSpec(**{**spec.to_dict(), "noise_scale": 0.0, "relaxation": 0.0})


def test_simulate_temperature_hand_case():
    # 1 -> 0; zero noise and relaxation reproduce the mixing relation exactly
    g = BasinGraph((0, 1), ((1, 0, 1.0),), (0,))
    spec = _quiet(BasinSpec(segment_count=2, time_steps=2))
    flow = np.array([[3.0, 3.0], [1.0, 1.0]])
    air = np.array([[0.0, 0.0], [0.0, 0.0]])
    y = simulate_temperature(g, flow, air, spec, initial=np.array([10.0, 20.0]))
    # day 0: the leaf keeps 20 (no upstream), the outlet mixes its 10 with 20
    assert y[1, 0] == 20.0
    assert y[0, 0] == pytest.approx(12.5, abs=1e-15)


def test_constant_inputs_fixed_point():
    spec = _quiet(BasinSpec(segment_count=8, time_steps=20, seed=3))
    g = generate_topology(spec)
    flow = np.random.default_rng(0).uniform(0.5, 3.0, size=(8, 20))
    y = simulate_temperature(g, flow, np.full((8, 20), 7.0), spec, initial=np.full(8, 7.0))
    np.testing.assert_allclose(y, 7.0, rtol=0, atol=1e-12)


def test_temperature_rejects_nonpositive_flow():
    spec = BasinSpec(segment_count=2, time_steps=2)
    g = BasinGraph((0, 1), ((1, 0, 1.0),), (0,))
    with pytest.raises(ValueError):
        simulate_temperature(g, np.array([[1.0, 0.0], [1.0, 1.0]]), np.zeros((2, 2)), spec)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 25), st.integers(2, 15), st.integers(0, 10_000))
def test_convexity_property(n, T, seed):
    spec = _quiet(BasinSpec(segment_count=n, time_steps=T, seed=seed))
    g = generate_topology(spec)
    rng = np.random.default_rng(seed)
    flow = rng.uniform(0.01, 5.0, size=(n, T))
    init = rng.uniform(0, 25, size=n)
    y = simulate_temperature(g, flow, rng.uniform(0, 25, size=(n, T)), spec, initial=init)
    up = g.upstream()
    for t in range(T):
        for i in range(n):
            inputs = [init[i] if t == 0 else y[i, t - 1]] + [y[j, t] for j, _ in up[i]]
            tol = 4 * np.finfo(float).eps * max(abs(v) for v in inputs)
            assert min(inputs) - tol <= y[i, t] <= max(inputs) + tol


def test_sensitive_independent_when_unclustered():
    spec = BasinSpec(segment_count=500, sensitive_clustering=0.0, seed=9)
    g = generate_topology(spec)
    s = assign_sensitive(g, spec)
    a = np.array([s[u] for u, d, _ in g.direct_edges])
    b = np.array([s[d] for u, d, _ in g.direct_edges])
    assert abs(np.corrcoef(a, b)[0, 1]) < 0.1


def test_sensitive_full_clustering_is_neighbor_mean():
    # a wide clip range keeps the affine map exact
    spec = BasinSpec(segment_count=60, sensitive_clustering=1.0, seed=4, sensitive_range=(-1e9, 1e9))
    g = generate_topology(spec)
    s = assign_sensitive(g, spec)
    nbrs = {k: [] for k in g.segments}
    for u, d, _ in g.direct_edges:
        nbrs[u].append(d)
        nbrs[d].append(u)
    for k in sorted(g.segments):
        earlier = [m for m in nbrs[k] if m < k]
        if earlier:
            assert s[k] == pytest.approx(np.mean([s[m] for m in earlier]), rel=1e-12)


def test_sensitive_clustered_correlation_positive():
    spec = BasinSpec(segment_count=500, sensitive_clustering=0.8, seed=9)
    g = generate_topology(spec)
    s = assign_sensitive(g, spec)
    a = np.array([s[u] for u, d, _ in g.direct_edges])
    b = np.array([s[d] for u, d, _ in g.direct_edges])
    assert np.corrcoef(a, b)[0, 1] > 0.5
    np.testing.assert_array_equal(s, assign_sensitive(g, spec))


@pytest.mark.parametrize("density,expect", [(1.0, True), (0.0, False)])
def test_mask_extremes(density, expect):
    vals, mask = mask_observations(np.ones((5, 7)), density, 3)
    assert np.all(mask == expect)
    assert np.isnan(vals).all() != expect


def test_mask_binomial_concentration():
    _, mask = mask_observations(np.zeros(10_000), 0.3, [1, 2])
    # 0.03 is ~6.5 binomial standard deviations
    assert 0.27 <= mask.mean() <= 0.33


def test_mask_rejects_bad_density():
    with pytest.raises(ValueError):
        mask_observations(np.zeros(3), 1.2, 0)


def test_basin_views_and_determinism():
    spec = BasinSpec(segment_count=15, time_steps=60, seed=21, low_group_threshold=70_000,
                     low_group_density_factor=0.2, low_group_feature_noise=1.0)
    a, b = generate_basin(spec), generate_basin(spec)
    np.testing.assert_array_equal(a.ground_truth_temperature, b.ground_truth_temperature)
    np.testing.assert_array_equal(a.features, b.features)
    # observed view is a subset of ground truth
    obs = a.temp_observed
    assert np.array_equal(np.isfinite(obs), a.temp_mask)
    np.testing.assert_array_equal(obs[a.temp_mask], a.ground_truth_temperature[a.temp_mask])
    ser = a.series(3)
    assert ser.features.shape == (60, 5) and np.all(ser.flow > 0)


def test_low_group_gets_fewer_observations():
    spec = BasinSpec(segment_count=200, time_steps=200, seed=3, low_group_threshold=60_000,
                     low_group_density_factor=0.25)
    b = generate_basin(spec)
    low = b.sensitive < 60_000
    assert low.any() and (~low).any()
    assert b.temp_mask[low].mean() < 0.5 * b.temp_mask[~low].mean()


def test_sensitive_in_range():
    spec = BasinSpec(segment_count=300, seed=1)
    s = assign_sensitive(generate_topology(spec), spec)
    lo, hi = spec.sensitive_range
    assert s.min() >= lo and s.max() <= hi
    assert math.isclose(float(np.median(s)), spec.sensitive_mean, rel_tol=0.3)

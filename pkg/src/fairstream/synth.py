"""Synthetic river basins: topology, flows, weather drivers, stream temperature, masks.

Every random draw comes from a PCG64 stream seeded by ``(spec.seed, stream id)``,
so a basin is a pure function of its spec.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .graph import BasinGraph

FEATURE_NAMES = ("doy_sin", "doy_cos", "air_temp", "solar", "precip")

# rng stream ids
_TOPOLOGY, _WEATHER, _SENSITIVE, _TEMP_NOISE, _TEMP_MASK, _FLOW_MASK = range(6)

YEAR = 365.25


@dataclass(frozen=True)
class BasinSpec:
    segment_count: int = 50
    tree_branching: float = 1.5
    time_steps: int = 730
    observation_density: float = 0.3
    streamflow_observation_density: float = 0.4
    sensitive_clustering: float = 0.8
    noise_scale: float = 0.5
    seed: int = 0
    outlet_count: int = 1
    distance_range: tuple[float, float] = (1.0, 20.0)
    min_flow: float = 1e-3
    relaxation: float = 0.1
    solar_heating: float = 4.0
    flow_sim_error: float = 0.15
    sensitive_mean: float = 75_000.0
    sensitive_std: float = 25_000.0
    sensitive_range: tuple[float, float] = (5_000.0, 250_000.0)
    # segments with s below the threshold get density * factor
    low_group_threshold: float | None = None
    low_group_density_factor: float = 1.0
    # how strongly riparian shade follows the sensitive attribute (0 = independent)
    shade_coupling: float = 0.0
    # extra noise (sd, in feature units) on the weather inputs of low-group segments
    low_group_feature_noise: float = 0.0

    def __post_init__(self):
        if self.segment_count < 2:
            raise ValueError(f"segment_count must be >= 2, got {self.segment_count}")
        if self.time_steps < 2:
            raise ValueError(f"time_steps must be >= 2, got {self.time_steps}")
        if not 1 <= self.outlet_count < self.segment_count:
            raise ValueError("outlet_count must be in [1, segment_count)")
        if self.tree_branching < 0:
            raise ValueError("tree_branching must be >= 0")
        for name in ("observation_density", "streamflow_observation_density", "sensitive_clustering",
                     "low_group_density_factor", "shade_coupling"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.low_group_feature_noise < 0:
            raise ValueError("low_group_feature_noise must be >= 0")
        if self.noise_scale < 0 or self.relaxation < 0 or self.relaxation > 1:
            raise ValueError("noise_scale must be >= 0 and relaxation in [0, 1]")
        lo, hi = self.distance_range
        if not 0 < lo <= hi:
            raise ValueError(f"bad distance_range {self.distance_range}")
        if not self.min_flow > 0:
            raise ValueError("min_flow must be positive")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    def rng(self, stream: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, stream])

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "BasinSpec":
        data = dict(data)
        for key in ("distance_range", "sensitive_range"):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**data)


@dataclass
class SegmentSeries:
    features: np.ndarray  # (T, F)
    flow: np.ndarray  # gap-filled (T,)
    flow_observed: np.ndarray  # bool (T,)
    temp: np.ndarray  # nan where unobserved
    temp_observed: np.ndarray  # bool (T,)


@dataclass
class SyntheticBasin:
    """All arrays are indexed (segment position, day); segment ids equal positions."""

    spec: BasinSpec
    graph: BasinGraph
    features: np.ndarray  # (N, T, F)
    flow_true: np.ndarray  # (N, T)
    flow_simulated: np.ndarray  # (N, T)
    flow_observed_mask: np.ndarray  # (N, T) bool
    ground_truth_temperature: np.ndarray  # (N, T)
    temp_mask: np.ndarray  # (N, T) bool
    sensitive: np.ndarray  # (N,)
    feature_names: tuple[str, ...] = field(default=FEATURE_NAMES)

    @property
    def n_segments(self) -> int:
        return self.features.shape[0]

    @property
    def n_days(self) -> int:
        return self.features.shape[1]

    @property
    def flow_observed(self) -> np.ndarray:
        return np.where(self.flow_observed_mask, self.flow_true, np.nan)

    @property
    def temp_observed(self) -> np.ndarray:
        return np.where(self.temp_mask, self.ground_truth_temperature, np.nan)

    def series(self, segment: int) -> SegmentSeries:
        from .influence import fill_flow

        filled = fill_flow(self.flow_observed, self.flow_observed_mask, self.flow_simulated)
        return SegmentSeries(
            features=self.features[segment],
            flow=filled.flow[segment],
            flow_observed=self.flow_observed_mask[segment],
            temp=self.temp_observed[segment],
            temp_observed=self.temp_mask[segment],
        )

    def sensitive_map(self) -> dict[int, float]:
        return {s: float(self.sensitive[k]) for k, s in enumerate(self.graph.segments)}


def generate_topology(spec: BasinSpec) -> BasinGraph:
    """Random downstream-pointing tree grown from the outlets.

    Each expanded segment receives Poisson(tree_branching) upstream children;
    the growth never stalls before ``segment_count`` segments exist.
    """
    rng = spec.rng(_TOPOLOGY)
    n = spec.segment_count
    lo, hi = spec.distance_range
    frontier = list(range(spec.outlet_count))
    next_id = spec.outlet_count
    edges = []
    while next_id < n:
        node = frontier.pop(int(rng.integers(len(frontier))))
        k = int(rng.poisson(spec.tree_branching))
        if not frontier:
            k = max(k, 1)
        k = min(k, n - next_id)
        for _ in range(k):
            dist = float(rng.uniform(lo, hi))
            edges.append((next_id, node, dist))
            frontier.append(next_id)
            next_id += 1
    return BasinGraph(tuple(range(n)), tuple(edges), tuple(range(spec.outlet_count)))


def _ar1(rng: np.random.Generator, shape: tuple[int, ...], rho: float) -> np.ndarray:
    """Unit-variance AR(1) along the last axis."""
    eps = rng.standard_normal(shape)
    out = np.empty(shape)
    out[..., 0] = eps[..., 0]
    scale = math.sqrt(1.0 - rho * rho)
    for t in range(1, shape[-1]):
        out[..., t] = rho * out[..., t - 1] + scale * eps[..., t]
    return out


def accumulate_flow(graph: BasinGraph, runoff: np.ndarray) -> np.ndarray:
    """Streamflow = local runoff + the sum of direct upstream streamflows."""
    up = graph.upstream()
    flow = np.array(runoff, dtype=float, copy=True)
    for seg in graph.topological_order():
        for u, _ in up[seg]:
            flow[seg] += flow[u]
    return flow


def simulate_flow_and_weather(
    graph: BasinGraph, spec: BasinSpec, sensitive: np.ndarray | None = None
) -> dict[str, np.ndarray]:
    """Weather drivers, local runoff, accumulated true flow and a simulated-flow estimate.

    ``sensitive`` (optional) lets riparian shade follow the sensitive attribute
    with strength ``spec.shade_coupling``.
    """
    rng = spec.rng(_WEATHER)
    n, T = graph.n_segments, spec.time_steps
    t = np.arange(T, dtype=float)
    season = np.sin(2 * np.pi * (t - 105.0) / YEAR)
    wet_season = np.cos(2 * np.pi * (t - 80.0) / YEAR)

    air_offset = rng.normal(0.0, 1.5, size=(n, 1))
    air_regional = 11.0 + 11.0 * season + 2.5 * _ar1(rng, (T,), 0.8)
    air = air_regional + air_offset + spec.noise_scale * rng.standard_normal((n, T))

    shade_z = rng.standard_normal(n)
    if sensitive is not None and spec.shade_coupling > 0:
        sz = (np.asarray(sensitive, dtype=float) - spec.sensitive_mean) / spec.sensitive_std
        c = spec.shade_coupling
        shade_z = c * sz + math.sqrt(1.0 - c * c) * shade_z
    shade = np.clip(0.4 + 0.15 * shade_z, 0.05, 0.9)[:, None]
    cloud = 0.15 * _ar1(rng, (T,), 0.5)
    solar_regional = np.clip(190.0 + 110.0 * season, 20.0, None) * (1.0 - np.clip(cloud, -0.5, 0.8))
    solar = solar_regional * (1.0 - shade) + 5.0 * rng.standard_normal((n, T))

    wet = rng.random(T) < 0.3
    amount = np.where(wet, rng.exponential(6.0, size=T), 0.0)
    precip = amount * rng.lognormal(0.0, 0.3, size=(n, T))

    base = rng.lognormal(0.0, 0.8, size=(n, 1))
    # recession-smoothed precipitation drives storm runoff
    storm = np.empty((n, T))
    storm[:, 0] = precip[:, 0]
    for k in range(1, T):
        storm[:, k] = 0.7 * storm[:, k - 1] + precip[:, k]
    runoff = base * (0.6 + 0.35 * wet_season + 0.03 * storm + 0.05 * rng.standard_normal((n, T)))
    runoff = np.maximum(runoff, spec.min_flow)
    flow_true = accumulate_flow(graph, runoff)

    sim_error = spec.flow_sim_error * _ar1(rng, (n, T), 0.9)
    flow_sim = np.maximum(flow_true * np.exp(sim_error), spec.min_flow)

    air_in, solar_in = air, solar
    if sensitive is not None and spec.low_group_threshold is not None and spec.low_group_feature_noise > 0:
        poor = (np.asarray(sensitive) < spec.low_group_threshold)[:, None]
        sd = spec.low_group_feature_noise
        air_in = air + np.where(poor, sd * rng.standard_normal((n, T)), 0.0)
        solar_in = solar + np.where(poor, 10.0 * sd * rng.standard_normal((n, T)), 0.0)

    doy = 2 * np.pi * t / YEAR
    features = np.stack(
        [
            np.broadcast_to(np.sin(doy), (n, T)),
            np.broadcast_to(np.cos(doy), (n, T)),
            air_in,
            solar_in,
            precip,
        ],
        axis=-1,
    )
    return {
        "features": np.ascontiguousarray(features),
        "runoff": runoff,
        "flow_true": flow_true,
        "flow_simulated": flow_sim,
        "air": air,
        "solar": solar,
    }


def mix_step(prev_own: float, own_flow: float, upstream_temps, upstream_flows) -> float:
    """One heat-mixing update: flow-weighted mean of own previous and upstream current temps."""
    num = prev_own * own_flow
    den = own_flow
    for y, q in zip(upstream_temps, upstream_flows):
        num += y * q
        den += q
    return num / den


def simulate_temperature(
    graph: BasinGraph,
    flow: np.ndarray,
    air: np.ndarray,
    spec: BasinSpec,
    solar: np.ndarray | None = None,
    initial: np.ndarray | None = None,
) -> np.ndarray:
    """Evolve stream temperature by flow-weighted heat mixing, then relax toward equilibrium.

    The equilibrium is air temperature plus a solar heating term. Upstream
    temperatures enter at the same day, so segments are updated upstream-first.
    """
    flow = np.asarray(flow, dtype=float)
    if np.any(~(flow > 0)):
        raise ValueError("all flows must be strictly positive")
    n, T = flow.shape
    noise = spec.rng(_TEMP_NOISE).standard_normal((n, T)) * spec.noise_scale
    equilibrium = np.asarray(air, dtype=float)
    if solar is not None and spec.solar_heating:
        equilibrium = equilibrium + spec.solar_heating * np.asarray(solar) / 100.0

    # process by height so each level only depends on finished upstream levels
    up = graph.upstream()
    height = {}
    for seg in graph.topological_order():
        height[seg] = 1 + max((height[u] for u, _ in up[seg]), default=-1)
    levels = [np.array(sorted(s for s in height if height[s] == h), dtype=int) for h in range(max(height.values()) + 1)]
    parent_matrix = np.zeros((n, n))
    for u, d, _ in graph.direct_edges:
        parent_matrix[d, u] = 1.0

    y = np.empty((n, T))
    y0 = equilibrium[:, 0] if initial is None else np.asarray(initial, dtype=float)
    prev = y0
    for t in range(T):
        q = flow[:, t]
        cur = np.zeros(n)
        for h, idx in enumerate(levels):
            num = prev[idx] * q[idx]
            den = q[idx]
            if h > 0:
                sub = parent_matrix[idx]
                num = num + sub @ (cur * q)
                den = den + sub @ q
            mix = num / den
            cur[idx] = mix + spec.relaxation * (equilibrium[idx, t] - mix) + noise[idx, t]
        y[:, t] = cur
        prev = cur
    return y


def assign_sensitive(graph: BasinGraph, spec: BasinSpec) -> np.ndarray:
    """Spatially autocorrelated sensitive values, one-pass autoregression in id order.

    Each segment's latent value is ``c * mean(already assigned neighbours) +
    sqrt(1 - c^2) * noise`` with ``c = sensitive_clustering``.
    """
    rng = spec.rng(_SENSITIVE)
    n = graph.n_segments
    c = spec.sensitive_clustering
    noise = rng.standard_normal(n)
    nbrs: dict[int, list[int]] = {s: [] for s in graph.segments}
    for u, d, _ in graph.direct_edges:
        nbrs[u].append(d)
        nbrs[d].append(u)
    z = np.empty(n)
    done = np.zeros(n, dtype=bool)
    for seg in sorted(graph.segments):
        assigned = [z[k] for k in nbrs[seg] if done[k]]
        if assigned:
            z[seg] = c * float(np.mean(assigned)) + math.sqrt(max(0.0, 1.0 - c * c)) * noise[seg]
        else:
            z[seg] = noise[seg]
        done[seg] = True
    lo, hi = spec.sensitive_range
    return np.clip(spec.sensitive_mean + spec.sensitive_std * z, lo, hi)


def mask_observations(values: np.ndarray, density, seed) -> tuple[np.ndarray, np.ndarray]:
    """Bernoulli(density) observation mask per cell.

    ``density`` may be a scalar or broadcast against ``values`` (e.g. a per-segment
    column). ``seed`` is anything accepted by ``numpy.random.default_rng``.
    Returns (values with NaN at unobserved cells, mask).
    """
    values = np.asarray(values, dtype=float)
    density = np.broadcast_to(np.asarray(density, dtype=float), values.shape)
    if np.any((density < 0) | (density > 1)):
        raise ValueError("density must lie in [0, 1]")
    mask = np.random.default_rng(seed).random(values.shape) < density
    return np.where(mask, values, np.nan), mask


def generate_basin(spec: BasinSpec) -> SyntheticBasin:
    graph = generate_topology(spec)
    sensitive = assign_sensitive(graph, spec)
    drivers = simulate_flow_and_weather(graph, spec, sensitive)
    temp = simulate_temperature(graph, drivers["flow_true"], drivers["air"], spec, solar=drivers["solar"])

    density = np.full((graph.n_segments, 1), spec.observation_density)
    if spec.low_group_threshold is not None:
        low = sensitive < spec.low_group_threshold
        density[low] *= spec.low_group_density_factor
    _, temp_mask = mask_observations(temp, density, [spec.seed, _TEMP_MASK])
    _, flow_mask = mask_observations(drivers["flow_true"], spec.streamflow_observation_density, [spec.seed, _FLOW_MASK])
    return SyntheticBasin(
        spec=spec,
        graph=graph,
        features=drivers["features"],
        flow_true=drivers["flow_true"],
        flow_simulated=drivers["flow_simulated"],
        flow_observed_mask=flow_mask,
        ground_truth_temperature=temp,
        temp_mask=temp_mask,
        sensitive=sensitive,
    )

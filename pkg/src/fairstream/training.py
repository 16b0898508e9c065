"""Time splits, training loop with per-epoch resampling, evaluation and multi-seed runs."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import metrics
from .graph import GroupPartition, PredictionGraph, compute_adjacency, discretize, expand_multihop
from .influence import InfluenceTable, build_table, fill_flow
from .model import (
    AdamConfig,
    ModelConfig,
    ModelState,
    NumericalError,
    adam_step,
    backward,
    build_layers,
    forward,
    loss,
)
from .sampler import SamplerConfig, feature_similarity_matrix, sample_neighborhoods
from .synth import SyntheticBasin

log = logging.getLogger(__name__)

DEFAULT_SEEDS = (1, 5, 85, 500, 1000)
EVAL_EPOCH = 1_000_003  # rng stream reserved for evaluation neighbourhoods


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_nodes: int | None = None  # None = every segment in one batch
    train_fraction: float = 2.0 / 3.0
    validation_fraction: float = 1.0 / 3.0
    seeds: tuple[int, ...] = DEFAULT_SEEDS
    learning_rate: float = 0.001
    patience: int = 10
    sequence_length: int = 365
    warmup: int = 30
    hop_limit: int | None = None
    group_pooling: str = "observations"

    def __post_init__(self):
        if self.epochs < 1 or self.patience < 1 or self.sequence_length < 1 or self.warmup < 0:
            raise ValueError("epochs, patience, sequence_length must be >= 1 and warmup >= 0")
        if not 0 < self.train_fraction < 1:
            raise ValueError(f"train_fraction must lie in (0, 1), got {self.train_fraction}")
        if not 0 < self.validation_fraction < 1:
            raise ValueError("validation_fraction must lie in (0, 1)")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if self.batch_nodes is not None and self.batch_nodes < 1:
            raise ValueError("batch_nodes must be >= 1")
        if self.group_pooling not in ("observations", "segments"):
            raise ValueError(f"unknown group_pooling {self.group_pooling!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        if "seeds" in data:
            data["seeds"] = tuple(int(s) for s in data["seeds"])
        return cls(**data)


@dataclass(frozen=True)
class Split:
    train: range
    validation: range
    test: range


def split(n_days: int, train_fraction: float = 2.0 / 3.0, validation_fraction: float = 1.0 / 3.0) -> Split:
    """Contiguous train / validation / test day ranges (0-based, end-exclusive).

    The test period is the final ``1 - train_fraction`` of days; validation is the
    last ``validation_fraction`` of the remaining training days.
    """
    if n_days < 3:
        raise ValueError(f"need at least 3 days to split, got {n_days}")
    if not 0 < train_fraction < 1:
        raise ValueError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    n_fit = int(round(n_days * train_fraction))
    n_val = int(round(n_fit * validation_fraction))
    if n_fit >= n_days or n_val < 1 or n_fit - n_val < 1:
        raise ValueError(f"degenerate split for {n_days} days at train_fraction={train_fraction}")
    return Split(range(0, n_fit - n_val), range(n_fit - n_val, n_fit), range(n_fit, n_days))


@dataclass
class Prepared:
    """Everything derived once per basin and shared by every run on it."""

    basin: SyntheticBasin
    pgraph: PredictionGraph
    influence: InfluenceTable
    partition: GroupPartition
    days: Split
    x: np.ndarray  # standardized features (N, T, F)
    y: np.ndarray  # standardized temperature, 0 where unobserved
    mask: np.ndarray  # observed temperature cells
    y_mean: float
    y_std: float
    feature_mean: np.ndarray
    feature_std: np.ndarray
    feature_similarity: np.ndarray

    @property
    def segments(self) -> tuple[int, ...]:
        return self.pgraph.segments

    def groups(self) -> dict[int, str]:
        return dict(self.partition.membership)

    def sensitive_map(self) -> dict[int, float]:
        return self.basin.sensitive_map()

    def edge_influence(self, sampler: SamplerConfig) -> np.ndarray:
        if sampler.influence_mode == "window":
            return self.influence.window_mean(self.days.train.start, self.days.train.stop)
        return self.influence.time_averaged


def prepare(
    basin: SyntheticBasin,
    thresholds: Sequence[float],
    labels: Sequence[str] | None = None,
    train: TrainConfig = TrainConfig(),
    influence_mode: str = "averaged",
) -> Prepared:
    if tuple(basin.graph.segments) != tuple(range(basin.n_segments)):
        raise ValueError("segment ids must be 0..N-1 in order")
    days = split(basin.n_days, train.train_fraction, train.validation_fraction)
    pgraph = expand_multihop(basin.graph, train.hop_limit)
    compute_adjacency(pgraph)
    flows = fill_flow(basin.flow_observed, basin.flow_observed_mask, basin.flow_simulated)
    table = build_table(pgraph, flows.flow, "per-step" if influence_mode == "window" else "averaged")
    partition = discretize(basin.sensitive_map(), thresholds, labels)

    fit = slice(days.train.start, days.train.stop)
    feats = basin.features
    f_mean = feats[:, fit].mean(axis=(0, 1))
    f_std = feats[:, fit].std(axis=(0, 1))
    f_std = np.where(f_std > 0, f_std, 1.0)
    x = (feats - f_mean) / f_std

    mask = basin.temp_mask.copy()
    obs = basin.temp_observed
    train_obs = obs[:, fit][mask[:, fit]]
    if train_obs.size == 0:
        raise ValueError("no temperature observations in the training period")
    y_mean = float(train_obs.mean())
    y_std = float(train_obs.std()) or 1.0
    y = np.where(mask, (np.where(mask, obs, 0.0) - y_mean) / y_std, 0.0)
    sim = feature_similarity_matrix(x[:, fit].mean(axis=1))
    return Prepared(basin, pgraph, table, partition, days, x, y, mask, y_mean, y_std, f_mean, f_std, sim)


def neighborhoods(prep: Prepared, sampler: SamplerConfig, epoch: int) -> dict[int, tuple[list[int], list[float]]]:
    samples = sample_neighborhoods(
        prep.pgraph,
        sampler,
        prep.edge_influence(sampler),
        groups=prep.groups(),
        sensitive=prep.sensitive_map(),
        feature_similarity=prep.feature_similarity,
        epoch=epoch,
    )
    return {i: (s.neighbors, s.weights) for i, s in samples.items()}


def _chunks(days: range, length: int) -> list[tuple[int, int]]:
    return [(a, min(a + length, days.stop)) for a in range(days.start, days.stop, length)]


def predict_days(
    state: ModelState,
    config: ModelConfig,
    prep: Prepared,
    nbhd,
    days: range,
    sequence_length: int,
    warmup: int,
) -> np.ndarray:
    """Predictions in degrees for every segment over ``days`` (N, len(days))."""
    ctx, layers = build_layers(prep.segments, nbhd, config.gnn_layers)
    out = np.empty((len(prep.segments), len(days)))
    for a, b in _chunks(days, sequence_length):
        w0 = max(0, a - warmup)
        yhat, _ = forward(state.params, config, prep.x[ctx, w0:b], layers)
        out[:, a - days.start : b - days.start] = yhat[:, a - w0 :]
    return out * prep.y_std + prep.y_mean


def _observed_degrees(prep: Prepared, days: range) -> tuple[np.ndarray, np.ndarray]:
    sl = slice(days.start, days.stop)
    return prep.basin.temp_observed[:, sl], prep.mask[:, sl]


@dataclass
class TrainResult:
    state: ModelState
    history: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_validation_rmse: float = math.inf
    stopped: str = ""


def train(
    prep: Prepared,
    model_config: ModelConfig,
    sampler: SamplerConfig,
    config: TrainConfig,
    seed: int,
    initial_state: ModelState | None = None,
) -> TrainResult:
    """Mini-batch Adam on the training period; keeps the best-validation parameters.

    Each epoch resamples neighbourhoods, then visits training chunks (with a
    warm-up prefix excluded from the loss) crossed with node batches, in a
    seeded shuffled order.
    """
    sampler = replace(sampler, seed=seed)
    state = initial_state.copy() if initial_state is not None else ModelState.fresh(model_config, seed)
    opt = AdamConfig(lr=config.learning_rate)
    eval_nb = neighborhoods(prep, sampler, EVAL_EPOCH)
    val_obs, val_mask = _observed_degrees(prep, prep.days.validation)
    if not val_mask.any():
        raise ValueError("no observations in the validation period")

    targets = [i for i in prep.segments if prep.mask[i, prep.days.train.start : prep.days.train.stop].any()]
    chunks = _chunks(prep.days.train, config.sequence_length)
    result = TrainResult(state=state.copy())
    since_best = 0
    for epoch in range(config.epochs):
        nb = neighborhoods(prep, sampler, epoch)
        rng = np.random.default_rng([seed, 104729, epoch])
        order = [targets[k] for k in rng.permutation(len(targets))]
        size = config.batch_nodes or len(order)
        batches = [order[k : k + size] for k in range(0, len(order), size)]
        plans = [build_layers(b, nb, model_config.gnn_layers) for b in batches]
        steps = [(c, p) for c in rng.permutation(len(chunks)) for p in range(len(plans))]
        total, seen = 0.0, 0
        for c, p in steps:
            a, b = chunks[c]
            w0 = max(0, a - config.warmup)
            ctx, layers = plans[p]
            rows = batches[p]
            sel = np.array(sorted(rows))
            mask = np.zeros((len(sel), b - w0), dtype=bool)
            mask[:, a - w0 :] = prep.mask[sel, a:b]
            if not mask.any():
                continue
            yhat, cache = forward(state.params, model_config, prep.x[ctx, w0:b], layers)
            value, dy = loss(yhat, prep.y[sel, w0:b], mask)
            if not math.isfinite(value):
                result.stopped = f"non-finite loss at epoch {epoch}"
                raise NumericalError(result.stopped)
            state = adam_step(state, backward(state.params, model_config, cache, dy), opt)
            total += value * mask.sum()
            seen += int(mask.sum())

        val_pred = predict_days(state, model_config, prep, eval_nb, prep.days.validation,
                                config.sequence_length, config.warmup)
        val_rmse = metrics.rmse(val_pred, val_obs, val_mask)
        train_rmse = math.sqrt(total / seen) * prep.y_std if seen else math.nan
        result.history.append({"epoch": epoch, "train_rmse": train_rmse, "validation_rmse": val_rmse})
        log.debug("seed %s epoch %d train %.4f val %.4f", seed, epoch, train_rmse, val_rmse)
        if val_rmse < result.best_validation_rmse:
            result.best_validation_rmse = val_rmse
            result.best_epoch = epoch
            result.state = state.copy()
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience:
                result.stopped = f"early stop at epoch {epoch}"
                break
    else:
        result.stopped = "epoch cap"
    return result


def evaluate(
    prep: Prepared,
    state: ModelState,
    model_config: ModelConfig,
    sampler: SamplerConfig,
    config: TrainConfig,
    seed: int,
    window_sizes: Sequence[float],
    stride_fraction: float = 0.1,
) -> dict:
    """Test-period metrics: overall RMSE, per-group RMSE and deviation, M_fair, worst windows."""
    sampler = replace(sampler, seed=seed)
    nb = neighborhoods(prep, sampler, EVAL_EPOCH)
    pred = predict_days(state, model_config, prep, nb, prep.days.test, config.sequence_length, config.warmup)
    obs, mask = _observed_degrees(prep, prep.days.test)
    sse, counts = metrics.squared_error_totals(pred, obs, mask)
    overall = metrics.rmse(pred, obs, mask)
    codes = prep.partition.codes(prep.segments)
    per_group = metrics.group_rmse(sse, counts, codes, prep.partition.labels, config.group_pooling)
    m_fair = metrics.group_fairness(per_group, overall)
    s = prep.basin.sensitive
    windows = {}
    for w in window_sizes:
        res = metrics.worst_window(sse, counts, s, w, stride_fraction)
        windows[_fmt(w)] = {
            "worst_rmse": res.worst_rmse,
            "window": list(res.window),
            "curve": [[float(a + w / 2), float(v)] for a, v in zip(res.positions, res.curve)],
        }
    segs = []
    for k, seg in enumerate(prep.segments):
        segs.append({
            "segment_id": seg,
            "s_value": float(s[k]),
            "group": prep.partition.membership[seg],
            "n_obs": int(counts[k]),
            "rmse": math.sqrt(sse[k] / counts[k]) if counts[k] else None,
        })
    return {
        "overall_rmse": overall,
        "group_rmse": per_group,
        "group_deviation": {g: abs(v - overall) for g, v in per_group.items()},
        "m_fair": m_fair,
        "worst_window": windows,
        "n_test_obs": int(counts.sum()),
        "segments": segs,
    }


def _fmt(w: float) -> str:
    return format(float(w), "g")


def run_seed(
    prep: Prepared,
    model_config: ModelConfig,
    sampler: SamplerConfig,
    config: TrainConfig,
    seed: int,
    window_sizes: Sequence[float],
    stride_fraction: float = 0.1,
) -> tuple[TrainResult, dict]:
    result = train(prep, model_config, sampler, config, seed)
    report = evaluate(prep, result.state, model_config, sampler, config, seed, window_sizes, stride_fraction)
    report.update(
        seed=seed,
        best_epoch=result.best_epoch,
        best_validation_rmse=result.best_validation_rmse,
        epochs_run=len(result.history),
        stopped=result.stopped,
        history=result.history,
    )
    return result, report


SUMMARY_KEYS = ("overall_rmse", "m_fair")


def aggregate_reports(reports: Sequence[dict]) -> dict:
    """Mean (and median) of the headline metrics over successful seeds."""
    if not reports:
        raise ValueError("no successful seeds to aggregate")
    out: dict = {}
    for key in SUMMARY_KEYS:
        vals = [r[key] for r in reports]
        out[key] = {"mean": float(np.mean(vals)), "median": float(np.median(vals)), "per_seed": vals}
    groups = sorted({g for r in reports for g in r["group_rmse"]})
    out["group_rmse"] = {g: float(np.mean([r["group_rmse"][g] for r in reports if g in r["group_rmse"]])) for g in groups}
    out["group_deviation"] = {
        g: float(np.mean([r["group_deviation"][g] for r in reports if g in r["group_deviation"]])) for g in groups
    }
    sizes = list(reports[0]["worst_window"])
    out["worst_window"] = {}
    for w in sizes:
        vals = [r["worst_window"][w]["worst_rmse"] for r in reports]
        out["worst_window"][w] = {"mean": float(np.mean(vals)), "median": float(np.median(vals)), "per_seed": vals}
    return out


def multi_seed(
    prep: Prepared,
    model_config: ModelConfig,
    sampler: SamplerConfig,
    config: TrainConfig,
    window_sizes: Sequence[float],
    stride_fraction: float = 0.1,
    seeds: Sequence[int] | None = None,
    on_result=None,
) -> dict:
    """Train and evaluate once per seed; failures are recorded and skipped in the aggregate."""
    seeds = tuple(seeds if seeds is not None else config.seeds)
    if not seeds:
        raise ValueError("at least one seed is required")
    per_seed, failures = [], {}
    for seed in seeds:
        try:
            result, report = run_seed(prep, model_config, sampler, config, seed, window_sizes, stride_fraction)
        except (NumericalError, ValueError) as exc:
            log.warning("seed %s failed: %s", seed, exc)
            failures[str(seed)] = str(exc)
            continue
        per_seed.append(report)
        if on_result is not None:
            on_result(seed, result, report)
    return {
        "seeds": list(seeds),
        "per_seed": per_seed,
        "failures": failures,
        "aggregate": aggregate_reports(per_seed) if per_seed else None,
    }

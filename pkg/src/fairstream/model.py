"""Recurrent encoder + weighted neighbourhood aggregation + dense head, with exact gradients.

Shapes: ``x`` is (nodes, steps, features); hidden tensors are (nodes, steps, dim).
Everything is float64.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np


class NumericalError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int
    hidden_dim: int = 20
    gnn_layers: int = 1
    output_hidden_dims: tuple[int, ...] = ()
    activation: str = "tanh"

    def __post_init__(self):
        dims = (self.feature_dim, self.hidden_dim, *self.output_hidden_dims)
        if any(d < 1 for d in dims) or self.gnn_layers < 0:
            raise ValueError(f"model dimensions must be >= 1: {self}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["output_hidden_dims"] = list(self.output_hidden_dims)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        data = dict(data)
        data["output_hidden_dims"] = tuple(data.get("output_hidden_dims", ()))
        return cls(**data)


def _tanh_grad(y):
    return 1.0 - y * y


def _relu(x):
    return np.maximum(x, 0.0)


def _relu_grad(y):
    return (y > 0).astype(float)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# activation -> (f, derivative expressed through the output)
ACTIVATIONS = {
    "tanh": (np.tanh, _tanh_grad),
    "relu": (_relu, _relu_grad),
    "sigmoid": (sigmoid, lambda y: y * (1.0 - y)),
}


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    F, H = config.feature_dim, config.hidden_dim
    shapes = {"lstm.W": (F + H, 4 * H), "lstm.b": (4 * H,)}
    for l in range(1, config.gnn_layers + 1):
        shapes[f"agg{l}.W"] = (2 * H, H)
        shapes[f"agg{l}.b"] = (H,)
    dims = [H, *config.output_hidden_dims, 1]
    for k, (a, b) in enumerate(zip(dims, dims[1:])):
        shapes[f"head{k}.W"] = (a, b)
        shapes[f"head{k}.b"] = (b,)
    return shapes


def init_params(config: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases alike."""
    rng = np.random.default_rng([seed, 7919])
    params = {}
    shapes = param_shapes(config)
    for name, shape in shapes.items():
        fan_in = shapes[name.replace(".b", ".W")][0]
        limit = 1.0 / np.sqrt(fan_in)
        params[name] = rng.uniform(-limit, limit, size=shape)
    return params


@dataclass
class ModelState:
    params: dict[str, np.ndarray]
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def __post_init__(self):
        for name, p in self.params.items():
            self.m.setdefault(name, np.zeros_like(p))
            self.v.setdefault(name, np.zeros_like(p))

    @classmethod
    def fresh(cls, config: ModelConfig, seed: int) -> "ModelState":
        return cls(init_params(config, seed))

    def copy(self) -> "ModelState":
        cp = lambda d: {k: v.copy() for k, v in d.items()}  # noqa: E731
        return ModelState(cp(self.params), cp(self.m), cp(self.v), self.step)


@dataclass
class GraphLayer:
    """One aggregation hop: outputs are rows of ``pool`` over the previous layer's rows.

    ``pool`` rows hold normalized weights (sum 1, or all zero for headwaters) and
    ``self_index`` locates each output node among the input rows.
    """

    pool: np.ndarray  # (n_out, n_in)
    self_index: np.ndarray  # (n_out,)


def pooling_matrix(
    rows: Sequence[int], cols: Sequence[int], neighborhoods: Mapping[int, tuple[Sequence[int], Sequence[float]]]
) -> np.ndarray:
    """Normalized weighted-mean pooling matrix; headwater rows stay zero."""
    col_pos = {s: k for k, s in enumerate(cols)}
    P = np.zeros((len(rows), len(cols)))
    for r, i in enumerate(rows):
        nbrs, w = neighborhoods.get(i, ((), ()))
        if not len(nbrs):
            continue
        w = np.asarray(w, dtype=float)
        total = w.sum()
        for j, wj in zip(nbrs, w):
            if j not in col_pos:
                raise KeyError(f"neighbour {j} of {i} has no embedding in this batch")
            P[r, col_pos[j]] += wj / total
    return P


def build_layers(
    targets: Sequence[int],
    neighborhoods: Mapping[int, tuple[Sequence[int], Sequence[float]]],
    n_layers: int,
) -> tuple[list[int], list[GraphLayer]]:
    """Nodes whose recurrent embeddings are needed, and the per-layer pooling plan.

    ``neighborhoods`` maps node -> (neighbour ids, weights).
    """
    sets = [sorted(set(targets))]
    for _ in range(n_layers):
        cur = sets[0]
        need = set(cur)
        for i in cur:
            need.update(neighborhoods.get(i, ((), ()))[0])
        sets.insert(0, sorted(need))
    layers = []
    for l in range(1, n_layers + 1):
        rows, cols = sets[l], sets[l - 1]
        pos = {s: k for k, s in enumerate(cols)}
        layers.append(GraphLayer(pooling_matrix(rows, cols, neighborhoods), np.array([pos[s] for s in rows], dtype=int)))
    return sets[0], layers


# ---------------------------------------------------------------- recurrent encoder


def lstm_forward(W: np.ndarray, b: np.ndarray, x: np.ndarray):
    """Gated recurrent unroll with zero initial hidden and cell states.

    Gate columns are ordered (input, forget, output, candidate). Internals are
    time-major; the returned hidden sequence is (nodes, steps, hidden).
    """
    n, T, F = x.shape
    H = W.shape[1] // 4
    if W.shape[0] != F + H:
        raise ValueError(f"lstm weight rows {W.shape[0]} != features {F} + hidden {H}")
    Wx, Wh = W[:F], W[F:]
    # sigmoid(u) = (1 + tanh(u / 2)) / 2: one contiguous tanh per step serves all gates
    scale = np.concatenate([np.full(3 * H, 0.5), np.ones(H)])
    pre = np.ascontiguousarray(x.transpose(1, 0, 2)) @ (Wx * scale) + b * scale
    Whs = Wh * scale
    th = np.empty((T, n, 4 * H))  # raw tanh; the candidate block is the candidate itself
    sg = np.empty((T, n, 4 * H))  # sigmoid view; valid on the first three blocks
    cs = np.zeros((T + 1, n, H))
    tcs = np.empty((T, n, H))
    hs = np.empty((T + 1, n, H))
    hs[0] = 0.0
    rec = np.empty((n, 4 * H))
    for t in range(T):
        p = pre[t]
        np.matmul(hs[t], Whs, out=rec)
        p += rec
        np.tanh(p, out=th[t])
        np.multiply(th[t], 0.5, out=sg[t])
        sg[t] += 0.5
        c = cs[t + 1]
        np.multiply(sg[t, :, H : 2 * H], cs[t], out=c)
        c += sg[t, :, :H] * th[t, :, 3 * H :]
        np.tanh(c, out=tcs[t])
        np.multiply(sg[t, :, 2 * H : 3 * H], tcs[t], out=hs[t + 1])
    return hs[1:].transpose(1, 0, 2), (x, hs, th, sg, cs, tcs)


def lstm_backward(W: np.ndarray, cache, dhs: np.ndarray):
    x, hs, th, sg, cs, tcs = cache
    n, T, F = x.shape
    H = W.shape[1] // 4
    WhT = np.ascontiguousarray(W[F:].T)
    dh_in = np.ascontiguousarray(dhs.transpose(1, 0, 2))
    dpre = np.empty((T, n, 4 * H))
    dh_next = np.zeros((n, H))
    dc = np.zeros((n, H))
    deriv = np.empty((n, 4 * H))
    for t in range(T - 1, -1, -1):
        s, c_hat = sg[t], th[t, :, 3 * H :]
        dh = dh_in[t]
        dh += dh_next
        tc = tcs[t]
        dc += dh * s[:, 2 * H : 3 * H] * (1.0 - tc * tc)
        d = dpre[t]
        np.multiply(dc, c_hat, out=d[:, :H])
        np.multiply(dc, cs[t], out=d[:, H : 2 * H])
        np.multiply(dh, tc, out=d[:, 2 * H : 3 * H])
        np.multiply(dc, s[:, :H], out=d[:, 3 * H :])
        # s(1 - s) for the sigmoid gates, 1 - c_hat^2 for the candidate
        np.subtract(1.0, s, out=deriv)
        deriv *= s
        np.multiply(c_hat, c_hat, out=deriv[:, 3 * H :])
        np.subtract(1.0, deriv[:, 3 * H :], out=deriv[:, 3 * H :])
        d *= deriv
        np.matmul(d, WhT, out=dh_next)
        dc *= s[:, H : 2 * H]
    flat = dpre.reshape(-1, 4 * H)
    xt = np.ascontiguousarray(x.transpose(1, 0, 2)).reshape(-1, F)
    dW = np.concatenate([xt.T @ flat, hs[:-1].reshape(-1, H).T @ flat], axis=0)
    return dW, flat.sum(axis=0)


def encode_sequence(params: Mapping[str, np.ndarray], x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 2:
        return lstm_forward(params["lstm.W"], params["lstm.b"], x[None])[0][0]
    return lstm_forward(params["lstm.W"], params["lstm.b"], x)[0]


# ---------------------------------------------------------------- aggregation and head


def aggregate(z: np.ndarray, layer: GraphLayer, W: np.ndarray, b: np.ndarray, activation: str = "tanh"):
    """Weighted-mean pooling of neighbour embeddings, concatenated with the node's own, then dense."""
    act = ACTIVATIONS[activation][0]
    pooled = np.tensordot(layer.pool, z, axes=(1, 0))
    cat = np.concatenate([z[layer.self_index], pooled], axis=-1)
    out = act(cat @ W + b)
    return out, (cat, out)


def predict(z: np.ndarray, params: Mapping[str, np.ndarray], config: ModelConfig):
    """Dense head: activation on hidden layers, linear scalar output."""
    act = ACTIVATIONS[config.activation][0]
    n_dense = len(config.output_hidden_dims) + 1
    inputs = []
    a = z
    for k in range(n_dense):
        inputs.append(a)
        a = a @ params[f"head{k}.W"] + params[f"head{k}.b"]
        if k < n_dense - 1:
            a = act(a)
    return a[..., 0], inputs


@dataclass
class ForwardCache:
    lstm: tuple
    agg: list
    head_inputs: list
    layers: list
    yhat: np.ndarray


def forward(params: Mapping[str, np.ndarray], config: ModelConfig, x: np.ndarray, layers: Sequence[GraphLayer]):
    """Full forward pass; returns predictions for the last layer's rows, shape (n_out, steps)."""
    if x.shape[-1] != config.feature_dim:
        raise ValueError(f"expected {config.feature_dim} features, got {x.shape[-1]}")
    if len(layers) != config.gnn_layers:
        raise ValueError(f"expected {config.gnn_layers} graph layers, got {len(layers)}")
    z, lstm_cache = lstm_forward(params["lstm.W"], params["lstm.b"], x)
    agg_caches = []
    for l, layer in enumerate(layers, start=1):
        if layer.pool.shape[1] != z.shape[0]:
            raise ValueError(f"layer {l} pools over {layer.pool.shape[1]} rows but has {z.shape[0]} embeddings")
        z, c = aggregate(z, layer, params[f"agg{l}.W"], params[f"agg{l}.b"], config.activation)
        agg_caches.append(c)
    yhat, head_inputs = predict(z, params, config)
    return yhat, ForwardCache(lstm_cache, agg_caches, head_inputs, list(layers), yhat)


def loss(yhat: np.ndarray, y: np.ndarray, mask: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over observed cells, and its gradient w.r.t. ``yhat``."""
    mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise ValueError("no observations in this batch")
    diff = np.where(mask, yhat - np.where(mask, y, 0.0), 0.0)
    return float((diff * diff).sum() / count), 2.0 * diff / count


def backward(params: Mapping[str, np.ndarray], config: ModelConfig, cache: ForwardCache, dyhat: np.ndarray):
    """Exact gradients of a scalar loss given dL/dyhat, through head, graph layers and the unroll."""
    act_grad = ACTIVATIONS[config.activation][1]
    grads: dict[str, np.ndarray] = {}
    n_dense = len(config.output_hidden_dims) + 1
    H = config.hidden_dim

    d = dyhat[..., None]
    for k in range(n_dense - 1, -1, -1):
        inp = cache.head_inputs[k]
        grads[f"head{k}.W"] = inp.reshape(-1, inp.shape[-1]).T @ d.reshape(-1, d.shape[-1])
        grads[f"head{k}.b"] = d.reshape(-1, d.shape[-1]).sum(axis=0)
        d = d @ params[f"head{k}.W"].T
        if k > 0:
            d = d * act_grad(inp)

    for l in range(len(cache.layers), 0, -1):
        layer = cache.layers[l - 1]
        cat, out = cache.agg[l - 1]
        dpre = d * act_grad(out)
        grads[f"agg{l}.W"] = cat.reshape(-1, 2 * H).T @ dpre.reshape(-1, H)
        grads[f"agg{l}.b"] = dpre.reshape(-1, H).sum(axis=0)
        dcat = dpre @ params[f"agg{l}.W"].T
        d = np.tensordot(layer.pool.T, dcat[..., H:], axes=(1, 0))
        d[layer.self_index] += dcat[..., :H]

    grads["lstm.W"], grads["lstm.b"] = lstm_backward(params["lstm.W"], cache.lstm, d)
    return grads


# ---------------------------------------------------------------- optimizer


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(state: ModelState, grads: Mapping[str, np.ndarray], opt: AdamConfig = AdamConfig()) -> ModelState:
    """Bias-corrected Adam update; returns a new state and leaves ``state`` untouched."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.isfinite(g).sum())
            raise NumericalError(f"non-finite gradient for {name} ({bad} entries) at step {state.step + 1}")
    t = state.step + 1
    bc1 = 1.0 - opt.beta1**t
    bc2 = 1.0 - opt.beta2**t
    new = ModelState({}, {}, {}, t)
    for name, p in state.params.items():
        g = grads[name]
        m = opt.beta1 * state.m[name] + (1.0 - opt.beta1) * g
        v = opt.beta2 * state.v[name] + (1.0 - opt.beta2) * (g * g)
        new.m[name] = m
        new.v[name] = v
        new.params[name] = p - opt.lr * (m / bc1) / (np.sqrt(v / bc2) + opt.eps)
    return new


def backward_and_step(
    state: ModelState, config: ModelConfig, cache: ForwardCache, dyhat: np.ndarray, opt: AdamConfig = AdamConfig()
) -> tuple[ModelState, dict[str, np.ndarray]]:
    grads = backward(state.params, config, cache, dyhat)
    return adam_step(state, grads, opt), grads


# ---------------------------------------------------------------- checkpoints


def _arrays_to_json(d: Mapping[str, np.ndarray]) -> dict:
    return {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in d.items()}


def _arrays_from_json(d: Mapping[str, dict]) -> dict[str, np.ndarray]:
    return {k: np.array(v["data"], dtype=float).reshape(v["shape"]) for k, v in d.items()}


def save_checkpoint(path, config: ModelConfig, state: ModelState, extra: dict | None = None) -> None:
    """JSON checkpoint; floats use the shortest repr that round-trips exactly."""
    doc = {
        "schema_version": 1,
        "model_config": config.to_dict(),
        "step": state.step,
        "params": _arrays_to_json(state.params),
        "adam_m": _arrays_to_json(state.m),
        "adam_v": _arrays_to_json(state.v),
        "extra": extra or {},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_checkpoint(path) -> tuple[ModelConfig, ModelState, dict]:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    config = ModelConfig.from_dict(doc["model_config"])
    state = ModelState(_arrays_from_json(doc["params"]), _arrays_from_json(doc["adam_m"]),
                       _arrays_from_json(doc["adam_v"]), int(doc["step"]))
    return config, state, doc.get("extra", {})

"""Run configuration: one JSON document holding every setting of a run.

Unknown keys are rejected at every level and the whole document is validated
before any work starts.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .model import ModelConfig
from .sampler import MODES, SamplerConfig
from .synth import FEATURE_NAMES, BasinSpec
from .training import TrainConfig

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


def _check_keys(section: str, data, allowed) -> None:
    if not isinstance(data, dict):
        raise ConfigError(f"{section}: expected an object, got {type(data).__name__}")
    extra = sorted(set(data) - set(allowed))
    if extra:
        raise ConfigError(f"{section}: unknown key(s) {extra}")


def _fields(cls) -> list[str]:
    return [f.name for f in dataclasses.fields(cls)]


def _build(section: str, cls, data: dict, **fixed):
    _check_keys(section, data, [f for f in _fields(cls) if f not in fixed])
    try:
        if hasattr(cls, "from_dict"):
            return cls.from_dict({**data, **fixed})
        return cls(**data, **fixed)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from None


@dataclass(frozen=True)
class GroupConfig:
    thresholds: tuple[float, ...] = (50_000.0, 100_000.0)
    labels: tuple[str, ...] | None = ("low", "middle", "high")

    def __post_init__(self):
        t = list(self.thresholds)
        if any(b <= a for a, b in zip(t, t[1:])):
            raise ValueError("thresholds must be strictly increasing")
        if self.labels is not None and len(self.labels) != len(t) + 1:
            raise ValueError(f"need {len(t) + 1} labels for {len(t)} thresholds")

    @classmethod
    def from_dict(cls, data: dict) -> "GroupConfig":
        labels = data.get("labels", cls.labels)
        return cls(tuple(float(x) for x in data.get("thresholds", cls.thresholds)),
                   None if labels is None else tuple(labels))


@dataclass(frozen=True)
class EvalConfig:
    window_sizes: tuple[float, ...] = (1000.0, 3000.0, 5000.0)
    stride_fraction: float = 0.1

    def __post_init__(self):
        if not self.window_sizes or any(not w > 0 for w in self.window_sizes):
            raise ValueError("window_sizes must be a non-empty list of positive numbers")
        if not 0 <= self.stride_fraction <= 1:
            raise ValueError("stride_fraction must be in [0, 1]")

    @classmethod
    def from_dict(cls, data: dict) -> "EvalConfig":
        return cls(tuple(float(w) for w in data.get("window_sizes", cls.window_sizes)),
                   float(data.get("stride_fraction", cls.stride_fraction)))


@dataclass(frozen=True)
class DumpConfig:
    pgraph: bool = False
    influence: bool = False
    neighborhoods: bool = False  # epoch-0 neighbourhoods of the first seed


@dataclass(frozen=True)
class RunConfig:
    basin: BasinSpec = field(default_factory=BasinSpec)
    groups: GroupConfig = field(default_factory=GroupConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    model: ModelConfig = field(default_factory=lambda: ModelConfig(feature_dim=len(FEATURE_NAMES)))
    train: TrainConfig = field(default_factory=TrainConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    ablation_modes: tuple[str, ...] = ("random", "fair-edge-ablation", "fair-adj-ablation", "fair-discrete")
    dumps: DumpConfig = field(default_factory=DumpConfig)
    output_dir: str = "run"
    bundle_dir: str | None = None  # default: <output_dir>/bundle

    def bundle_path(self) -> str:
        return self.bundle_dir if self.bundle_dir is not None else f"{self.output_dir}/bundle"

    def to_dict(self) -> dict:
        model = self.model.to_dict()
        model.pop("feature_dim", None)
        return {
            "schema_version": SCHEMA_VERSION,
            "basin": self.basin.to_dict(),
            "groups": {"thresholds": list(self.groups.thresholds),
                       "labels": None if self.groups.labels is None else list(self.groups.labels)},
            "sampler": self.sampler.to_dict(),
            "model": model,
            "train": self.train.to_dict(),
            "evaluation": {"window_sizes": list(self.evaluation.window_sizes),
                           "stride_fraction": self.evaluation.stride_fraction},
            "ablation_modes": list(self.ablation_modes),
            "dumps": dataclasses.asdict(self.dumps),
            "output_dir": self.output_dir,
            "bundle_dir": self.bundle_dir,
        }

    def hash(self) -> str:
        return config_hash(self.to_dict())


TOP_KEYS = ("schema_version", "basin", "groups", "sampler", "model", "train", "evaluation",
            "ablation_modes", "dumps", "output_dir", "bundle_dir")


def parse_config(doc: dict) -> RunConfig:
    _check_keys("config", doc, TOP_KEYS)
    version = doc.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version!r}")
    kw = {}
    kw["basin"] = _build("basin", BasinSpec, doc.get("basin", {}))
    kw["groups"] = _build("groups", GroupConfig, doc.get("groups", {}))
    kw["sampler"] = _build("sampler", SamplerConfig, doc.get("sampler", {}))
    model = dict(doc.get("model", {}))
    if "output_hidden_dims" in model:
        model["output_hidden_dims"] = tuple(model["output_hidden_dims"])
    kw["model"] = _build("model", ModelConfig, model, feature_dim=len(FEATURE_NAMES))
    kw["train"] = _build("train", TrainConfig, doc.get("train", {}))
    kw["evaluation"] = _build("evaluation", EvalConfig, doc.get("evaluation", {}))
    kw["dumps"] = _build("dumps", DumpConfig, doc.get("dumps", {}))
    modes = tuple(doc.get("ablation_modes", RunConfig.ablation_modes))
    bad = [m for m in modes if m not in MODES]
    if bad or not modes:
        raise ConfigError(f"ablation_modes: unknown or empty {bad or modes}")
    kw["ablation_modes"] = modes
    for key in ("output_dir", "bundle_dir"):
        if key in doc:
            v = doc[key]
            if not (isinstance(v, str) and v) and not (key == "bundle_dir" and v is None):
                raise ConfigError(f"{key}: expected a non-empty string")
            kw[key] = v
    return RunConfig(**kw)


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    return parse_config(doc)


def config_hash(doc: dict) -> str:
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()

"""On-disk basin bundle: graph.json, series.csv, sensitive.csv.

Floats are written with 17 significant digits so a bundle reloads bit-exactly.
The ``flow`` column holds the observed value where ``flow_observed_flag`` is 1
and the simulated value elsewhere; ``temp`` is blank where unobserved.
"""
from __future__ import annotations

import csv
import hashlib
import json
import os
from pathlib import Path

import numpy as np

from .graph import BasinGraph
from .synth import BasinSpec, SyntheticBasin

SCHEMA_VERSION = 1
BUNDLE_FILES = ("graph.json", "series.csv", "sensitive.csv")


def _g(v: float) -> str:
    return format(float(v), ".17g")


def write_bundle(basin: SyntheticBasin, directory) -> Path:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    doc = {
        "schema_version": SCHEMA_VERSION,
        "basin_spec": basin.spec.to_dict(),
        "feature_names": list(basin.feature_names),
        "n_days": basin.n_days,
        **basin.graph.to_dict(),
    }
    with open(out / "graph.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")

    n_feat = basin.features.shape[2]
    flow = np.where(basin.flow_observed_mask, basin.flow_true, basin.flow_simulated)
    temp = basin.ground_truth_temperature
    header = ["segment_id", "day"] + [f"feature_{k + 1}" for k in range(n_feat)]
    header += ["flow", "flow_observed_flag", "temp", "temp_observed_flag"]
    with open(out / "series.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for k, seg in enumerate(basin.graph.segments):
            feats = basin.features[k]
            fm, tm = basin.flow_observed_mask[k], basin.temp_mask[k]
            lines = []
            for t in range(basin.n_days):
                row = [str(seg), str(t)]
                row += [_g(v) for v in feats[t]]
                row += [_g(flow[k, t]), "1" if fm[t] else "0", _g(temp[k, t]) if tm[t] else "", "1" if tm[t] else "0"]
                lines.append(",".join(row))
            fh.write("\n".join(lines) + "\n")

    with open(out / "sensitive.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("segment_id,s_value\n")
        for k, seg in enumerate(basin.graph.segments):
            fh.write(f"{seg},{_g(basin.sensitive[k])}\n")
    return out


def read_bundle(directory) -> SyntheticBasin:
    """Rebuild a basin from a bundle. Ground truth is only known where observed (NaN elsewhere)."""
    src = Path(directory)
    for name in BUNDLE_FILES:
        if not (src / name).is_file():
            raise FileNotFoundError(f"bundle file missing: {src / name}")
    with open(src / "graph.json", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported bundle schema_version {doc.get('schema_version')!r}")
    graph = BasinGraph.from_dict(doc)
    spec = BasinSpec.from_dict(doc["basin_spec"])
    pos = {s: k for k, s in enumerate(graph.segments)}
    n, T = graph.n_segments, int(doc["n_days"])

    with open(src / "series.csv", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        n_feat = sum(1 for h in header if h.startswith("feature_"))
        features = np.full((n, T, n_feat), np.nan)
        flow = np.full((n, T), np.nan)
        flow_mask = np.zeros((n, T), dtype=bool)
        temp = np.full((n, T), np.nan)
        temp_mask = np.zeros((n, T), dtype=bool)
        for row in reader:
            k, t = pos[int(row[0])], int(row[1])
            features[k, t] = [float(v) for v in row[2 : 2 + n_feat]]
            rest = row[2 + n_feat :]
            flow[k, t] = float(rest[0])
            flow_mask[k, t] = rest[1] == "1"
            if rest[3] == "1":
                temp_mask[k, t] = True
                temp[k, t] = float(rest[2])
    if np.isnan(features).any() or np.isnan(flow).any():
        raise ValueError("series.csv does not cover every (segment, day) cell")

    sensitive = np.full(n, np.nan)
    with open(src / "sensitive.csv", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            sensitive[pos[int(row[0])]] = float(row[1])
    if np.isnan(sensitive).any():
        raise ValueError("sensitive.csv is missing segments")

    return SyntheticBasin(
        spec=spec,
        graph=graph,
        features=features,
        flow_true=np.where(flow_mask, flow, np.nan),
        flow_simulated=np.where(flow_mask, np.nan, flow),
        flow_observed_mask=flow_mask,
        ground_truth_temperature=temp,
        temp_mask=temp_mask,
        sensitive=sensitive,
        feature_names=tuple(doc.get("feature_names", ())),
    )


def bundle_hash(directory) -> str:
    h = hashlib.sha256()
    for name in BUNDLE_FILES:
        h.update(name.encode())
        with open(os.path.join(directory, name), "rb") as fh:
            for block in iter(lambda: fh.read(1 << 20), b""):
                h.update(block)
    return h.hexdigest()

"""Command-line front end: generate, train, evaluate, ablate.

Exit codes: 0 success, 2 invalid input or configuration, 3 I/O error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import contextlib
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import plots
from .bundle import bundle_hash, read_bundle, write_bundle
from .config import ConfigError, RunConfig, config_hash, load_config, parse_config
from .graph import compute_adjacency, expand_multihop
from .influence import build_table, fill_flow, write_influence_csv
from .model import NumericalError, load_checkpoint, save_checkpoint
from .sampler import sample_neighborhoods, write_neighborhoods
from .synth import generate_basin
from .training import aggregate_reports, evaluate, multi_seed, prepare

log = logging.getLogger("fairstream")

SCHEMA_VERSION = 1
EXIT_OK, EXIT_INVALID, EXIT_IO, EXIT_NUMERICAL = 0, 2, 3, 4


def _write_json(path: Path, doc) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def _g(v) -> str:
    return "" if v is None else format(float(v), ".17g")


def _prepare(cfg: RunConfig, basin):
    return prepare(basin, cfg.groups.thresholds, cfg.groups.labels, train=cfg.train,
                   influence_mode=cfg.sampler.influence_mode)


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if getattr(args, "out", None):
        cfg = replace(cfg, output_dir=args.out)
    if getattr(args, "bundle", None):
        cfg = replace(cfg, bundle_dir=args.bundle)
    if getattr(args, "seeds", None):
        cfg = replace(cfg, train=replace(cfg.train, seeds=tuple(args.seeds)))
    return cfg


def _mean_segments(reports: list[dict]) -> list[dict]:
    rows = []
    for k, seg in enumerate(reports[0]["segments"]):
        vals = [r["segments"][k]["rmse"] for r in reports if r["segments"][k]["rmse"] is not None]
        rows.append({**seg, "rmse": float(np.mean(vals)) if vals else None})
    return rows


def _mean_curves(reports: list[dict]) -> dict[str, list[list[float]]]:
    # window positions depend only on the test mask and s, so they agree across seeds
    out = {}
    for w in reports[0]["worst_window"]:
        curves = [r["worst_window"][w]["curve"] for r in reports]
        out[w] = [[c[0], float(np.mean([cv[k][1] for cv in curves]))] for k, c in enumerate(curves[0])]
    return out


def write_report_files(out: Path, report: dict, reports: list[dict]) -> None:
    """report.json, per_segment_rmse.csv, window_curve.csv and the two SVG plots."""
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "report.json", report)
    if not reports:
        return
    with open(out / "per_segment_rmse.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("segment_id,s_value,group,rmse\n")
        for row in _mean_segments(reports):
            fh.write(f"{row['segment_id']},{_g(row['s_value'])},{row['group']},{_g(row['rmse'])}\n")
    curves = _mean_curves(reports)
    with open(out / "window_curve.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("window_size,window_center,rmse\n")
        for w, pts in curves.items():
            for c, v in pts:
                fh.write(f"{w},{_g(c)},{_g(v)}\n")
    overall = float(np.mean([r["overall_rmse"] for r in reports]))
    plots.window_curve_svg(out / "window_curve.svg", curves, overall)
    dev = {g: float(np.mean([r["group_deviation"][g] for r in reports if g in r["group_deviation"]]))
           for g in sorted({g for r in reports for g in r["group_deviation"]})}
    plots.group_bars_svg(out / "group_deviation.svg", {report.get("sampler_mode", "model"): dev})


def cmd_generate(cfg: RunConfig) -> int:
    basin = generate_basin(cfg.basin)
    bdir = Path(cfg.bundle_path())
    write_bundle(basin, bdir)
    out = Path(cfg.output_dir)
    if cfg.dumps.pgraph or cfg.dumps.influence:
        out.mkdir(parents=True, exist_ok=True)
        pgraph = expand_multihop(basin.graph, cfg.train.hop_limit)
        compute_adjacency(pgraph)
        if cfg.dumps.pgraph:
            _write_json(out / "pgraph.json", {"schema_version": SCHEMA_VERSION, **pgraph.to_dict()})
        if cfg.dumps.influence:
            flows = fill_flow(basin.flow_observed, basin.flow_observed_mask, basin.flow_simulated)
            write_influence_csv(out / "influence.csv", pgraph, build_table(pgraph, flows.flow, "averaged"))
    print(f"bundle: {bdir}")
    print(f"segments: {basin.n_segments}  direct edges: {len(basin.graph.direct_edges)}  days: {basin.n_days}")
    print(f"temperature observations: {int(basin.temp_mask.sum())}  "
          f"flow observations: {int(basin.flow_observed_mask.sum())}")
    print(f"bundle hash: {bundle_hash(bdir)}")
    return EXIT_OK


def _run_modes(cfg: RunConfig, modes, out: Path, save_checkpoints: bool):
    bdir = cfg.bundle_path()
    basin = read_bundle(bdir)
    bhash = bundle_hash(bdir)
    prep = _prepare(cfg, basin)
    chash = cfg.hash()
    results = {}
    for mode in modes:
        sampler = replace(cfg.sampler, mode=mode)
        ckdir = out / "checkpoints"

        def on_result(seed, result, report, mode=mode):
            if not save_checkpoints:
                return
            ckdir.mkdir(parents=True, exist_ok=True)
            extra = {"run_config": cfg.to_dict(), "config_hash": chash, "bundle_hash": bhash, "seed": seed,
                     "sampler_mode": mode, "best_epoch": result.best_epoch,
                     "best_validation_rmse": result.best_validation_rmse}
            save_checkpoint(ckdir / f"seed_{seed}.json", cfg.model, result.state, extra)

        if cfg.dumps.neighborhoods and save_checkpoints:
            out.mkdir(parents=True, exist_ok=True)
            s0 = replace(sampler, seed=cfg.train.seeds[0])
            samples = sample_neighborhoods(prep.pgraph, s0, prep.edge_influence(s0), prep.groups(),
                                           prep.sensitive_map(), prep.feature_similarity, epoch=0)
            write_neighborhoods(out / "neighborhoods_epoch0.json", samples, 0, s0)
        log.info("training mode %s on seeds %s", mode, list(cfg.train.seeds))
        results[mode] = multi_seed(prep, cfg.model, sampler, cfg.train, cfg.evaluation.window_sizes,
                                   cfg.evaluation.stride_fraction, on_result=on_result)
    return results, chash, bhash


def cmd_train(cfg: RunConfig) -> int:
    out = Path(cfg.output_dir)
    results, chash, bhash = _run_modes(cfg, [cfg.sampler.mode], out, save_checkpoints=True)
    res = results[cfg.sampler.mode]
    report = {
        "schema_version": SCHEMA_VERSION,
        "command": "train",
        "config": cfg.to_dict(),
        "config_hash": chash,
        "bundle_hash": bhash,
        "sampler_mode": cfg.sampler.mode,
        **res,
    }
    write_report_files(out, report, res["per_seed"])
    if res["aggregate"] is None:
        print(f"every seed failed: {res['failures']}", file=sys.stderr)
        return EXIT_NUMERICAL
    agg = res["aggregate"]
    print(f"mode {cfg.sampler.mode}: rmse {agg['overall_rmse']['mean']:.4f}  m_fair {agg['m_fair']['mean']:.4f}  "
          f"seeds ok {len(res['per_seed'])}/{len(res['seeds'])}")
    print(f"report: {out / 'report.json'}")
    return EXIT_OK


def cmd_evaluate(checkpoint: str, bundle: str, windows, out: str | None) -> int:
    model_config, state, extra = load_checkpoint(checkpoint)
    for key in ("run_config", "config_hash", "bundle_hash", "seed"):
        if key not in extra:
            raise ConfigError(f"checkpoint lacks {key!r}; not written by 'train'")
    if config_hash(extra["run_config"]) != extra["config_hash"]:
        raise ConfigError("checkpoint config does not match its embedded config hash")
    cfg = parse_config(extra["run_config"])
    if cfg.model != model_config:
        raise ConfigError("checkpoint model config differs from its embedded run config")
    bhash = bundle_hash(bundle)
    if bhash != extra["bundle_hash"]:
        raise ConfigError(f"bundle hash mismatch: checkpoint was trained on {extra['bundle_hash'][:12]}, "
                          f"bundle is {bhash[:12]}")
    ev = cfg.evaluation
    if windows:
        ev = replace(ev, window_sizes=tuple(float(w) for w in windows))
    seed = int(extra["seed"])
    mode = extra.get("sampler_mode", cfg.sampler.mode)
    prep = _prepare(cfg, read_bundle(bundle))
    rep = evaluate(prep, state, model_config, replace(cfg.sampler, mode=mode), cfg.train, seed,
                   ev.window_sizes, ev.stride_fraction)
    rep["seed"] = seed
    report = {
        "schema_version": SCHEMA_VERSION,
        "command": "evaluate",
        "config": cfg.to_dict(),
        "config_hash": extra["config_hash"],
        "bundle_hash": bhash,
        "checkpoint": str(checkpoint),
        "sampler_mode": mode,
        "window_sizes": list(ev.window_sizes),
        "seeds": [seed],
        "per_seed": [rep],
        "failures": {},
        "aggregate": aggregate_reports([rep]),
    }
    dest = Path(out) if out else Path(checkpoint).resolve().parent.parent / f"evaluate_seed_{seed}"
    write_report_files(dest, report, [rep])
    print(f"seed {seed}: rmse {rep['overall_rmse']:.4f}  m_fair {rep['m_fair']:.4f}")
    print(f"report: {dest / 'report.json'}")
    return EXIT_OK


ABLATION_COLUMNS = ("mode", "seed", "rmse", "fairness")


def ablation_rows(results: dict, window_keys) -> list[list[str]]:
    rows = []
    for mode, res in results.items():
        for r in res["per_seed"]:
            rows.append([mode, str(r["seed"]), _g(r["overall_rmse"]), _g(r["m_fair"])]
                        + [_g(r["worst_window"][w]["worst_rmse"]) for w in window_keys])
        agg = res["aggregate"]
        if agg is not None:
            rows.append([mode, "mean", _g(agg["overall_rmse"]["mean"]), _g(agg["m_fair"]["mean"])]
                        + [_g(agg["worst_window"][w]["mean"]) for w in window_keys])
    return rows


def cmd_ablate(cfg: RunConfig) -> int:
    out = Path(cfg.output_dir)
    results, chash, bhash = _run_modes(cfg, cfg.ablation_modes, out, save_checkpoints=False)
    wkeys = [format(w, "g") for w in cfg.evaluation.window_sizes]
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "ablation.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(list(ABLATION_COLUMNS) + [f"worst_window_{w}" for w in wkeys]) + "\n")
        for row in ablation_rows(results, wkeys):
            fh.write(",".join(row) + "\n")
    _write_json(out / "ablation.json", {
        "schema_version": SCHEMA_VERSION,
        "command": "ablate",
        "config": cfg.to_dict(),
        "config_hash": chash,
        "bundle_hash": bhash,
        "modes": {m: {"seeds": r["seeds"], "failures": r["failures"], "aggregate": r["aggregate"]}
                  for m, r in results.items()},
    })
    devs = {m: r["aggregate"]["group_deviation"] for m, r in results.items() if r["aggregate"]}
    if devs:
        plots.group_bars_svg(out / "ablation_group_deviation.svg", devs)
    for m, r in results.items():
        agg = r["aggregate"]
        if agg is None:
            print(f"{m:20s} all seeds failed")
            continue
        ww = "  ".join(f"w{w} {agg['worst_window'][w]['mean']:.4f}" for w in wkeys)
        print(f"{m:20s} rmse {agg['overall_rmse']['mean']:.4f}  m_fair {agg['m_fair']['mean']:.4f}  {ww}")
    print(f"table: {out / 'ablation.csv'}")
    return EXIT_OK if all(r["aggregate"] is not None for r in results.values()) else EXIT_NUMERICAL


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fairstream", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0, help="-v for progress, -vv for per-epoch detail")
    p.add_argument("--single-thread", action="store_true", help="limit BLAS to one thread for bit-reproducible runs")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic basin bundle")
    g.add_argument("config")
    g.add_argument("--out", help="override output_dir")
    g.add_argument("--bundle", help="override bundle_dir")

    for name, text in (("train", "train and evaluate every seed"), ("ablate", "compare sampler modes")):
        s = sub.add_parser(name, help=text)
        s.add_argument("config")
        s.add_argument("--out", help="override output_dir")
        s.add_argument("--bundle", help="override bundle_dir")
        s.add_argument("--seeds", type=int, nargs="+", help="override train.seeds")

    e = sub.add_parser("evaluate", help="recompute test metrics from a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--bundle", required=True)
    e.add_argument("--windows", type=float, nargs="+", help="window sizes (default: from the checkpoint config)")
    e.add_argument("--out", help="output directory")
    return p


def _dispatch(args) -> int:
    if args.command == "evaluate":
        return cmd_evaluate(args.checkpoint, args.bundle, args.windows, args.out)
    cfg = _apply_overrides(load_config(args.config), args)
    return {"generate": cmd_generate, "train": cmd_train, "ablate": cmd_ablate}[args.command](cfg)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING if args.verbose == 0 else logging.INFO if args.verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    if args.single_thread:
        from threadpoolctl import threadpool_limits

        limiter = threadpool_limits(limits=1)
    else:
        limiter = contextlib.nullcontext()
    try:
        with limiter:
            return _dispatch(args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (FileNotFoundError, PermissionError, IsADirectoryError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ValueError, KeyError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

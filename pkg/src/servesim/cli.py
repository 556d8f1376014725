"""Command-line entry point: ``servesim <command> [flags]``.

Every command writes a ``manifest.json`` (or ``<file>.manifest.json`` for
single-file outputs) recording the command, resolved inputs, seed, tool
version and a timestamp. The timestamp honours ``SOURCE_DATE_EPOCH``.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .metrics import export
from .model_spec import load_model_spec
from .profiler import ProfileRecord, generate_profile, ingest_profile_csv, load_device, write_profile_csv
from .runtime_estimator import EstimatorConfig, build_lookup_table, load_estimator, save_estimator, train
from .search import OBJECTIVES, load_search_config, run_search, write_search_outputs
from .sim_core import load_cluster_config, run
from .workload import compute_stats, format_stats_table, load_dist_config, load_trace, poisson_arrivals, save_trace, static_arrivals, synth_trace


class CliError(Exception):
    pass


def _timestamp() -> str:
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    t = int(epoch) if epoch else time.time()
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(t))


def write_manifest(path: Path, command: str, inputs: dict, seed: int | None, extra: dict | None = None) -> None:
    doc = {
        "command": command,
        "inputs": {k: str(Path(v).resolve()) if _is_path(v) else v for k, v in inputs.items()},
        "seed": seed,
        "tool": "servesim",
        "version": __version__,
        "timestamp": _timestamp(),
        "argv": sys.argv[1:],
    }
    if extra:
        doc.update(extra)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _is_path(v) -> bool:
    return isinstance(v, (str, Path)) and Path(v).exists()


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def cmd_profile(args) -> None:
    spec = load_model_spec(args.model_spec)
    dev = load_device(args.device)
    records = generate_profile(spec, dev, tp_degrees=args.tp, with_send_recv=args.send_recv, max_batch_size=args.max_batch_size)
    if args.noise > 0:
        rng = np.random.default_rng(args.seed)
        factors = rng.lognormal(0.0, args.noise, len(records))
        records = [ProfileRecord(r.op_name, r.features, r.runtime * float(f)) for r, f in zip(records, factors)]
    out = Path(args.out)
    write_profile_csv(records, out)
    write_manifest(
        out.with_name(out.name + ".manifest.json"),
        "profile",
        {"model_spec": args.model_spec, "device": args.device, "tp": args.tp, "noise": args.noise},
        args.seed,
    )
    print(f"wrote {len(records)} profile rows to {out}")


def cmd_train(args) -> None:
    records = ingest_profile_csv(args.profile)
    config = EstimatorConfig(regressor=args.regressor, seed=args.seed)
    model = train(records, config)
    table = build_lookup_table(model)
    out = Path(args.out)
    save_estimator(out, model, table)
    write_manifest(out.with_name(out.name + ".manifest.json"), "train", {"profile": args.profile, "regressor": args.regressor}, args.seed)
    for row in model.report():
        print(f"{row['op_name']}@tp{row['tp_degree']}\t{row['n_points']} points\theld-out MAPE {row['heldout_mape']:.2%}")
    print(f"wrote estimator to {out}")


def cmd_simulate(args) -> None:
    cluster = load_cluster_config(args.cluster_config)
    model, table = load_estimator(args.estimator)
    trace = load_trace(args.trace)
    static = False
    if args.qps is not None:
        trace = poisson_arrivals(trace, args.qps, seed=args.seed)
    elif any(r.arrival_time is None for r in trace):
        trace = static_arrivals(trace)
        static = True
    result = run(cluster, trace, table if table is not None else model, record_events=args.event_log, static=static)
    out = Path(args.out)
    files = export(result, out, args.format, cluster.model, cluster.device.peak_flops)
    if args.event_log:
        (out / "events.log").write_text("\n".join(result.event_log) + "\n")
    write_manifest(
        out / "manifest.json",
        "simulate",
        {"cluster_config": args.cluster_config, "trace": args.trace, "estimator": args.estimator, "qps": args.qps},
        args.seed,
        {"cluster": cluster.to_dict(), "static_mode": static},
    )
    print(f"simulated {len(result.requests)} requests over {result.span:.3f} s; wrote {', '.join(str(f) for f in files)}")


def cmd_search(args) -> None:
    cfg = load_search_config(args.search_config, seed=args.seed)
    fractions = (args.capacity_fraction,) + tuple(f for f in cfg.fractions[1:] if f != args.capacity_fraction)
    out = run_search(
        cfg.spec,
        cfg.space,
        cfg.template,
        cfg.slos,
        cfg.costs,
        devices=cfg.devices,
        predictors=cfg.predictors,
        seed=cfg.seed,
        workers=args.workers,
        tolerance=cfg.tolerance,
        fractions=fractions,
        objective=args.objective or cfg.objective,
        routing=cfg.routing,
        probe_span=cfg.probe_span,
    )
    out_dir = Path(args.out)
    write_search_outputs(out, out_dir)
    write_manifest(
        out_dir / "manifest.json",
        "search",
        {"search_config": args.search_config, **cfg.paths},
        cfg.seed,
        {"workers": args.workers, "objective": out.objective, "capacity_fraction": args.capacity_fraction},
    )
    sys.stdout.write((out_dir / "summary.txt").read_text())


def cmd_workload_stats(args) -> None:
    rows = {}
    for path in args.trace:
        rows[Path(path).stem] = compute_stats(load_trace(path))
    if args.format == "json":
        text = json.dumps({k: v.as_row() for k, v in rows.items()}, indent=1) + "\n"
    else:
        text = format_stats_table(rows)
    if args.out:
        out = Path(args.out)
        out.write_text(text)
        write_manifest(out.with_name(out.name + ".manifest.json"), "workload-stats", {"trace": args.trace}, None)
    else:
        sys.stdout.write(text)


def cmd_make_trace(args) -> None:
    requests = synth_trace(load_dist_config(args.distribution), args.num_requests, seed=args.seed)
    if args.qps is not None:
        requests = poisson_arrivals(requests, args.qps, seed=args.seed)
    out = Path(args.out)
    save_trace(requests, out)
    write_manifest(
        out.with_name(out.name + ".manifest.json"),
        "make-trace",
        {"distribution": args.distribution, "num_requests": args.num_requests, "qps": args.qps},
        args.seed,
    )
    print(f"wrote {len(requests)} requests to {out}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="servesim", description="LLM serving simulator and deployment search.")
    p.add_argument("--version", action="version", version=f"servesim {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("profile", help="write a synthetic operator profile CSV from the roofline oracle")
    s.add_argument("--model-spec", required=True, help="model spec YAML path or bundled model name")
    s.add_argument("--device", required=True, help="device profile YAML path or bundled SKU name")
    s.add_argument("--tp", type=_int_list, default=[1], help="comma-separated TP degrees to profile (default 1)")
    s.add_argument("--send-recv", action="store_true", help="also profile the pipeline send/recv op")
    s.add_argument("--max-batch-size", type=int, default=512, help="largest batch the KV grid must cover (default 512)")
    s.add_argument("--noise", type=float, default=0.0, help="lognormal sigma of multiplicative runtime noise (default 0)")
    s.add_argument("--seed", type=int, default=0, help="seed for the noise draws (default 0)")
    s.add_argument("--out", required=True, help="output CSV path")
    s.set_defaults(func=cmd_profile)

    s = sub.add_parser("train", help="fit runtime predictors and a lookup table from a profile CSV")
    s.add_argument("--profile", required=True, help="profile CSV path")
    s.add_argument("--regressor", choices=("interp", "forest"), default="interp", help="predictor family (default interp)")
    s.add_argument("--seed", type=int, default=0, help="seed for the forest and the held-out split (default 0)")
    s.add_argument("--out", required=True, help="output estimator JSON path")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("simulate", help="simulate one cluster configuration on a trace")
    s.add_argument("--cluster-config", required=True, help="cluster config YAML")
    s.add_argument("--trace", required=True, help="trace CSV")
    s.add_argument("--estimator", required=True, help="estimator JSON from 'train'")
    s.add_argument("--qps", type=float, default=None, help="replace arrivals with seeded Poisson arrivals at this rate")
    s.add_argument("--seed", type=int, default=0, help="seed for Poisson arrivals (default 0)")
    s.add_argument("--format", choices=("csv", "json"), default="csv", help="metrics export format (default csv)")
    s.add_argument("--event-log", action="store_true", help="also write the scheduler event log")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("search", help="search deployment configurations for the best QPS per dollar")
    s.add_argument("--search-config", required=True, help="search config YAML")
    s.add_argument("--workers", type=int, default=1, help="parallel worker processes (default 1)")
    s.add_argument("--seed", type=int, default=None, help="overrides the config's seed")
    s.add_argument("--capacity-fraction", type=float, default=0.85, help="load, as a fraction of capacity, for SLO checks (default 0.85)")
    s.add_argument("--objective", choices=OBJECTIVES, default=None, help="ranking objective (default from config, else qps-per-dollar)")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_search)

    s = sub.add_parser("workload-stats", help="print per-trace length statistics")
    s.add_argument("--trace", required=True, action="append", help="trace CSV (repeatable)")
    s.add_argument("--format", choices=("csv", "json"), default="csv", help="tab-separated table (csv) or JSON (default csv)")
    s.add_argument("--out", default=None, help="write to this file instead of stdout")
    s.set_defaults(func=cmd_workload_stats)

    s = sub.add_parser("make-trace", help="sample a synthetic trace from a length distribution")
    s.add_argument("--distribution", required=True, help="distribution YAML path or bundled workload name")
    s.add_argument("--num-requests", type=int, required=True, help="number of requests")
    s.add_argument("--qps", type=float, default=None, help="add Poisson arrivals at this rate")
    s.add_argument("--seed", type=int, default=0, help="sampling seed (default 0)")
    s.add_argument("--out", required=True, help="output trace CSV")
    s.set_defaults(func=cmd_make_trace)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "workers", 1) < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return 2
    try:
        args.func(args)
    except (ValueError, OSError, RuntimeError, KeyError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

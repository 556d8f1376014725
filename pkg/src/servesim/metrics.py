"""Request-, replica- and cluster-level metrics, plus CSV/JSON export.

Per-request table columns (``requests.csv`` or the ``requests`` list in
``metrics.json``)::

    request_id, replica, arrival_time, prefill_tokens, decode_tokens,
    first_scheduled, first_token_time, completion_time, restarts,
    recomputed_tokens, scheduling_delay, ttft, e2e_latency,
    normalized_latency, token_times

``token_times`` is a space-separated list in CSV. Floats are written with
``repr`` so that a reload reproduces them exactly. ``summary.csv`` holds
``metric,value`` rows; in JSON the same pairs sit under ``summary``.
"""

from __future__ import annotations

import csv
import json
import statistics
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .model_spec import ModelSpec, ParallelismConfig, derive_operators
from .profiler import TOKEN_OPS, op_flops_bytes
from .sim_core import RequestRecord, SimulationResult
from .workload import nearest_rank

SUMMARY_QUANTILES = (0.5, 0.9, 0.95, 0.99)
LATENCY_METRICS = ("scheduling_delay", "ttft", "tbt", "e2e_latency", "normalized_latency")

REQUEST_COLUMNS = [
    "request_id",
    "replica",
    "arrival_time",
    "prefill_tokens",
    "decode_tokens",
    "first_scheduled",
    "first_token_time",
    "completion_time",
    "restarts",
    "recomputed_tokens",
    "scheduling_delay",
    "ttft",
    "e2e_latency",
    "normalized_latency",
    "token_times",
]


def percentile(samples: Sequence[float], q: float) -> float:
    """Nearest-rank percentile: the ceil(q*n)-th smallest sample."""
    return nearest_rank(samples, q)


@dataclass
class RequestMetrics:
    record: RequestRecord
    scheduling_delay: float
    ttft: float
    e2e_latency: float
    normalized_latency: float
    tbt_samples: list[float]

    @property
    def restarts(self) -> int:
        return self.record.restarts


def tbt_samples(record: RequestRecord) -> list[float]:
    t = record.token_times
    return [b - a for a, b in zip(t, t[1:])]


def normalized_latency(record: RequestRecord, static: bool = False) -> float:
    """Seconds per output token; static runs exclude time spent queued."""
    start = record.first_scheduled if static else record.arrival_time
    return (record.completion_time - start) / record.decode_tokens


def request_metrics(record: RequestRecord, static: bool = False) -> RequestMetrics:
    return RequestMetrics(
        record=record,
        scheduling_delay=record.first_scheduled - record.arrival_time,
        ttft=record.first_token_time - record.arrival_time,
        e2e_latency=record.completion_time - record.arrival_time,
        normalized_latency=normalized_latency(record, static),
        tbt_samples=tbt_samples(record),
    )


class FlopCounter:
    """Model flops of one iteration, counted on the unsharded model."""

    def __init__(self, spec: ModelSpec):
        ops = derive_operators(spec, ParallelismConfig())
        b = spec.param_bytes_per_element
        self.per_token = sum(
            op_flops_bytes(op, {"num_tokens": 1}, b)[0] * op.invocations for op in ops if op.op_name in TOKEN_OPS
        )
        self.attn_per_unit = 4.0 * spec.num_q_heads * spec.head_dim * spec.num_layers

    def iteration(self, it) -> float:
        return self.per_token * it.num_tokens + self.attn_per_unit * (
            it.prefill_attention_work + it.decode_context_tokens
        )


def mfu(result: SimulationResult, spec: ModelSpec, peak_flops: float) -> float:
    devices = result.num_replicas * result.devices_per_replica
    if result.span <= 0 or not result.iterations:
        return 0.0
    counter = FlopCounter(spec)
    total = sum(counter.iteration(it) for it in result.iterations)
    return total / (result.span * peak_flops * devices)


def kv_utilization(result: SimulationResult) -> tuple[float, float]:
    """(peak, time-averaged) fraction of KV blocks allocated."""
    if not result.iterations or result.span <= 0:
        return 0.0, 0.0
    peak = max(it.used_blocks / it.num_blocks for it in result.iterations)
    area = sum(it.used_blocks / it.num_blocks * (it.end - it.start) for it in result.iterations)
    return peak, area / (result.span * result.num_replicas)


def batch_histograms(result: SimulationResult) -> dict[int, dict[str, dict[int, int]]]:
    out: dict[int, dict[str, Counter]] = {}
    for it in result.iterations:
        h = out.setdefault(it.replica, {"batch_size": Counter(), "num_tokens": Counter()})
        h["batch_size"][it.batch_size] += 1
        h["num_tokens"][it.num_tokens] += 1
    return {r: {k: dict(sorted(c.items())) for k, c in h.items()} for r, h in sorted(out.items())}


def _describe(prefix: str, samples: Sequence[float], summary: dict) -> None:
    if not samples:
        return
    summary[f"{prefix}_mean"] = statistics.fmean(samples)
    for q in SUMMARY_QUANTILES:
        summary[f"{prefix}_p{round(q * 100)}"] = percentile(samples, q)


def summarize(result: SimulationResult, spec: ModelSpec | None = None, peak_flops: float | None = None) -> dict:
    per_req = [request_metrics(r, result.static) for r in result.requests]
    summary: dict = {
        "num_requests": len(per_req),
        "span_s": result.span,
        "num_iterations": len(result.iterations),
        "num_preemptions": result.num_preemptions,
        "total_restarts": sum(m.restarts for m in per_req),
        "static_mode": int(result.static),
    }
    if result.span > 0:
        summary["throughput_qps"] = len(per_req) / result.span
    _describe("scheduling_delay", [m.scheduling_delay for m in per_req], summary)
    _describe("ttft", [m.ttft for m in per_req], summary)
    _describe("tbt", [x for m in per_req for x in m.tbt_samples], summary)
    _describe("e2e_latency", [m.e2e_latency for m in per_req], summary)
    _describe("normalized_latency", [m.normalized_latency for m in per_req], summary)
    peak, mean = kv_utilization(result)
    summary["kv_utilization_peak"] = peak
    summary["kv_utilization_mean"] = mean
    if spec is not None and peak_flops is not None:
        summary["mfu"] = mfu(result, spec, peak_flops)
    for rid, busy in enumerate(result.busy_time):
        summary[f"replica{rid}_busy_s"] = busy
        summary[f"replica{rid}_idle_s"] = result.span - busy
    return summary


def _row(m: RequestMetrics) -> dict:
    r = m.record
    return {
        "request_id": r.request_id,
        "replica": r.replica,
        "arrival_time": r.arrival_time,
        "prefill_tokens": r.prefill_tokens,
        "decode_tokens": r.decode_tokens,
        "first_scheduled": r.first_scheduled,
        "first_token_time": r.first_token_time,
        "completion_time": r.completion_time,
        "restarts": r.restarts,
        "recomputed_tokens": r.recomputed_tokens,
        "scheduling_delay": m.scheduling_delay,
        "ttft": m.ttft,
        "e2e_latency": m.e2e_latency,
        "normalized_latency": m.normalized_latency,
        "token_times": list(r.token_times),
    }


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, list):
        return " ".join(repr(float(x)) for x in v)
    return str(v)


def export(result: SimulationResult, out_dir: str | Path, fmt: str = "csv", spec: ModelSpec | None = None, peak_flops: float | None = None) -> list[Path]:
    """Write the per-request table and summary; return the files written."""
    if fmt not in ("csv", "json"):
        raise ValueError(f"unknown export format {fmt!r} (csv, json)")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = [_row(request_metrics(r, result.static)) for r in result.requests]
    summary = summarize(result, spec, peak_flops)
    if fmt == "json":
        path = out_dir / "metrics.json"
        path.write_text(json.dumps({"requests": rows, "summary": summary}, indent=1, sort_keys=True) + "\n")
        return [path]
    req_path = out_dir / "requests.csv"
    with open(req_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REQUEST_COLUMNS)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in REQUEST_COLUMNS])
    sum_path = out_dir / "summary.csv"
    with open(sum_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "value"])
        for k, v in summary.items():
            w.writerow([k, _fmt(v)])
    return [req_path, sum_path]


_INT_COLUMNS = {"replica", "prefill_tokens", "decode_tokens", "restarts", "recomputed_tokens"}


def _parse_number(text: str):
    try:
        return int(text)
    except ValueError:
        return float(text)


def load_export(out_dir: str | Path, fmt: str = "csv") -> tuple[list[dict], dict]:
    """Read back what :func:`export` wrote as (request rows, summary)."""
    out_dir = Path(out_dir)
    if fmt == "json":
        data = json.loads((out_dir / "metrics.json").read_text())
        return data["requests"], data["summary"]
    if fmt != "csv":
        raise ValueError(f"unknown export format {fmt!r} (csv, json)")
    rows = []
    with open(out_dir / "requests.csv", newline="") as fh:
        for raw in csv.DictReader(fh):
            row: dict = {}
            for k, v in raw.items():
                if k == "request_id":
                    row[k] = v
                elif k == "token_times":
                    row[k] = [float(x) for x in v.split()] if v else []
                elif k in _INT_COLUMNS:
                    row[k] = int(v)
                else:
                    row[k] = float(v)
            rows.append(row)
    summary = {}
    with open(out_dir / "summary.csv", newline="") as fh:
        for raw in csv.DictReader(fh):
            summary[raw["metric"]] = _parse_number(raw["value"])
    return rows, summary


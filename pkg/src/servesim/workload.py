"""Request traces: CSV I/O, Poisson arrivals, length capping, synthesis, stats.

Trace CSV header (``arrival_time_s`` may be omitted)::

    request_id,arrival_time_s,prefill_tokens,decode_tokens

Distribution config (YAML or dict) for :func:`synth_trace`::

    prefill: {kind: lognormal, median: 417, p90: 1678, max: 4095}
    decode:  {kind: histogram, values: [50, 100], weights: [0.5, 0.5]}
    max_total_tokens: 4096     # optional cap applied after sampling

A lognormal may be given as ``median`` + ``p90`` or as ``mu`` + ``sigma``.
Percentiles are nearest-rank everywhere.
"""

from __future__ import annotations

import csv
import math
import statistics
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import yaml

TRACE_HEADER = ["request_id", "arrival_time_s", "prefill_tokens", "decode_tokens"]

# standard normal quantile at 0.9
_Z90 = 1.2815515655446004

BUILTIN_WORKLOADS_DIR = Path(__file__).parent / "data" / "workloads"


class TraceError(ValueError):
    pass


@dataclass(frozen=True)
class Request:
    id: str
    arrival_time: float | None
    prefill_tokens: int
    decode_tokens: int

    @property
    def total_tokens(self) -> int:
        return self.prefill_tokens + self.decode_tokens


@dataclass(frozen=True)
class TraceStats:
    num_queries: int
    prefill_mean: float
    prefill_median: float
    prefill_p90: float
    decode_mean: float
    decode_median: float
    decode_p90: float
    pd_ratio_median: float
    pd_ratio_std: float

    def as_row(self) -> dict[str, float]:
        return {
            "# queries": self.num_queries,
            "prefill mean": self.prefill_mean,
            "prefill median": self.prefill_median,
            "prefill p90": self.prefill_p90,
            "decode mean": self.decode_mean,
            "decode median": self.decode_median,
            "decode p90": self.decode_p90,
            "P:D median": self.pd_ratio_median,
            "P:D std dev": self.pd_ratio_std,
        }


def nearest_rank(samples: Sequence[float], q: float) -> float:
    """The ceil(q*n)-th smallest sample (1-based)."""
    if not samples:
        raise ValueError("percentile of an empty sample")
    if not 0 < q <= 1:
        raise ValueError(f"quantile must be in (0, 1], got {q}")
    ordered = sorted(samples)
    rank = max(1, math.ceil(q * len(ordered) - 1e-9))
    return ordered[rank - 1]


def _validate(req: Request, where: str) -> None:
    if req.prefill_tokens < 1:
        raise TraceError(f"{where}: prefill_tokens must be >= 1, got {req.prefill_tokens}")
    if req.decode_tokens < 1:
        raise TraceError(f"{where}: decode_tokens must be >= 1, got {req.decode_tokens}")
    if req.arrival_time is not None and not req.arrival_time >= 0:
        raise TraceError(f"{where}: arrival_time_s must be >= 0, got {req.arrival_time}")


def _sort_key(req: Request):
    return (req.arrival_time if req.arrival_time is not None else 0.0, req.id)


def load_trace(path: str | Path) -> list[Request]:
    path = Path(path)
    requests = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise TraceError(f"{path}: empty file")
        header = [h.strip() for h in header]
        has_arrival = "arrival_time_s" in header
        expected = TRACE_HEADER if has_arrival else [h for h in TRACE_HEADER if h != "arrival_time_s"]
        if header != expected:
            raise TraceError(f"{path}:1: header must be {','.join(TRACE_HEADER)} (arrival optional)")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise TraceError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            rec = dict(zip(header, row))
            try:
                arrival = float(rec["arrival_time_s"]) if has_arrival and rec["arrival_time_s"] != "" else None
                req = Request(
                    id=rec["request_id"],
                    arrival_time=arrival,
                    prefill_tokens=int(rec["prefill_tokens"]),
                    decode_tokens=int(rec["decode_tokens"]),
                )
            except ValueError as exc:
                raise TraceError(f"{path}:{lineno}: {exc}") from exc
            _validate(req, f"{path}:{lineno}")
            requests.append(req)
    if all(r.arrival_time is not None for r in requests):
        requests.sort(key=_sort_key)
    return requests


def save_trace(requests: Sequence[Request], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRACE_HEADER)
        for r in requests:
            arrival = "" if r.arrival_time is None else repr(float(r.arrival_time))
            writer.writerow([r.id, arrival, r.prefill_tokens, r.decode_tokens])


def poisson_arrivals(requests: Sequence[Request], rate_qps: float, seed: int = 0) -> list[Request]:
    """Assign i.i.d. exponential inter-arrival gaps with mean ``1/rate_qps``.

    For a fixed seed the gaps are the same unit-rate draws scaled by
    ``1/rate_qps``, so arrivals at different rates are directly comparable.
    """
    if not rate_qps > 0:
        raise ValueError(f"rate must be positive, got {rate_qps}")
    rng = np.random.default_rng(seed)
    gaps = rng.standard_exponential(len(requests))
    # zero-probability zero draws would tie arrivals
    gaps = np.maximum(gaps, np.finfo(float).tiny)
    times = np.cumsum(gaps) / rate_qps
    return [replace(r, arrival_time=float(t)) for r, t in zip(requests, times)]


def static_arrivals(requests: Sequence[Request]) -> list[Request]:
    """All requests present at t=0 (offline / static workloads)."""
    return [replace(r, arrival_time=0.0) for r in requests]


def cap_total_length(requests: Sequence[Request], max_total: int) -> list[Request]:
    """Trim requests longer than ``max_total``: decode first, then prefill."""
    if max_total < 2:
        raise ValueError("max_total must be >= 2")
    out = []
    for r in requests:
        excess = r.total_tokens - max_total
        if excess <= 0:
            out.append(r)
            continue
        decode = max(1, r.decode_tokens - excess)
        excess -= r.decode_tokens - decode
        prefill = max(1, r.prefill_tokens - excess)
        out.append(replace(r, prefill_tokens=prefill, decode_tokens=decode))
    return out


def compute_stats(requests: Sequence[Request]) -> TraceStats:
    if not requests:
        raise ValueError("cannot compute statistics of an empty trace")
    prefill = [r.prefill_tokens for r in requests]
    decode = [r.decode_tokens for r in requests]
    ratios = [r.prefill_tokens / r.decode_tokens for r in requests]
    return TraceStats(
        num_queries=len(requests),
        prefill_mean=statistics.fmean(prefill),
        prefill_median=nearest_rank(prefill, 0.5),
        prefill_p90=nearest_rank(prefill, 0.9),
        decode_mean=statistics.fmean(decode),
        decode_median=nearest_rank(decode, 0.5),
        decode_p90=nearest_rank(decode, 0.9),
        pd_ratio_median=nearest_rank(ratios, 0.5),
        pd_ratio_std=statistics.pstdev(ratios),
    )


def format_stats_table(rows: Mapping[str, TraceStats]) -> str:
    cols = list(next(iter(rows.values())).as_row()) if rows else []
    lines = ["\t".join(["trace"] + cols)]
    for name, stats in rows.items():
        vals = []
        for v in stats.as_row().values():
            vals.append(str(v) if isinstance(v, int) else f"{v:.2f}")
        lines.append("\t".join([name] + vals))
    return "\n".join(lines) + "\n"


def lognormal_from_quantiles(median: float, p90: float) -> tuple[float, float]:
    if not 0 < median < p90:
        raise ValueError(f"need 0 < median < p90, got median={median}, p90={p90}")
    return math.log(median), math.log(p90 / median) / _Z90


class LengthDistribution:
    def __init__(self, cfg: Mapping):
        kind = cfg.get("kind")
        self.lo = int(cfg.get("min", 1))
        self.hi = int(cfg["max"]) if "max" in cfg else None
        if self.lo < 1 or (self.hi is not None and self.hi < self.lo):
            raise ValueError(f"invalid length bounds min={self.lo} max={self.hi}")
        if kind == "lognormal":
            if "median" in cfg:
                self.mu, self.sigma = lognormal_from_quantiles(float(cfg["median"]), float(cfg["p90"]))
            else:
                self.mu, self.sigma = float(cfg["mu"]), float(cfg["sigma"])
            if not self.sigma > 0:
                raise ValueError(f"lognormal sigma must be positive, got {self.sigma}")
        elif kind == "histogram":
            values = [int(v) for v in cfg["values"]]
            weights = [float(w) for w in cfg.get("weights", [1.0] * len(values))]
            if not values or len(values) != len(weights) or min(values) < 1:
                raise ValueError("histogram needs matching positive values and weights")
            if any(w < 0 for w in weights) or sum(weights) <= 0:
                raise ValueError("histogram weights must be non-negative with positive sum")
            self.values = np.asarray(values)
            self.probs = np.asarray(weights) / sum(weights)
        else:
            raise ValueError(f"unknown length distribution kind {kind!r} (lognormal, histogram)")
        self.kind = kind

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.kind == "lognormal":
            draws = np.rint(rng.lognormal(self.mu, self.sigma, n)).astype(np.int64)
        else:
            draws = rng.choice(self.values, size=n, p=self.probs)
        return np.clip(draws, self.lo, self.hi if self.hi is not None else None)


def load_dist_config(path_or_name: str | Path) -> dict:
    path = Path(path_or_name)
    if not path.exists():
        candidate = BUILTIN_WORKLOADS_DIR / f"{path_or_name}.yaml"
        if not candidate.exists():
            known = ", ".join(sorted(p.stem for p in BUILTIN_WORKLOADS_DIR.glob("*.yaml")))
            raise FileNotFoundError(f"unknown workload {path_or_name!r} (bundled: {known})")
        path = candidate
    return yaml.safe_load(path.read_text())


def synth_trace(dist_config: Mapping, n: int, seed: int = 0) -> list[Request]:
    """Sample ``n`` requests (no arrival times) from independent length laws."""
    if n < 0:
        raise ValueError("n must be non-negative")
    prefill = LengthDistribution(dist_config["prefill"])
    decode = LengthDistribution(dist_config["decode"])
    rng = np.random.default_rng(seed)
    p = prefill.sample(rng, n)
    d = decode.sample(rng, n)
    width = len(str(max(n - 1, 0)))
    requests = [
        Request(id=f"r{i:0{width}d}", arrival_time=None, prefill_tokens=int(a), decode_tokens=int(b))
        for i, (a, b) in enumerate(zip(p, d))
    ]
    cap = dist_config.get("max_total_tokens")
    return cap_total_length(requests, int(cap)) if cap else requests

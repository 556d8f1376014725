"""Deployment configuration search.

For each candidate deployment the search finds the highest Poisson arrival
rate whose P99 scheduling delay stays within a threshold, converts it to
QPS per dollar, checks latency SLOs at a fraction of that capacity, and
ranks the passing configurations. Config evaluations are independent and
may run in worker processes; outputs do not depend on the worker count.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import yaml

from .model_spec import ModelSpec, ParallelismConfig, SpecError, load_model_spec, validate_parallelism
from .profiler import DeviceProfile, generate_profile, load_device
from .runtime_estimator import (
    BatchComposition,
    EstimatorConfig,
    EstimatorError,
    build_lookup_table,
    load_estimator,
    train,
)
from .scheduler import InsufficientMemoryError, Policy, PolicyConfig, RoutingPolicy, SchedulerError
from .sim_core import ClusterConfig, IterationTimer, SimulationError, run
from .workload import Request, cap_total_length, load_dist_config, load_trace, nearest_rank, poisson_arrivals, static_arrivals, synth_trace

# Placeholder rental prices in dollars per GPU-hour; not measured figures.
DEFAULT_COSTS = {"A100-80G": 3.4, "H100-80G": 7.0}

OBJECTIVES = ("qps-per-dollar", "makespan")


class SearchError(ValueError):
    pass


@dataclass(frozen=True)
class DeploymentConfig:
    sku: str
    tp_degree: int
    pp_degree: int
    num_replicas: int
    policy: Policy
    max_batch_size: int
    chunk_size: int | None = None

    @property
    def num_gpus(self) -> int:
        return self.tp_degree * self.pp_degree * self.num_replicas

    @property
    def config_id(self) -> str:
        cid = f"{self.sku}_tp{self.tp_degree}_pp{self.pp_degree}_r{self.num_replicas}_{self.policy.value}_b{self.max_batch_size}"
        return cid + (f"_c{self.chunk_size}" if self.chunk_size is not None else "")

    def parallelism(self) -> ParallelismConfig:
        return ParallelismConfig(self.tp_degree, self.pp_degree, self.num_replicas)

    def policy_config(self) -> PolicyConfig:
        kw = {"policy": self.policy, "max_batch_size": self.max_batch_size}
        if self.chunk_size is not None:
            kw["chunk_size"] = self.chunk_size
        return PolicyConfig(**kw)


@dataclass(frozen=True)
class SearchSpace:
    skus: tuple[str, ...]
    tp_degrees: tuple[int, ...] = (1,)
    pp_degrees: tuple[int, ...] = (1,)
    schedulers: tuple[str, ...] = ("VLLM",)
    batch_sizes: tuple[int, ...] = (128,)
    chunk_sizes: tuple[int, ...] = (512,)
    max_gpus_total: int = 16

    @classmethod
    def from_dict(cls, d: Mapping) -> "SearchSpace":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise SearchError(f"unknown search space keys: {sorted(unknown)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw)


@dataclass(frozen=True)
class SLOs:
    ttft_p90_max: float = 2.0
    tbt_p99_max: float = 0.2
    delay_p99_max: float = 5.0


def enumerate_configs(space: SearchSpace, spec: ModelSpec) -> tuple[list[DeploymentConfig], list[tuple[str, str]]]:
    """All valid deployments in nested knob order, plus (description, reason) skips."""
    configs: list[DeploymentConfig] = []
    skipped: list[tuple[str, str]] = []
    for sku in space.skus:
        for tp in space.tp_degrees:
            for pp in space.pp_degrees:
                desc = f"{sku}_tp{tp}_pp{pp}"
                replicas = space.max_gpus_total // (tp * pp)
                if replicas < 1:
                    skipped.append((desc, f"tp*pp={tp * pp} exceeds the {space.max_gpus_total}-GPU budget"))
                    continue
                try:
                    validate_parallelism(spec, ParallelismConfig(tp, pp, replicas))
                except SpecError as exc:
                    skipped.append((desc, str(exc)))
                    continue
                for sched in space.schedulers:
                    policy = Policy(sched)
                    for bs in space.batch_sizes:
                        chunks = space.chunk_sizes if policy is Policy.SARATHI_SERVE else (None,)
                        for chunk in chunks:
                            configs.append(DeploymentConfig(sku, tp, pp, replicas, policy, bs, chunk))
    if not configs:
        raise SearchError("search space has no valid configurations: " + "; ".join(f"{d}: {r}" for d, r in skipped))
    return configs, skipped


def find_capacity(feasible: Callable[[float], bool], initial_hi: float, tolerance: float = 0.02, min_qps: float | None = None, max_qps: float = 1e7) -> float:
    """Largest rate the monotone predicate accepts, to within ``tolerance``.

    ``hi`` doubles while feasible, then the bracket is bisected until
    ``(hi - lo) / hi <= tolerance``; the feasible end ``lo`` is returned.
    Returns 0 when even ``min_qps`` (default ``initial_hi * 1e-6``) fails.
    """
    if not initial_hi > 0:
        raise ValueError("initial_hi must be positive")
    if not 0 < tolerance < 1:
        raise ValueError("tolerance must be in (0, 1)")
    floor = min_qps if min_qps is not None else initial_hi * 1e-6
    lo, hi = 0.0, initial_hi
    while feasible(hi):
        lo, hi = hi, hi * 2
        if hi > max_qps:
            return lo
    while hi - lo > tolerance * hi:
        if lo == 0.0 and hi < floor:
            return 0.0
        mid = (lo + hi) / 2
        if feasible(mid):
            lo = mid
        else:
            hi = mid
    return lo


def qps_per_dollar(capacity: float, config: DeploymentConfig, costs: Mapping[str, float]) -> float:
    if config.sku not in costs:
        raise SearchError(f"no hourly cost for SKU {config.sku!r}")
    rate = costs[config.sku]
    if not rate > 0:
        raise SearchError(f"cost for {config.sku} must be positive")
    return capacity / (config.num_gpus * rate)


def pareto_frontier(points: Sequence[tuple[float, float]]) -> list[int]:
    """Indices of points not dominated under (lower latency, higher value).

    Input order is preserved. Exact duplicates do not dominate each other.
    """
    order = sorted(range(len(points)), key=lambda i: (points[i][0], -points[i][1]))
    keep = set()
    best = -math.inf
    j = 0
    while j < len(order):
        # group equal latencies: only the highest value(s) can survive
        k = j
        lat = points[order[j]][0]
        while k < len(order) and points[order[k]][0] == lat:
            k += 1
        top = points[order[j]][1]
        if top > best:
            keep.update(i for i in order[j:k] if points[i][1] == top)
            best = top
        j = k
    return [i for i in range(len(points)) if i in keep]


# -- per-config evaluation ------------------------------------------------


@dataclass
class ConfigResult:
    config_id: str
    sku: str
    tp_degree: int
    pp_degree: int
    num_replicas: int
    num_gpus: int
    policy: str
    max_batch_size: int
    chunk_size: int | None
    status: str = "ok"
    reason: str = ""
    capacity_qps: float = 0.0
    qps_per_dollar: float = 0.0
    makespan_s: float | None = None
    requests_per_dollar: float | None = None
    ttft_p90: float | None = None
    tbt_p99: float | None = None
    slo_pass: bool = False
    extra_loads: dict[str, dict[str, float]] = field(default_factory=dict)

    def objective(self, name: str) -> float:
        if name == "makespan":
            return self.requests_per_dollar or 0.0
        return self.qps_per_dollar


@dataclass(frozen=True)
class EvalTask:
    config: DeploymentConfig
    spec: ModelSpec
    device: DeviceProfile
    predictor: object
    template: tuple[Request, ...]
    slos: SLOs
    costs: tuple[tuple[str, float], ...]
    seed: int = 0
    tolerance: float = 0.02
    fractions: tuple[float, ...] = (0.85,)
    objective: str = "qps-per-dollar"
    routing: str = "LeastOutstanding"
    queue_factor: float = 4.0
    probe_span: float = 10.0


def _cluster(task: EvalTask) -> ClusterConfig:
    cfg = task.config
    return ClusterConfig(task.spec, cfg.parallelism(), task.device, cfg.policy_config(), routing=task.routing)


def tile_requests(template: Sequence[Request], n: int) -> list[Request]:
    """The first ``n`` requests of the template repeated end to end."""
    out = []
    for i in range(n):
        r = template[i % len(template)]
        rep = i // len(template)
        out.append(replace(r, id=r.id if rep == 0 else f"{r.id}~{rep}"))
    return out


def probe_size(
    template: Sequence[Request],
    cluster: ClusterConfig,
    queue_factor: float,
    qps: float = 0.0,
    min_span: float = 0.0,
) -> int:
    """Requests per capacity probe.

    A probe must hold several times more requests than the cluster can run
    at once, and its arrivals must last several delay thresholds
    (``min_span`` seconds at rate ``qps``). Otherwise the whole probe drains
    before any backlog can exceed the threshold and every rate looks
    feasible.
    """
    plan = cluster.memory_plan()
    mean_tokens = sum(r.prefill_tokens + r.decode_tokens for r in template) / len(template)
    per_replica = min(cluster.policy.max_batch_size, plan.kv_capacity_tokens / mean_tokens)
    concurrent = per_replica * cluster.parallelism.num_replicas
    by_span = math.ceil(qps * min_span) if math.isfinite(min_span) else 0
    return max(len(template), math.ceil(queue_factor * concurrent), by_span)


def _probe_stats(task: EvalTask, cluster: ClusterConfig, timer, requests: Sequence[Request], qps: float) -> dict[str, float]:
    trace = poisson_arrivals(requests, qps, seed=task.seed)
    res = run(cluster, trace, iteration_time=timer)
    delays = [r.first_scheduled - r.arrival_time for r in res.requests]
    ttft = [r.first_token_time - r.arrival_time for r in res.requests]
    tbt = [b - a for r in res.requests for a, b in zip(r.token_times, r.token_times[1:])]
    return {
        "delay_p99": nearest_rank(delays, 0.99),
        "ttft_p90": nearest_rank(ttft, 0.9),
        "tbt_p99": nearest_rank(tbt, 0.99) if tbt else 0.0,
    }


def initial_rate_guess(timer, template: Sequence[Request], num_replicas: int) -> float:
    """Arrival rate at which every replica would run one mean-prompt prefill per request."""
    mean_prompt = max(1, round(sum(r.prefill_tokens for r in template) / len(template)))
    return num_replicas / timer(BatchComposition(prefill_lengths=[mean_prompt]))


def evaluate_config(task: EvalTask) -> ConfigResult:
    cfg = task.config
    out = ConfigResult(
        config_id=cfg.config_id,
        sku=cfg.sku,
        tp_degree=cfg.tp_degree,
        pp_degree=cfg.pp_degree,
        num_replicas=cfg.num_replicas,
        num_gpus=cfg.num_gpus,
        policy=cfg.policy.value,
        max_batch_size=cfg.max_batch_size,
        chunk_size=cfg.chunk_size,
    )
    costs = dict(task.costs)
    try:
        cluster = _cluster(task)
        timer = IterationTimer(task.predictor, task.spec, cfg.parallelism())
        if task.objective == "makespan":
            res = run(cluster, static_arrivals(task.template), iteration_time=timer, static=True)
            out.makespan_s = res.span
            gpu_hours = res.span / 3600.0 * cfg.num_gpus
            out.requests_per_dollar = len(task.template) / (gpu_hours * costs[cfg.sku])
            out.slo_pass = True
            return out
        cache: dict[float, dict[str, float]] = {}
        span = task.probe_span * task.slos.delay_p99_max

        def stats(q):
            if q not in cache:
                n = probe_size(task.template, cluster, task.queue_factor, q, span)
                cache[q] = _probe_stats(task, cluster, timer, tile_requests(task.template, n), q)
            return cache[q]

        def feasible(q):
            return stats(q)["delay_p99"] <= task.slos.delay_p99_max

        hi0 = initial_rate_guess(timer, task.template, cfg.num_replicas)
        cap = find_capacity(feasible, hi0, task.tolerance)
        out.capacity_qps = cap
        out.qps_per_dollar = qps_per_dollar(cap, cfg, costs)
        if cap <= 0:
            out.status = "infeasible"
            out.reason = f"P99 scheduling delay exceeds {task.slos.delay_p99_max} s at every probed rate"
            return out
        for i, frac in enumerate(task.fractions):
            s = stats(frac * cap)
            if i == 0:
                out.ttft_p90 = s["ttft_p90"]
                out.tbt_p99 = s["tbt_p99"]
                out.slo_pass = s["ttft_p90"] < task.slos.ttft_p90_max and s["tbt_p99"] < task.slos.tbt_p99_max
            else:
                out.extra_loads[f"{frac:g}"] = {"ttft_p90": s["ttft_p90"], "tbt_p99": s["tbt_p99"]}
    except (InsufficientMemoryError, SchedulerError) as exc:
        out.status = "infeasible"
        out.reason = str(exc)
    except (EstimatorError, SimulationError, SearchError, SpecError, KeyError) as exc:
        out.status = "error"
        out.reason = f"{type(exc).__name__}: {exc}"
    return out


def rank_results(results: Sequence[ConfigResult], objective: str = "qps-per-dollar") -> list[ConfigResult]:
    """SLO-passing results, best objective first; ties by config id."""
    ok = [r for r in results if r.status == "ok" and r.slo_pass and r.objective(objective) > 0]
    return sorted(ok, key=lambda r: (-r.objective(objective), r.config_id))


# -- search driver ----------------------------------------------------------


@dataclass
class SearchOutput:
    results: list[ConfigResult]
    ranked: list[ConfigResult]
    skipped: list[tuple[str, str]]
    objective: str

    @property
    def best(self) -> ConfigResult | None:
        return self.ranked[0] if self.ranked else None


def build_predictor(spec: ModelSpec, dev: DeviceProfile, tp_degrees: Sequence[int], with_send_recv: bool, max_batch_size: int = 512):
    records = generate_profile(spec, dev, tp_degrees=tuple(sorted(set(tp_degrees))), with_send_recv=with_send_recv, max_batch_size=max_batch_size)
    return build_lookup_table(train(records, EstimatorConfig()))


def run_search(
    spec: ModelSpec,
    space: SearchSpace,
    template: Sequence[Request],
    slos: SLOs = SLOs(),
    costs: Mapping[str, float] = DEFAULT_COSTS,
    *,
    devices: Mapping[str, DeviceProfile] | None = None,
    predictors: Mapping[str, object] | None = None,
    seed: int = 0,
    workers: int = 1,
    tolerance: float = 0.02,
    fractions: Sequence[float] = (0.85,),
    objective: str = "qps-per-dollar",
    routing: str = "LeastOutstanding",
    queue_factor: float = 4.0,
    probe_span: float = 10.0,
) -> SearchOutput:
    if objective not in OBJECTIVES:
        raise SearchError(f"unknown objective {objective!r} ({', '.join(OBJECTIVES)})")
    if not template:
        raise SearchError("workload template is empty")
    RoutingPolicy(routing)
    configs, skipped = enumerate_configs(space, spec)
    devices = dict(devices or {})
    predictors = dict(predictors or {})
    for sku in space.skus:
        if sku not in devices:
            devices[sku] = load_device(sku)
        if sku not in predictors:
            tps = sorted({c.tp_degree for c in configs if c.sku == sku})
            if tps:
                pp_used = any(c.pp_degree > 1 for c in configs if c.sku == sku)
                predictors[sku] = build_predictor(spec, devices[sku], tps, pp_used, max(max(space.batch_sizes), 1))
    template = tuple(cap_total_length(template, spec.max_context + 1))
    tasks = [
        EvalTask(
            config=c,
            spec=spec,
            device=devices[c.sku],
            predictor=predictors[c.sku],
            template=template,
            slos=slos,
            costs=tuple(sorted(costs.items())),
            seed=seed,
            tolerance=tolerance,
            fractions=tuple(fractions),
            objective=objective,
            routing=routing,
            queue_factor=queue_factor,
            probe_span=probe_span,
        )
        for c in configs
    ]
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(evaluate_config, tasks))
    else:
        results = [evaluate_config(t) for t in tasks]
    return SearchOutput(results, rank_results(results, objective), skipped, objective)


# -- output files -------------------------------------------------------------

RESULT_COLUMNS = [
    "rank",
    "config_id",
    "sku",
    "tp_degree",
    "pp_degree",
    "num_replicas",
    "num_gpus",
    "policy",
    "max_batch_size",
    "chunk_size",
    "status",
    "capacity_qps",
    "qps_per_dollar",
    "makespan_s",
    "requests_per_dollar",
    "ttft_p90",
    "tbt_p99",
    "slo_pass",
    "reason",
]


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _csv_text(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_cell(v) for v in row])
    return buf.getvalue()


def write_search_outputs(out: SearchOutput, out_dir: str | Path) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rank = {r.config_id: i + 1 for i, r in enumerate(out.ranked)}
    rows = []
    for r in out.results:
        d = asdict(r)
        d["rank"] = rank.get(r.config_id)
        rows.append([d[c] for c in RESULT_COLUMNS])
    written = []
    path = out_dir / "results.csv"
    path.write_text(_csv_text(RESULT_COLUMNS, rows))
    written.append(path)

    path = out_dir / "results.json"
    payload = {
        "objective": out.objective,
        "best": out.best.config_id if out.best else None,
        "ranking": [r.config_id for r in out.ranked],
        "results": [asdict(r) | {"rank": rank.get(r.config_id)} for r in out.results],
        "skipped": [{"config": d, "reason": why} for d, why in out.skipped],
    }
    path.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")
    written.append(path)

    if out.objective == "qps-per-dollar":
        evaluated = [r for r in out.results if r.status == "ok" and r.ttft_p90 is not None]
        for metric in ("ttft_p90", "tbt_p99"):
            pts = [(getattr(r, metric), r.qps_per_dollar) for r in evaluated]
            idx = pareto_frontier(pts) if pts else []
            path = out_dir / f"frontier_{metric}.csv"
            path.write_text(
                _csv_text(
                    ["config_id", "latency_metric", "qps_per_dollar", "slo_pass"],
                    [[evaluated[i].config_id, pts[i][0], pts[i][1], evaluated[i].slo_pass] for i in idx],
                )
            )
            written.append(path)

    path = out_dir / "summary.txt"
    path.write_text(format_summary(out))
    written.append(path)
    return written


def format_summary(out: SearchOutput) -> str:
    lines = []
    n_ok = sum(r.status == "ok" for r in out.results)
    lines.append(f"objective: {out.objective}")
    lines.append(f"configurations evaluated: {len(out.results)} ({n_ok} ok, {len(out.skipped)} skipped)")
    lines.append(f"passing SLOs: {len(out.ranked)}")
    if out.best is None:
        lines.append("optimum: none (no configuration passed)")
    else:
        b = out.best
        if out.objective == "makespan":
            lines.append(f"optimum: {b.config_id} ({b.requests_per_dollar:.6g} requests per dollar, makespan {b.makespan_s:.6g} s)")
        else:
            lines.append(
                f"optimum: {b.config_id} (capacity {b.capacity_qps:.6g} QPS, {b.qps_per_dollar:.6g} QPS per $/hr, "
                f"TTFT p90 {b.ttft_p90:.4g} s, TBT p99 {b.tbt_p99:.4g} s)"
            )
    for d, why in out.skipped:
        lines.append(f"skipped {d}: {why}")
    for r in out.results:
        if r.status != "ok":
            lines.append(f"{r.status} {r.config_id}: {r.reason}")
    return "\n".join(lines) + "\n"


# -- search config file -------------------------------------------------------

_SEARCH_KEYS = {"model", "workload", "space", "slos", "costs", "capacity", "routing", "estimators", "seed", "objective"}


@dataclass
class SearchConfig:
    spec: ModelSpec
    space: SearchSpace
    template: list[Request]
    slos: SLOs
    costs: dict[str, float]
    tolerance: float
    fractions: tuple[float, ...]
    probe_span: float
    routing: str
    predictors: dict[str, object]
    devices: dict[str, DeviceProfile]
    seed: int
    objective: str
    paths: dict[str, str]


def load_search_config(path: str | Path, seed: int | None = None) -> SearchConfig:
    """Parse a search YAML file.

    ``workload`` is either ``{trace: file.csv}`` or
    ``{distribution: name-or-file, num_requests: N}``; trace arrival
    times are ignored because the search generates its own.
    """
    path = Path(path)
    data = yaml.safe_load(path.read_text()) or {}
    unknown = set(data) - _SEARCH_KEYS
    if unknown:
        raise SearchError(f"{path}: unknown keys {sorted(unknown)}")
    base = path.parent

    def resolve(ref) -> str:
        p = Path(ref)
        if not p.is_absolute() and (base / p).exists():
            return str(base / p)
        return str(ref)

    paths: dict[str, str] = {}
    if "model" not in data:
        raise SearchError(f"{path}: missing 'model'")
    paths["model"] = resolve(data["model"])
    spec = load_model_spec(paths["model"])
    seed = int(data.get("seed", 0)) if seed is None else seed
    wl = data.get("workload") or {}
    if "trace" in wl:
        paths["trace"] = resolve(wl["trace"])
        template = load_trace(paths["trace"])
        if "num_requests" in wl:
            template = template[: int(wl["num_requests"])]
    elif "distribution" in wl:
        dist = wl["distribution"]
        if isinstance(dist, str):
            paths["distribution"] = resolve(dist)
            dist = load_dist_config(paths["distribution"])
        template = synth_trace(dist, int(wl.get("num_requests", 2000)), seed=seed)
    else:
        raise SearchError(f"{path}: workload needs 'trace' or 'distribution'")
    space = SearchSpace.from_dict(data.get("space") or {})
    cap = data.get("capacity") or {}
    devices = {}
    predictors = {}
    for sku, ref in (data.get("estimators") or {}).items():
        paths[f"estimator:{sku}"] = resolve(ref)
        model, table = load_estimator(paths[f"estimator:{sku}"])
        predictors[sku] = table if table is not None else model
    for sku in space.skus:
        devices[sku] = load_device(resolve(sku) if Path(resolve(sku)).exists() else sku)
    space = SearchSpace(**{**asdict(space), "skus": tuple(devices[s].sku_name for s in space.skus)})
    devices = {d.sku_name: d for d in devices.values()}
    return SearchConfig(
        spec=spec,
        space=space,
        template=template,
        slos=SLOs(**(data.get("slos") or {})),
        costs={**DEFAULT_COSTS, **{k: float(v) for k, v in (data.get("costs") or {}).items()}},
        tolerance=float(cap.get("tolerance", 0.02)),
        fractions=tuple(float(f) for f in cap.get("fractions", [0.85])),
        probe_span=float(cap.get("probe_span", 10.0)),
        routing=str(data.get("routing", "LeastOutstanding")),
        predictors=predictors,
        devices=devices,
        seed=seed,
        objective=str(data.get("objective", "qps-per-dollar")),
        paths=paths,
    )

"""Deterministic discrete-event simulation of a replicated serving cluster."""

from __future__ import annotations

import heapq
import json
from dataclasses import asdict, dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Callable, Mapping, NamedTuple, Sequence

import yaml

from .model_spec import (
    ModelSpec,
    ParallelismConfig,
    derive_operators,
    load_model_spec,
    validate_parallelism,
)
from .profiler import DeviceProfile, load_device
from .runtime_estimator import BatchComposition, predict_batch
from .scheduler import (
    DEFERRED,
    BatchPlan,
    MemoryPlan,
    PolicyConfig,
    RequestState,
    Router,
    RoutingPolicy,
    make_replica_scheduler,
    pipeline_makespan,
    plan_memory,
    split_microbatches,
)
from .workload import Request


class SimulationError(RuntimeError):
    pass


class EventKind(IntEnum):
    ARRIVAL = 0
    BATCH_START = 1
    BATCH_COMPLETE = 2
    REQUEST_COMPLETE = 3


class Event(NamedTuple):
    # seq is unique, so ordering never reaches kind or payload
    time: float
    seq: int
    kind: EventKind
    payload: object = None


@dataclass(frozen=True)
class ClusterConfig:
    model: ModelSpec
    parallelism: ParallelismConfig
    device: DeviceProfile
    policy: PolicyConfig
    routing: RoutingPolicy = RoutingPolicy.ROUND_ROBIN
    cpu_overhead_per_iter: float = 0.0
    activation_reserve: float = 0.10
    defer_threshold: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "routing", RoutingPolicy(self.routing))
        if self.cpu_overhead_per_iter < 0:
            raise ValueError("cpu_overhead_per_iter must be >= 0")
        if not 0 <= self.activation_reserve < 1:
            raise ValueError("activation_reserve must be in [0, 1)")
        validate_parallelism(self.model, self.parallelism)

    def memory_plan(self) -> MemoryPlan:
        return plan_memory(
            self.model,
            self.parallelism,
            self.device,
            block_size=self.policy.block_size,
            activation_reserve=self.activation_reserve,
            watermark_fraction=self.policy.watermark_fraction,
        )

    def to_dict(self) -> dict:
        par = self.parallelism
        return {
            "model": self.model.name,
            "device": self.device.sku_name,
            "parallelism": {"tp_degree": par.tp_degree, "pp_degree": par.pp_degree, "num_replicas": par.num_replicas},
            "policy": self.policy.to_dict(),
            "routing": self.routing.value,
            "cpu_overhead_per_iter": self.cpu_overhead_per_iter,
            "activation_reserve": self.activation_reserve,
            "defer_threshold": self.defer_threshold,
        }


_CLUSTER_KEYS = {
    "model",
    "device",
    "parallelism",
    "policy",
    "routing",
    "cpu_overhead_per_iter",
    "activation_reserve",
    "defer_threshold",
}


def parse_cluster_config(data: Mapping, base_dir: Path | None = None) -> ClusterConfig:
    """Build a config from a mapping; ``model``/``device`` are bundled names or paths."""
    unknown = set(data) - _CLUSTER_KEYS
    if unknown:
        raise ValueError(f"unknown cluster config keys: {sorted(unknown)}")
    for key in ("model", "device"):
        if key not in data:
            raise ValueError(f"cluster config is missing {key!r}")

    def resolve(ref):
        p = Path(ref)
        if base_dir is not None and not p.is_absolute() and (base_dir / p).exists():
            return base_dir / p
        return ref

    par = data.get("parallelism", {})
    unknown = set(par) - set(ParallelismConfig.__dataclass_fields__)
    if unknown:
        raise ValueError(f"unknown parallelism keys: {sorted(unknown)}")
    return ClusterConfig(
        model=load_model_spec(resolve(data["model"])),
        parallelism=ParallelismConfig(**par),
        device=load_device(resolve(data["device"])),
        policy=PolicyConfig.from_dict(data.get("policy", {})),
        routing=data.get("routing", RoutingPolicy.ROUND_ROBIN),
        cpu_overhead_per_iter=float(data.get("cpu_overhead_per_iter", 0.0)),
        activation_reserve=float(data.get("activation_reserve", 0.10)),
        defer_threshold=data.get("defer_threshold"),
    )


def load_cluster_config(path: str | Path) -> ClusterConfig:
    path = Path(path)
    return parse_cluster_config(yaml.safe_load(path.read_text()) or {}, path.parent)


class IterationTimer:
    """Wall time of one replica iteration from a trained predictor.

    With pipeline parallelism the batch is split into one microbatch per
    stage; every stage but the last also pays the activation send.
    """

    def __init__(self, predictor, spec: ModelSpec, par: ParallelismConfig, cpu_overhead: float = 0.0):
        ops = derive_operators(spec, par)
        self.predictor = predictor
        self.stage_ops = [op for op in ops if op.op_name != "send_recv"]
        self.send_ops = [op for op in ops if op.op_name == "send_recv"]
        self.pp = par.pp_degree
        self.cpu_overhead = cpu_overhead

    def __call__(self, batch: BatchComposition) -> float:
        if self.pp == 1:
            return predict_batch(self.predictor, self.stage_ops, batch) + self.cpu_overhead
        mbs = split_microbatches(batch, self.pp)
        base = [predict_batch(self.predictor, self.stage_ops, mb) for mb in mbs]
        send = [predict_batch(self.predictor, self.send_ops, mb) for mb in mbs]
        rows = [[b + (s if stage < self.pp - 1 else 0.0) for b, s in zip(base, send)] for stage in range(self.pp)]
        return pipeline_makespan(rows) + self.cpu_overhead


@dataclass
class RequestRecord:
    request_id: str
    replica: int
    arrival_time: float
    prefill_tokens: int
    decode_tokens: int
    first_scheduled: float
    first_token_time: float
    completion_time: float
    restarts: int
    recomputed_tokens: int
    token_times: list[float]


@dataclass
class IterationRecord:
    replica: int
    start: float
    end: float
    batch_size: int
    num_prefills: int
    prefill_tokens: int
    num_decodes: int
    decode_context_tokens: int
    # sum over prefills of chunk * (cached context + chunk / 2)
    prefill_attention_work: float
    used_blocks: int
    num_blocks: int

    @property
    def num_tokens(self) -> int:
        return self.prefill_tokens + self.num_decodes


@dataclass
class SimulationResult:
    requests: list[RequestRecord]
    iterations: list[IterationRecord]
    busy_time: list[float]
    span: float
    num_replicas: int
    devices_per_replica: int
    num_preemptions: int
    static: bool = False
    event_log: list[str] = field(default_factory=list)

    @property
    def idle_time(self) -> list[float]:
        return [self.span - b for b in self.busy_time]

    def to_dict(self) -> dict:
        d = asdict(self)
        return d


def _composition_summary(comp: BatchComposition) -> dict:
    return {
        "prefills": list(comp.prefill_lengths),
        "prefill_contexts": list(comp.prefill_contexts),
        "decode_contexts": list(comp.decode_context_lengths),
    }


class Simulator:
    def __init__(
        self,
        cluster: ClusterConfig,
        trace: Sequence[Request],
        iteration_time: Callable[[BatchComposition], float],
        record_events: bool = False,
        memory_plan: MemoryPlan | None = None,
    ):
        self.cluster = cluster
        self.iteration_time = iteration_time
        self.record_events = record_events
        spec = cluster.model
        ordered = sorted(trace, key=lambda r: (r.arrival_time if r.arrival_time is not None else -1.0, r.id))
        ids = set()
        for r in ordered:
            if r.arrival_time is None:
                raise SimulationError(f"request {r.id} has no arrival time")
            if r.id in ids:
                raise SimulationError(f"duplicate request id {r.id}")
            ids.add(r.id)
            if r.prefill_tokens + r.decode_tokens - 1 > spec.max_context:
                raise SimulationError(
                    f"request {r.id} needs {r.prefill_tokens + r.decode_tokens - 1} tokens of context; "
                    f"{spec.name} supports {spec.max_context}"
                )
        self.states = [RequestState(request=r, key=i) for i, r in enumerate(ordered)]
        plan = memory_plan or cluster.memory_plan()
        n = cluster.parallelism.num_replicas
        self.replicas = [make_replica_scheduler(cluster.policy, plan, i) for i in range(n)]
        self.router = Router(
            cluster.routing, n, cluster.defer_threshold or cluster.policy.max_batch_size
        )
        self.busy = [False] * n
        self.start_pending = [False] * n
        self.busy_time = [0.0] * n
        self.queue: list[Event] = []
        self.seq = 0
        self.now = 0.0
        self.iterations: list[IterationRecord] = []
        self.events: list[str] = []
        self.completed = 0
        for s in self.states:
            self.push(s.request.arrival_time, EventKind.ARRIVAL, s)

    def push(self, time: float, kind: EventKind, payload=None) -> None:
        if time < self.now:
            raise SimulationError(f"event at {time} scheduled in the past ({self.now})")
        heapq.heappush(self.queue, Event(time, self.seq, kind, payload))
        self.seq += 1

    def _log(self, text: str) -> None:
        if self.record_events:
            self.events.append(f"{self.now:.9f} {text}")

    def _outstanding(self) -> list[int]:
        return [r.num_outstanding for r in self.replicas]

    def _assign(self, state: RequestState, rid: int) -> None:
        self.replicas[rid].add_request(state)
        self._log(f"replica={rid} enqueue id={state.request.id}")
        self._kick(rid)

    def _kick(self, rid: int) -> None:
        if not self.busy[rid] and not self.start_pending[rid] and self.replicas[rid].has_work():
            self.start_pending[rid] = True
            self.push(self.now, EventKind.BATCH_START, rid)

    def _drain_router(self) -> None:
        for state, rid in self.router.drain(self._outstanding()):
            self._assign(state, rid)

    def step(self) -> Event:
        ev = heapq.heappop(self.queue)
        if ev.time < self.now:
            raise SimulationError(f"time regression: {ev.time} < {self.now}")
        self.now = ev.time
        handler = {
            EventKind.ARRIVAL: self._on_arrival,
            EventKind.BATCH_START: self._on_batch_start,
            EventKind.BATCH_COMPLETE: self._on_batch_complete,
            EventKind.REQUEST_COMPLETE: self._on_request_complete,
        }[ev.kind]
        handler(ev.payload)
        return ev

    def _on_arrival(self, state: RequestState) -> None:
        rid = self.router.route(state, self._outstanding())
        if rid == DEFERRED:
            self._log(f"pool id={state.request.id}")
            self._drain_router()
        else:
            self._assign(state, rid)

    def _on_batch_start(self, rid: int) -> None:
        self.start_pending[rid] = False
        if self.busy[rid]:
            return
        replica = self.replicas[rid]
        plan = replica.schedule(self.now)
        if plan is None:
            if replica.has_work():
                raise SimulationError(f"replica {rid} stalled with pending work")
            return
        latency = self.iteration_time(plan.composition)
        if not latency > 0:
            raise SimulationError(f"non-positive iteration time {latency}")
        comp = plan.composition
        work = sum(p * (c + p / 2) for p, c in zip(comp.prefill_lengths, comp.prefill_contexts))
        rec = IterationRecord(
            replica=rid,
            start=self.now,
            end=self.now + latency,
            batch_size=plan.size,
            num_prefills=len(plan.prefills),
            prefill_tokens=sum(comp.prefill_lengths),
            num_decodes=len(plan.decodes),
            decode_context_tokens=sum(comp.decode_context_lengths),
            prefill_attention_work=work,
            used_blocks=replica.blocks.used_blocks,
            num_blocks=replica.blocks.num_blocks,
        )
        self.iterations.append(rec)
        self.busy[rid] = True
        self.busy_time[rid] += latency
        if self.record_events:
            self._log(f"replica={rid} start {json.dumps(_composition_summary(comp))}")
        self.push(rec.end, EventKind.BATCH_COMPLETE, (rid, plan))

    def _on_batch_complete(self, payload: tuple[int, BatchPlan]) -> None:
        rid, plan = payload
        self.busy[rid] = False
        finished = self.replicas[rid].complete(plan, self.now)
        self._log(f"replica={rid} complete size={plan.size} finished={len(finished)}")
        for s in finished:
            self.push(self.now, EventKind.REQUEST_COMPLETE, s)
        if self.router.pool:
            self._drain_router()
        self._kick(rid)

    def _on_request_complete(self, state: RequestState) -> None:
        self.completed += 1
        self._log(f"replica={state.replica} done id={state.request.id}")

    def run(self) -> SimulationResult:
        while self.queue:
            self.step()
        if self.completed != len(self.states):
            raise SimulationError(f"{len(self.states) - self.completed} requests never completed")
        return self.result()

    def result(self) -> SimulationResult:
        records = [
            RequestRecord(
                request_id=s.request.id,
                replica=s.replica,
                arrival_time=s.request.arrival_time,
                prefill_tokens=s.request.prefill_tokens,
                decode_tokens=s.request.decode_tokens,
                first_scheduled=s.first_scheduled,
                first_token_time=s.token_times[0],
                completion_time=s.completion,
                restarts=s.restarts,
                recomputed_tokens=s.recomputed_tokens,
                token_times=list(s.token_times),
            )
            for s in self.states
        ]
        par = self.cluster.parallelism
        return SimulationResult(
            requests=records,
            iterations=self.iterations,
            busy_time=list(self.busy_time),
            span=self.now,
            num_replicas=par.num_replicas,
            devices_per_replica=par.devices_per_replica,
            num_preemptions=sum(r.num_preemptions for r in self.replicas),
            event_log=self.events,
        )


def run(
    cluster: ClusterConfig,
    trace: Sequence[Request],
    estimator=None,
    *,
    iteration_time: Callable[[BatchComposition], float] | None = None,
    record_events: bool = False,
    static: bool = False,
) -> SimulationResult:
    """Simulate ``trace`` to completion.

    Iteration latency comes from ``iteration_time`` when given, else from
    ``estimator`` (an :class:`EstimatorModel` or :class:`LookupTable`).
    CPU overhead is added only on the estimator path; a custom
    ``iteration_time`` owns its whole latency.
    """
    if iteration_time is None:
        if estimator is None:
            raise ValueError("need an estimator or an iteration_time function")
        iteration_time = IterationTimer(estimator, cluster.model, cluster.parallelism, cluster.cpu_overhead_per_iter)
    sim = Simulator(cluster, trace, iteration_time, record_events=record_events)
    result = sim.run()
    result.static = static
    return result

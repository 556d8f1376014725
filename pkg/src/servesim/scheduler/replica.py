"""Per-replica iteration-level batching policies over a paged KV-cache.

Every policy shares one request life cycle:

* a request waits until admitted, then runs its prefill (whole or in chunks);
  finishing the prefill emits the first output token;
* each later iteration that includes the request as a decode emits one token;
* a preempted request loses all its KV blocks and goes back to the waiting
  queue; on readmission it recomputes a prefill over its prompt plus the
  tokens it already emitted, which emits the next token.

Blocks are reserved when a batch is planned, before it executes. Ordering is
FCFS by arrival time, then request id (the ``key`` assigned by the caller).
"""

from __future__ import annotations

import bisect
from collections import deque
from dataclasses import dataclass, field
from enum import Enum

from ..runtime_estimator import BatchComposition
from ..workload import Request
from .memory import BlockManager, MemoryPlan, SchedulerError


class Policy(str, Enum):
    FASTER_TRANSFORMER = "FasterTransformer"
    ORCA_PLUS = "OrcaPlus"
    VLLM = "VLLM"
    SARATHI_SERVE = "SarathiServe"
    LIGHT_LLM = "LightLLM"


@dataclass(frozen=True)
class PolicyConfig:
    policy: Policy = Policy.VLLM
    max_batch_size: int = 128
    max_tokens_per_iter: int = 4096
    chunk_size: int = 512
    block_size: int = 16
    watermark_fraction: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "policy", Policy(self.policy))
        for name in ("max_batch_size", "max_tokens_per_iter", "chunk_size", "block_size"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0 <= self.watermark_fraction < 1:
            raise ValueError("watermark_fraction must be in [0, 1)")

    @property
    def token_limit(self) -> int:
        if self.policy is Policy.SARATHI_SERVE:
            return self.chunk_size
        return self.max_tokens_per_iter

    def to_dict(self) -> dict:
        return {
            "policy": self.policy.value,
            "max_batch_size": self.max_batch_size,
            "max_tokens_per_iter": self.max_tokens_per_iter,
            "chunk_size": self.chunk_size,
            "block_size": self.block_size,
            "watermark_fraction": self.watermark_fraction,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown policy keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(eq=False)
class RequestState:
    request: Request
    key: int
    prefill_target: int = 0
    prefill_done: int = 0
    kv_tokens: int = 0
    emitted: int = 0
    restarts: int = 0
    # every prefill token run so far, including passes lost to preemption
    prefill_processed: int = 0
    replica: int | None = None
    first_scheduled: float | None = None
    token_times: list[float] = field(default_factory=list)
    completion: float | None = None

    def __post_init__(self):
        if not self.prefill_target:
            self.prefill_target = self.request.prefill_tokens

    @property
    def recomputed_tokens(self) -> int:
        return max(0, self.prefill_processed - self.request.prefill_tokens)

    @property
    def in_prefill(self) -> bool:
        return self.prefill_done < self.prefill_target

    @property
    def finished(self) -> bool:
        return self.emitted >= self.request.decode_tokens

    @property
    def peak_kv_tokens(self) -> int:
        # the last emitted token is never fed back
        return self.request.prefill_tokens + self.request.decode_tokens - 1


@dataclass
class BatchPlan:
    prefills: list[tuple[RequestState, int]]
    decodes: list[RequestState]
    composition: BatchComposition

    @property
    def total_current_tokens(self) -> int:
        return sum(c for _, c in self.prefills) + len(self.decodes)

    @property
    def size(self) -> int:
        return len(self.prefills) + len(self.decodes)

    def members(self) -> list[RequestState]:
        return [s for s, _ in self.prefills] + list(self.decodes)


def make_plan(prefills: list[tuple[RequestState, int]], decodes: list[RequestState]) -> BatchPlan:
    comp = BatchComposition(
        prefill_lengths=[c for _, c in prefills],
        decode_context_lengths=[s.kv_tokens + 1 for s in decodes],
        prefill_contexts=[s.prefill_done for s, _ in prefills],
    )
    return BatchPlan(list(prefills), list(decodes), comp)


def _key(s: RequestState) -> int:
    return s.key


class ReplicaScheduler:
    """Shared queue, memory and completion handling; subclasses plan batches."""

    def __init__(self, config: PolicyConfig, plan: MemoryPlan, replica_id: int = 0):
        self.config = config
        self.replica_id = replica_id
        self.blocks = BlockManager(plan)
        self.waiting: list[RequestState] = []
        self.running: list[RequestState] = []
        self.num_preemptions = 0

    @property
    def num_outstanding(self) -> int:
        return len(self.waiting) + sum(1 for s in self.running if not s.finished)

    def has_work(self) -> bool:
        return bool(self.waiting) or any(not s.finished for s in self.running)

    def add_request(self, state: RequestState) -> None:
        need = self.blocks.blocks_for(self.admission_tokens_needed(state))
        if need > self.blocks.num_blocks - self.blocks.watermark:
            raise SchedulerError(
                f"request {state.request.id} needs {need} KV blocks but replica "
                f"{self.replica_id} can hold {self.blocks.num_blocks - self.blocks.watermark}"
            )
        state.replica = self.replica_id
        bisect.insort(self.waiting, state, key=_key)

    def admission_tokens_needed(self, state: RequestState) -> int:
        return state.peak_kv_tokens

    # -- planning -------------------------------------------------------

    def schedule(self, now: float) -> BatchPlan | None:
        plan = self._plan()
        if plan is None or plan.size == 0:
            return None
        if plan.size > self.config.max_batch_size:
            raise SchedulerError(f"batch of {plan.size} exceeds max_batch_size")
        for s in plan.members():
            if s.first_scheduled is None:
                s.first_scheduled = now
        return plan

    def _plan(self) -> BatchPlan | None:
        raise NotImplementedError

    def _preempt(self, victim: RequestState) -> None:
        self.blocks.free(victim.key)
        self.running.remove(victim)
        victim.prefill_target = victim.request.prefill_tokens + victim.emitted
        victim.prefill_done = 0
        victim.kv_tokens = 0
        victim.restarts += 1
        self.num_preemptions += 1
        bisect.insort(self.waiting, victim, key=_key)

    def _make_room(self, s: RequestState, need: int, protected: list[RequestState], queue=None) -> bool:
        """Preempt latest-arrived unprotected running requests until ``need`` blocks are free."""
        while need > self.blocks.free_blocks:
            keep = {id(v) for v in protected}
            victims = [v for v in self.running if v is not s and id(v) not in keep]
            if not victims:
                return False
            victim = max(victims, key=_key)
            if queue is not None and victim in queue:
                queue.remove(victim)
            self._preempt(victim)
        return True

    def _reserve_decodes(self, candidates: list[RequestState], limit: int) -> list[RequestState]:
        """Give up to ``limit`` candidates a slot for one more token.

        When blocks run out the latest-arrived unscheduled running request is
        preempted; if none is left the requester itself is preempted.
        """
        scheduled: list[RequestState] = []
        queue = deque(candidates)
        blocks = self.blocks
        bs, alloc = blocks.block_size, blocks.allocated
        while queue and len(scheduled) < limit:
            s = queue.popleft()
            need = -(-(s.kv_tokens + 1) // bs) - alloc.get(s.key, 0)
            if need > 0:
                if need > blocks.free_blocks and not self._make_room(s, need, scheduled, queue):
                    self._preempt(s)
                    continue
                blocks.grow_to(s.key, s.kv_tokens + 1)
            scheduled.append(s)
        return scheduled

    def _admit_full_prompts(self, budget: int, slots: int, alone_ok: bool) -> list[tuple[RequestState, int]]:
        """FCFS whole-prompt admission within token, slot and memory budgets."""
        admitted: list[tuple[RequestState, int]] = []
        used = 0
        while self.waiting and len(admitted) < slots:
            s = self.waiting[0]
            n = s.prefill_target
            if used + n > budget and not (alone_ok and not admitted and used == 0):
                break
            if not self.blocks.can_allocate(self.blocks.blocks_for(self._reserve_tokens(s))):
                break
            self.waiting.pop(0)
            self.blocks.grow_to(s.key, self._reserve_tokens(s))
            bisect.insort(self.running, s, key=_key)
            admitted.append((s, n))
            used += n
        return admitted

    def _reserve_tokens(self, s: RequestState) -> int:
        return s.prefill_target

    # -- completion -----------------------------------------------------

    def complete(self, plan: BatchPlan, now: float) -> list[RequestState]:
        """Apply an executed batch; return requests that just finished."""
        finished = []
        for s, chunk in plan.prefills:
            s.prefill_done += chunk
            s.prefill_processed += chunk
            s.kv_tokens = s.prefill_done
            if s.prefill_done == s.prefill_target:
                s.emitted += 1
                s.token_times.append(now)
            elif s.prefill_done > s.prefill_target:
                raise SchedulerError(f"request {s.request.id} over-prefilled")
        for s in plan.decodes:
            s.kv_tokens += 1
            s.emitted += 1
            s.token_times.append(now)
        for s in plan.members():
            if s.finished and s.completion is None:
                s.completion = now
                finished.append(s)
        self._release(finished)
        return finished

    def _release(self, finished: list[RequestState]) -> None:
        for s in finished:
            self.blocks.free(s.key)
            self.running.remove(s)

    def check_invariants(self) -> None:
        b = self.blocks
        if sum(b.allocated.values()) + b.free_blocks != b.num_blocks or b.free_blocks < 0:
            raise SchedulerError("block accounting broken")
        for s in self.running:
            if b.allocated.get(s.key, 0) * b.block_size < s.kv_tokens:
                raise SchedulerError(f"request {s.request.id} holds fewer slots than its context")
        if {id(s) for s in self.waiting} & {id(s) for s in self.running}:
            raise SchedulerError("request both waiting and running")


class VLLMScheduler(ReplicaScheduler):
    """Prefill-first: whole-prompt prefill batches preempt decoding entirely."""

    def _plan(self):
        cfg = self.config
        if self.waiting:
            while self.blocks.free_blocks < self.blocks.watermark and self.running:
                self._preempt(max(self.running, key=_key))
            slots = cfg.max_batch_size - len(self.running)
            admitted = self._admit_full_prompts(cfg.max_tokens_per_iter, slots, alone_ok=True)
            if admitted:
                return make_plan(admitted, [])
        decodes = self._reserve_decodes(list(self.running), cfg.max_batch_size)
        return make_plan([], decodes)


class OrcaPlusScheduler(ReplicaScheduler):
    """Mixed batches: new whole prompts first, then decodes, under one token budget."""

    def _plan(self):
        cfg = self.config
        running_before = list(self.running)
        slots = cfg.max_batch_size - len(running_before)
        admitted = self._admit_full_prompts(cfg.max_tokens_per_iter, slots, alone_ok=True)
        budget = cfg.max_tokens_per_iter - sum(c for _, c in admitted)
        decodes = self._reserve_decodes(running_before, max(0, budget))
        # a preempted decode may have been a just-admitted prompt's victim
        admitted = [(s, c) for s, c in admitted if s in self.running]
        return make_plan(admitted, decodes)


class LightLLMScheduler(OrcaPlusScheduler):
    """OrcaPlus with token-granular KV allocation (block size 1)."""

    def __init__(self, config: PolicyConfig, plan: MemoryPlan, replica_id: int = 0):
        super().__init__(config, plan.with_block_size(1), replica_id)


class SarathiScheduler(ReplicaScheduler):
    """Decodes first, then prefill chunks filling the budget up to chunk_size."""

    def _plan(self):
        cfg = self.config
        budget = cfg.chunk_size
        decoding = [s for s in self.running if not s.in_prefill]
        decodes = self._reserve_decodes(decoding, min(budget, cfg.max_batch_size))
        budget -= len(decodes)
        chunks: list[tuple[RequestState, int]] = []
        queue = [s for s in self.running if s.in_prefill]
        while queue and budget > 0 and len(decodes) + len(chunks) < cfg.max_batch_size:
            s = queue.pop(0)
            c = min(s.prefill_target - s.prefill_done, budget)
            scheduled = decodes + [x for x, _ in chunks]
            if not self._make_room(s, self.blocks.extra_blocks(s.key, s.prefill_done + c), scheduled, queue):
                self._preempt(s)
                continue
            self.blocks.grow_to(s.key, s.prefill_done + c)
            chunks.append((s, c))
            budget -= c
        while self.waiting and budget > 0 and len(self.running) < cfg.max_batch_size:
            s = self.waiting[0]
            c = min(s.prefill_target, budget)
            if not self.blocks.can_allocate(self.blocks.blocks_for(c)):
                break
            self.waiting.pop(0)
            self.blocks.grow_to(s.key, c)
            bisect.insort(self.running, s, key=_key)
            chunks.append((s, c))
            budget -= c
        return make_plan(chunks, decodes)


class FasterTransformerScheduler(ReplicaScheduler):
    """Request-level batching: a batch keeps its members until all finish.

    Each member reserves KV for its whole prompt and output at formation, so
    preemption never happens.
    """

    def _reserve_tokens(self, s):
        return s.peak_kv_tokens

    def _plan(self):
        cfg = self.config
        if self.running:
            active = [s for s in self.running if not s.finished]
            return make_plan([], active)
        admitted = self._admit_full_prompts(cfg.max_tokens_per_iter, cfg.max_batch_size, alone_ok=True)
        return make_plan(admitted, [])

    def _release(self, finished):
        if all(s.finished for s in self.running):
            for s in self.running:
                self.blocks.free(s.key)
            self.running = []


SCHEDULERS = {
    Policy.FASTER_TRANSFORMER: FasterTransformerScheduler,
    Policy.ORCA_PLUS: OrcaPlusScheduler,
    Policy.VLLM: VLLMScheduler,
    Policy.SARATHI_SERVE: SarathiScheduler,
    Policy.LIGHT_LLM: LightLLMScheduler,
}


def make_replica_scheduler(config: PolicyConfig, plan: MemoryPlan, replica_id: int = 0) -> ReplicaScheduler:
    return SCHEDULERS[config.policy](config, plan, replica_id)

from .memory import BlockManager, InsufficientMemoryError, MemoryPlan, SchedulerError, plan_from_bytes, plan_memory
from .pipeline import pipeline_makespan, split_microbatches
from .replica import (
    BatchPlan,
    Policy,
    PolicyConfig,
    ReplicaScheduler,
    RequestState,
    make_plan,
    make_replica_scheduler,
)
from .router import DEFERRED, Router, RoutingPolicy, least_loaded

__all__ = [
    "BatchPlan",
    "BlockManager",
    "DEFERRED",
    "InsufficientMemoryError",
    "MemoryPlan",
    "Policy",
    "PolicyConfig",
    "ReplicaScheduler",
    "RequestState",
    "Router",
    "RoutingPolicy",
    "SchedulerError",
    "least_loaded",
    "make_plan",
    "make_replica_scheduler",
    "pipeline_makespan",
    "plan_from_bytes",
    "plan_memory",
    "split_microbatches",
]

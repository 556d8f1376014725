"""Global request routing across replicas."""

from __future__ import annotations

from collections import deque
from enum import Enum
from typing import Sequence


class RoutingPolicy(str, Enum):
    ROUND_ROBIN = "RoundRobin"
    LEAST_OUTSTANDING = "LeastOutstanding"
    DEFERRED = "Deferred"


DEFERRED = "Deferred"


class Router:
    """Assigns arriving requests to replicas.

    ``outstanding`` arguments are per-replica counts of waiting plus
    unfinished running requests, indexed by replica id. Under ``Deferred``
    requests sit in a global pool until some replica's count drops below
    ``defer_threshold``; they then go to the least loaded such replica.
    """

    def __init__(self, policy: RoutingPolicy | str, num_replicas: int, defer_threshold: int = 128):
        if num_replicas < 1:
            raise ValueError("need at least one replica")
        if defer_threshold < 1:
            raise ValueError("defer_threshold must be >= 1")
        self.policy = RoutingPolicy(policy)
        self.num_replicas = num_replicas
        self.defer_threshold = defer_threshold
        self._next = 0
        self.pool: deque = deque()

    def route(self, item, outstanding: Sequence[int]):
        """Replica id for ``item``, or :data:`DEFERRED` if it joined the pool."""
        if len(outstanding) != self.num_replicas:
            raise ValueError("outstanding counts must cover every replica")
        if self.policy is RoutingPolicy.ROUND_ROBIN:
            rid = self._next
            self._next = (self._next + 1) % self.num_replicas
            return rid
        if self.policy is RoutingPolicy.LEAST_OUTSTANDING:
            return least_loaded(outstanding)
        self.pool.append(item)
        return DEFERRED

    def drain(self, outstanding: Sequence[int]) -> list[tuple[object, int]]:
        """Release pooled items to replicas that fell below the threshold."""
        counts = list(outstanding)
        out = []
        while self.pool:
            rid = least_loaded(counts)
            if counts[rid] >= self.defer_threshold:
                break
            out.append((self.pool.popleft(), rid))
            counts[rid] += 1
        return out


def least_loaded(outstanding: Sequence[int]) -> int:
    # min() keeps the first minimum, so ties go to the lowest id
    return min(range(len(outstanding)), key=outstanding.__getitem__)

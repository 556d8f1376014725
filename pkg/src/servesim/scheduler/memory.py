"""KV-cache memory planning and paged block bookkeeping."""

from __future__ import annotations

from dataclasses import dataclass

from ..model_spec import ModelSpec, ParallelismConfig, kv_bytes_per_token_per_device, param_bytes_per_stage


class InsufficientMemoryError(ValueError):
    pass


class SchedulerError(RuntimeError):
    """Scheduler state invariant violated (a bug, not a user error)."""


@dataclass(frozen=True)
class MemoryPlan:
    kv_capacity_tokens: int
    block_size: int
    num_blocks: int
    watermark_blocks: int

    def __post_init__(self):
        if self.kv_capacity_tokens != self.num_blocks * self.block_size:
            raise ValueError("kv_capacity_tokens must equal num_blocks * block_size")

    def with_block_size(self, block_size: int) -> "MemoryPlan":
        """Same byte budget re-cut into blocks of ``block_size`` tokens."""
        num_blocks = self.kv_capacity_tokens // block_size
        frac = self.watermark_blocks / self.num_blocks if self.num_blocks else 0.0
        return MemoryPlan(num_blocks * block_size, block_size, num_blocks, int(frac * num_blocks))


def plan_from_bytes(free_bytes: float, kv_bytes_per_token: int, block_size: int = 16, watermark_fraction: float = 0.01) -> MemoryPlan:
    if block_size < 1:
        raise ValueError("block_size must be >= 1")
    if free_bytes <= 0:
        raise InsufficientMemoryError("insufficient device memory: no room left for the KV-cache")
    num_blocks = int(free_bytes // (block_size * kv_bytes_per_token))
    if num_blocks < 1:
        raise InsufficientMemoryError(
            "insufficient device memory: KV-cache cannot hold a single block"
        )
    return MemoryPlan(
        kv_capacity_tokens=num_blocks * block_size,
        block_size=block_size,
        num_blocks=num_blocks,
        watermark_blocks=int(watermark_fraction * num_blocks),
    )


def plan_memory(spec: ModelSpec, par: ParallelismConfig, dev, block_size: int = 16, activation_reserve: float = 0.10, watermark_fraction: float = 0.01) -> MemoryPlan:
    """KV blocks left on the most loaded device after weights and activations."""
    params = max(param_bytes_per_stage(spec, par))
    if params >= dev.device_mem:
        raise InsufficientMemoryError(
            f"insufficient device memory: {params / 2**30:.1f} GiB of parameters per device "
            f"on a {dev.device_mem / 2**30:.0f} GiB {dev.sku_name}"
        )
    free = dev.device_mem - params - activation_reserve * dev.device_mem
    return plan_from_bytes(free, kv_bytes_per_token_per_device(spec, par), block_size, watermark_fraction)


class BlockManager:
    """Counts paged KV blocks per request; block identities are irrelevant here."""

    def __init__(self, plan: MemoryPlan):
        self.plan = plan
        self.block_size = plan.block_size
        self.num_blocks = plan.num_blocks
        self.watermark = plan.watermark_blocks
        self.free_blocks = plan.num_blocks
        self.allocated: dict[int, int] = {}
        self.peak_used = 0

    @property
    def used_blocks(self) -> int:
        return self.num_blocks - self.free_blocks

    def blocks_for(self, tokens: int) -> int:
        return -(-tokens // self.block_size)

    def extra_blocks(self, key: int, tokens: int) -> int:
        """New blocks ``key`` needs so that ``tokens`` KV entries fit."""
        return max(0, self.blocks_for(tokens) - self.allocated.get(key, 0))

    def can_allocate(self, n: int, watermark: bool = True) -> bool:
        reserve = self.watermark if watermark else 0
        return self.free_blocks - n >= reserve

    def grow_to(self, key: int, tokens: int) -> None:
        n = self.extra_blocks(key, tokens)
        if n > self.free_blocks:
            raise SchedulerError(f"KV oversubscribed: need {n} blocks, {self.free_blocks} free")
        if n:
            self.allocated[key] = self.allocated.get(key, 0) + n
            self.free_blocks -= n
            self.peak_used = max(self.peak_used, self.used_blocks)

    def free(self, key: int) -> int:
        n = self.allocated.pop(key, 0)
        self.free_blocks += n
        return n

"""Synchronous pipeline-parallel iteration timing."""

from __future__ import annotations

from typing import Sequence

from ..runtime_estimator import BatchComposition


def split_microbatches(batch: BatchComposition, num_microbatches: int) -> list[BatchComposition]:
    """Partition a batch into token-balanced microbatches.

    Items are placed largest first onto the currently lightest microbatch;
    ties go to the lowest index. Empty microbatches are dropped.
    """
    if num_microbatches < 1:
        raise ValueError("num_microbatches must be >= 1")
    if num_microbatches == 1:
        return [batch]
    items = [("p", i, n) for i, n in enumerate(batch.prefill_lengths)]
    items += [("d", i, 1) for i in range(len(batch.decode_context_lengths))]
    items.sort(key=lambda it: (-it[2], it[0], it[1]))
    loads = [0] * num_microbatches
    bins: list[list] = [[] for _ in range(num_microbatches)]
    for it in items:
        m = min(range(num_microbatches), key=loads.__getitem__)
        bins[m].append(it)
        loads[m] += it[2]
    out = []
    for b in bins:
        if not b:
            continue
        pre = sorted(i for kind, i, _ in b if kind == "p")
        dec = sorted(i for kind, i, _ in b if kind == "d")
        out.append(
            BatchComposition(
                prefill_lengths=[batch.prefill_lengths[i] for i in pre],
                decode_context_lengths=[batch.decode_context_lengths[i] for i in dec],
                prefill_contexts=[batch.prefill_contexts[i] for i in pre],
            )
        )
    return out


def pipeline_makespan(stage_times: Sequence[Sequence[float]]) -> float:
    """Finish time of the last microbatch on the last stage.

    ``stage_times[s][m]`` is the time stage ``s`` spends on microbatch ``m``.
    A stage starts a microbatch once the previous stage has handed it over
    and the stage itself is free.
    """
    if not stage_times or not stage_times[0]:
        return 0.0
    num_mb = len(stage_times[0])
    prev = [0.0] * num_mb
    for row in stage_times:
        if len(row) != num_mb:
            raise ValueError("every stage needs a time for every microbatch")
        cur = []
        t = 0.0
        for m in range(num_mb):
            t = max(t, prev[m]) + row[m]
            cur.append(t)
        prev = cur
    return prev[-1]

"""Operator triage, profiling grids, the analytical cost oracle and profile CSVs.

Profile CSV layout (header is fixed; feature columns are the union of all
feature names, left empty where an op does not use them)::

    op_name,feature:tp_degree,feature:num_tokens,feature:kv_read_bytes,feature:payload_bytes,runtime_s

Feature schema per operator:

==============  ============================================
op              regression features (plus ``tp_degree`` key)
==============  ============================================
token-level     num_tokens
attn_prefill    num_tokens (equivalent length), kv_read_bytes
attn_decode     kv_read_bytes
collectives     payload_bytes
==============  ============================================

``tp_degree`` is a discrete key, not a regression input: token-level operand
shapes and collective group sizes both depend on it.

Profiling grid (geometric, see :func:`profile_grid`):

* ``num_tokens``: ``token_points_per_octave`` rounded points per doubling
  from 1 to max_context (default 4: 1, 2, 3, 4, 5, 6, 7, 8, 10, 11, 13, ...)
* ``kv_read_bytes``: 0 plus ``kv_points_per_octave`` points per doubling
  from one token's per-layer KV up to ``max_batch_tokens`` tokens of KV
* ``payload_bytes``: powers of two 2**10 ... 2**max_payload_log2

The token axis is the densest because the projections change regime
(weight-bandwidth bound to compute bound) inside the usual batch sizes.

The oracle is a smooth roofline: ``max(flops/peak, bytes/bandwidth) +
kernel_overhead``. It has no tile or wave quantization.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import yaml

from .model_spec import (
    ModelSpec,
    OpClass,
    OperatorDescriptor,
    ParallelismConfig,
    derive_operators,
    kv_bytes_per_token_per_layer,
)

BUILTIN_DEVICES_DIR = Path(__file__).parent / "data" / "devices"

TOKEN_OPS = ("add_norm", "qkv_proj", "attn_out_proj", "mlp_up_proj", "act_fn", "mlp_down_proj")
SEQUENCE_OPS = ("attn_prefill", "attn_decode")
COMM_OPS = ("allreduce", "allgather", "send_recv")
KNOWN_OPS = TOKEN_OPS + SEQUENCE_OPS + COMM_OPS

FEATURE_SCHEMA: dict[str, tuple[str, ...]] = {
    **{name: ("num_tokens",) for name in TOKEN_OPS},
    "attn_prefill": ("num_tokens", "kv_read_bytes"),
    "attn_decode": ("kv_read_bytes",),
    **{name: ("payload_bytes",) for name in COMM_OPS},
}
ALL_FEATURES = ("tp_degree", "num_tokens", "kv_read_bytes", "payload_bytes")
CSV_HEADER = ["op_name"] + [f"feature:{f}" for f in ALL_FEATURES] + ["runtime_s"]

# elementwise op costs, per output element
ACT_FLOPS_PER_ELEM = 8
NORM_FLOPS_PER_ELEM = 8


class ProfileError(ValueError):
    pass


@dataclass(frozen=True)
class DeviceProfile:
    sku_name: str
    peak_flops: float
    mem_bandwidth: float
    link_bandwidth: float
    kernel_overhead: float
    device_mem: int
    link_latency: float = 0.0

    def __post_init__(self):
        for key in ("peak_flops", "mem_bandwidth", "link_bandwidth", "kernel_overhead", "device_mem"):
            if not getattr(self, key) > 0:
                raise ProfileError(f"device {self.sku_name}: {key} must be positive")
        if self.kernel_overhead >= 1e-3:
            raise ProfileError(f"device {self.sku_name}: kernel_overhead must be < 1 ms")
        if self.link_latency < 0:
            raise ProfileError(f"device {self.sku_name}: link_latency must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


def load_device(path_or_name: str | Path) -> DeviceProfile:
    path = Path(path_or_name)
    if not path.exists():
        candidate = BUILTIN_DEVICES_DIR / f"{path_or_name}.yaml"
        if not candidate.exists():
            known = ", ".join(sorted(p.stem for p in BUILTIN_DEVICES_DIR.glob("*.yaml")))
            raise FileNotFoundError(f"unknown device {path_or_name!r} (bundled: {known})")
        path = candidate
    doc = yaml.safe_load(path.read_text())
    return DeviceProfile(
        sku_name=str(doc["sku_name"]),
        peak_flops=float(doc["peak_flops"]),
        mem_bandwidth=float(doc["mem_bandwidth"]),
        link_bandwidth=float(doc["link_bandwidth"]),
        kernel_overhead=float(doc["kernel_overhead"]),
        device_mem=int(doc["device_mem"]),
        link_latency=float(doc.get("link_latency", 0.0)),
    )


def triage(op: OperatorDescriptor | str) -> OpClass:
    name = op if isinstance(op, str) else op.op_name
    if name in TOKEN_OPS:
        return OpClass.TOKEN
    if name in SEQUENCE_OPS:
        return OpClass.SEQUENCE
    if name in COMM_OPS:
        return OpClass.COMMUNICATION
    raise ProfileError(f"unknown operator {name!r}; known: {', '.join(KNOWN_OPS)}")


@dataclass(frozen=True)
class GridLimits:
    max_context: int = 4096
    kv_bytes_per_token: int = 16384
    max_batch_tokens: int = 512 * 4096
    max_payload_log2: int = 28
    token_points_per_octave: int = 4
    kv_points_per_octave: int = 2

    @classmethod
    def for_model(cls, spec: ModelSpec, tp_degree: int = 1, max_batch_size: int = 512):
        return cls(
            max_context=spec.max_context,
            kv_bytes_per_token=kv_bytes_per_token_per_layer(spec, tp_degree),
            max_batch_tokens=max_batch_size * spec.max_context,
            max_payload_log2=max(
                10,
                math.ceil(math.log2(spec.max_context * spec.hidden_dim * spec.param_bytes_per_element)),
            ),
        )


def _geometric(lo: int, hi: int, per_octave: int) -> list[int]:
    """Distinct rounded points lo * 2**(k/per_octave), ending exactly at hi."""
    steps = math.ceil(math.log2(hi / lo) * per_octave - 1e-9)
    pts = {int(round(lo * 2 ** (k / per_octave))) for k in range(steps)}
    pts.add(int(hi))
    return sorted(p for p in pts if lo <= p <= hi)


def token_axis(limits: GridLimits) -> list[int]:
    return _geometric(1, limits.max_context, limits.token_points_per_octave)


def kv_axis(limits: GridLimits) -> list[int]:
    hi = limits.kv_bytes_per_token * limits.max_batch_tokens
    return [0] + _geometric(limits.kv_bytes_per_token, hi, limits.kv_points_per_octave)


def payload_axis(limits: GridLimits) -> list[int]:
    return [2**k for k in range(10, limits.max_payload_log2 + 1)]


def profile_grid(op_class: OpClass | str, limits: GridLimits = GridLimits(), op_name: str | None = None) -> list[dict[str, int]]:
    """Deterministic geometric grid of feature points for one operator class.

    Sequence-level ops need ``op_name`` to pick between the prefill grid
    (tokens x kv bytes) and the decode grid (kv bytes only).
    """
    op_class = OpClass(op_class)
    if op_class is OpClass.TOKEN:
        return [{"num_tokens": n} for n in token_axis(limits)]
    if op_class is OpClass.COMMUNICATION:
        return [{"payload_bytes": b} for b in payload_axis(limits)]
    if op_name == "attn_decode":
        return [{"kv_read_bytes": k} for k in kv_axis(limits) if k > 0]
    return [
        {"num_tokens": n, "kv_read_bytes": k}
        for n in token_axis(limits)
        for k in kv_axis(limits)
    ]


def op_flops_bytes(op: OperatorDescriptor, features: Mapping[str, float], bytes_per_elem: int) -> tuple[float, float]:
    """Analytical (flops, bytes moved) of a single compute-op invocation."""
    d = op.dims
    b = bytes_per_elem
    name = op.op_name
    if name in ("qkv_proj", "attn_out_proj", "mlp_up_proj", "mlp_down_proj"):
        n = features["num_tokens"]
        k, m = d["d_in"], d["d_out"]
        weights = k * m if n > 0 else 0
        return 2.0 * n * k * m, b * (n * k + n * m + weights)
    if name == "act_fn":
        n = features["num_tokens"]
        w = d["width"]
        return ACT_FLOPS_PER_ELEM * n * w, b * 3.0 * n * w
    if name == "add_norm":
        n = features["num_tokens"]
        w = d["width"]
        return NORM_FLOPS_PER_ELEM * n * w, b * (3.0 * n * w + (w if n > 0 else 0))
    if name in SEQUENCE_OPS:
        qh, kvh, hd = d["q_heads"], d["kv_heads"], d["head_dim"]
        kv = features.get("kv_read_bytes", 0.0)
        prior = kv / (2.0 * kvh * hd * b)
        if name == "attn_decode":
            # memory-bound: KV reads dominate, q/o traffic ignored
            return 4.0 * qh * hd * prior, kv
        p = features["num_tokens"]
        flops = 4.0 * qh * hd * p * (prior + p / 2.0)
        return flops, b * p * (2 * qh + 2 * kvh) * hd + kv
    raise ProfileError(f"{name} is not a compute operator")


def synthetic_oracle(op: OperatorDescriptor, features: Mapping[str, float], dev: DeviceProfile, bytes_per_elem: int = 2) -> float:
    """Ground-truth runtime (seconds) of one invocation of ``op``."""
    cls = triage(op)
    if cls is OpClass.COMMUNICATION:
        payload = features["payload_bytes"]
        if op.op_name == "send_recv":
            wire, hops = payload, 1
        else:
            k = dict(op.sharded_dims).get("group", op.tp_degree)
            if k <= 1:
                return dev.kernel_overhead
            if op.op_name == "allreduce":
                wire, hops = 2.0 * (k - 1) / k * payload, 2 * (k - 1)
            else:
                wire, hops = (k - 1) / k * payload, k - 1
        return dev.kernel_overhead + wire / dev.link_bandwidth + hops * dev.link_latency
    flops, moved = op_flops_bytes(op, features, bytes_per_elem)
    return max(flops / dev.peak_flops, moved / dev.mem_bandwidth) + dev.kernel_overhead


def op_features(op_name: str, point: Mapping[str, float], tp_degree: int) -> dict[str, float]:
    return {"tp_degree": tp_degree, **{f: point[f] for f in FEATURE_SCHEMA[op_name]}}


@dataclass(frozen=True)
class ProfileRecord:
    op_name: str
    features: dict
    runtime: float

    def __post_init__(self):
        if self.op_name not in KNOWN_OPS:
            raise ProfileError(f"unknown operator {self.op_name!r}; known: {', '.join(KNOWN_OPS)}")
        if not self.runtime > 0:
            raise ProfileError(f"{self.op_name}: runtime must be positive, got {self.runtime}")
        need = set(FEATURE_SCHEMA[self.op_name])
        missing = need - set(self.features)
        if missing:
            raise ProfileError(f"{self.op_name}: missing features {sorted(missing)}")


def send_recv_op(spec: ModelSpec) -> OperatorDescriptor:
    dims = (("width", spec.hidden_dim),)
    return OperatorDescriptor(
        "send_recv", OpClass.COMMUNICATION, dims, dims, per_block=0,
        elem_bytes=spec.param_bytes_per_element,
    )


def generate_profile(spec: ModelSpec, dev: DeviceProfile, tp_degrees: Sequence[int] = (1,), with_send_recv: bool = False, max_batch_size: int = 512) -> list[ProfileRecord]:
    """Profile every op of every TP sharding of ``spec`` with the oracle.

    Collectives are profiled on the model-agnostic payload grid; ``send_recv``
    does not depend on TP and is recorded once under ``tp_degree=1``.
    """
    records: list[ProfileRecord] = []
    for tp in tp_degrees:
        limits = GridLimits.for_model(spec, tp, max_batch_size)
        for op in derive_operators(spec, ParallelismConfig(tp_degree=tp)):
            for point in profile_grid(op.op_class, limits, op.op_name):
                runtime = synthetic_oracle(op, point, dev, spec.param_bytes_per_element)
                records.append(ProfileRecord(op.op_name, op_features(op.op_name, point, tp), runtime))
    if with_send_recv:
        op = send_recv_op(spec)
        for point in profile_grid(OpClass.COMMUNICATION, GridLimits.for_model(spec)):
            runtime = synthetic_oracle(op, point, dev, spec.param_bytes_per_element)
            records.append(ProfileRecord("send_recv", op_features("send_recv", point, 1), runtime))
    return records


def write_profile_csv(records: Iterable[ProfileRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for rec in records:
            row = [rec.op_name]
            for f in ALL_FEATURES:
                value = rec.features.get(f)
                row.append("" if value is None else _fmt(value))
            row.append(repr(float(rec.runtime)))
            writer.writerow(row)


def _fmt(value: float) -> str:
    if float(value).is_integer():
        return str(int(value))
    return repr(float(value))


def ingest_profile_csv(path: str | Path) -> list[ProfileRecord]:
    """Read and validate a profile CSV; errors carry the 1-based line number."""
    records = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ProfileError(f"{path}: empty file")
        if not header or header[0] != "op_name" or header[-1] != "runtime_s":
            raise ProfileError(f"{path}:1: header must be op_name,feature:*,runtime_s")
        feature_cols = header[1:-1]
        for col in feature_cols:
            if not col.startswith("feature:"):
                raise ProfileError(f"{path}:1: bad column {col!r}")
        names = [c.split(":", 1)[1] for c in feature_cols]
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ProfileError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            op_name = row[0]
            if op_name not in KNOWN_OPS:
                raise ProfileError(
                    f"{path}:{lineno}: unknown op {op_name!r}; known ops: {', '.join(KNOWN_OPS)}"
                )
            try:
                features = {n: float(v) for n, v in zip(names, row[1:-1]) if v != ""}
                runtime = float(row[-1])
            except ValueError as exc:
                raise ProfileError(f"{path}:{lineno}: {exc}") from exc
            if not runtime > 0:
                raise ProfileError(f"{path}:{lineno}: runtime_s must be positive, got {row[-1]}")
            features.setdefault("tp_degree", 1.0)
            try:
                records.append(ProfileRecord(op_name, features, runtime))
            except ProfileError as exc:
                raise ProfileError(f"{path}:{lineno}: {exc}") from exc
    return records

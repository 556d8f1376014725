"""Declarative transformer specs, TP/PP sharding and per-device footprints.

A model spec file is a small YAML document, one model per file::

    schema_version: 1
    name: llama2-7b
    num_layers: 32
    hidden_dim: 4096
    num_q_heads: 32
    num_kv_heads: 32
    head_dim: 128
    mlp_dim: 11008
    vocab_size: 32000
    max_context: 4096
    param_bytes_per_element: 2
    attention_variant: MHA     # optional, inferred from the head counts
    gated_mlp: true            # optional, default true (SwiGLU-style)
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

import yaml

SCHEMA_VERSION = 1

REQUIRED_KEYS = (
    "name",
    "num_layers",
    "hidden_dim",
    "num_q_heads",
    "num_kv_heads",
    "head_dim",
    "mlp_dim",
    "vocab_size",
    "max_context",
    "param_bytes_per_element",
)

_COUNT_KEYS = REQUIRED_KEYS[1:]

BUILTIN_MODELS_DIR = Path(__file__).parent / "data" / "models"


class SpecError(ValueError):
    """Invalid model spec or parallelism config.

    ``field`` names the offending key or invariant.
    """

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class AttentionVariant(str, enum.Enum):
    MHA = "MHA"
    GQA = "GQA"


class OpClass(str, enum.Enum):
    TOKEN = "TokenLevel"
    SEQUENCE = "SequenceLevel"
    COMMUNICATION = "Communication"


@dataclass(frozen=True)
class ModelSpec:
    name: str
    num_layers: int
    hidden_dim: int
    num_q_heads: int
    num_kv_heads: int
    head_dim: int
    mlp_dim: int
    vocab_size: int
    max_context: int
    param_bytes_per_element: int
    attention_variant: AttentionVariant
    gated_mlp: bool = True

    def __post_init__(self):
        for key in _COUNT_KEYS:
            value = getattr(self, key)
            if not isinstance(value, int) or isinstance(value, bool) or value <= 0:
                raise SpecError(key, f"must be a positive integer, got {value!r}")
        if self.num_q_heads * self.head_dim != self.hidden_dim:
            raise SpecError(
                "num_q_heads*head_dim",
                f"{self.num_q_heads}*{self.head_dim} != hidden_dim {self.hidden_dim}",
            )
        if self.num_q_heads % self.num_kv_heads:
            raise SpecError(
                "num_kv_heads",
                f"{self.num_kv_heads} does not divide num_q_heads {self.num_q_heads}",
            )
        expected = (
            AttentionVariant.MHA
            if self.num_kv_heads == self.num_q_heads
            else AttentionVariant.GQA
        )
        if AttentionVariant(self.attention_variant) is not expected:
            raise SpecError(
                "attention_variant",
                f"{self.attention_variant} inconsistent with "
                f"{self.num_kv_heads} kv heads / {self.num_q_heads} q heads",
            )

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"schema_version": SCHEMA_VERSION}
        for key in REQUIRED_KEYS:
            out[key] = getattr(self, key)
        out["attention_variant"] = self.attention_variant.value
        out["gated_mlp"] = self.gated_mlp
        return out


@dataclass(frozen=True)
class ParallelismConfig:
    tp_degree: int = 1
    pp_degree: int = 1
    num_replicas: int = 1

    def __post_init__(self):
        for key in ("tp_degree", "pp_degree", "num_replicas"):
            value = getattr(self, key)
            if not isinstance(value, int) or value <= 0:
                raise SpecError(key, f"must be a positive integer, got {value!r}")

    @property
    def devices_per_replica(self) -> int:
        return self.tp_degree * self.pp_degree

    @property
    def num_devices(self) -> int:
        return self.devices_per_replica * self.num_replicas


@dataclass(frozen=True)
class OperatorDescriptor:
    """One operator as executed on a single device of one pipeline stage.

    ``per_block`` is the number of invocations inside one transformer block
    (e.g. two residual add+norms); stage-scoped operators such as
    ``send_recv`` have ``per_block == 0`` and run once per stage.
    """

    op_name: str
    op_class: OpClass
    sharded_dims: tuple[tuple[str, int], ...]
    unsharded_dims: tuple[tuple[str, int], ...]
    per_block: int = 1
    tp_degree: int = 1
    layers: int = 1
    elem_bytes: int = 2

    @property
    def dims(self) -> dict[str, int]:
        return dict(self.sharded_dims)

    @property
    def invocations(self) -> int:
        """Invocations per stage per iteration."""
        return self.per_block * self.layers if self.per_block else 1


def parse_model_spec(text: str | Mapping[str, Any]) -> ModelSpec:
    """Parse a YAML document (or an already-loaded mapping) into a ModelSpec."""
    if isinstance(text, Mapping):
        doc = dict(text)
    else:
        try:
            doc = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise SpecError("document", f"not valid YAML: {exc}") from exc
    if not isinstance(doc, dict):
        raise SpecError("document", "expected a key/value mapping")

    version = doc.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise SpecError("schema_version", f"unsupported version {version!r}")
    for key in REQUIRED_KEYS:
        if key not in doc:
            raise SpecError(key, "missing required key")
    known = set(REQUIRED_KEYS) | {"schema_version", "attention_variant", "gated_mlp"}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise SpecError(unknown[0], "unknown key")

    variant = doc.get("attention_variant")
    if variant is None:
        variant = "MHA" if doc["num_kv_heads"] == doc["num_q_heads"] else "GQA"
    try:
        variant = AttentionVariant(str(variant).upper())
    except ValueError:
        raise SpecError("attention_variant", f"expected MHA or GQA, got {variant!r}")

    gated = doc.get("gated_mlp", True)
    if not isinstance(gated, bool):
        raise SpecError("gated_mlp", "must be a boolean")

    return ModelSpec(
        name=str(doc["name"]),
        attention_variant=variant,
        gated_mlp=gated,
        **{key: doc[key] for key in _COUNT_KEYS},
    )


def load_model_spec(path_or_name: str | Path) -> ModelSpec:
    """Load a spec from a file path, or by name from the bundled fixtures."""
    path = Path(path_or_name)
    if not path.exists():
        candidate = BUILTIN_MODELS_DIR / f"{path_or_name}.yaml"
        if not candidate.exists():
            known = ", ".join(sorted(p.stem for p in BUILTIN_MODELS_DIR.glob("*.yaml")))
            raise FileNotFoundError(
                f"model spec {path_or_name!r} not found (bundled: {known})"
            )
        path = candidate
    return parse_model_spec(path.read_text())


def validate_parallelism(spec: ModelSpec, par: ParallelismConfig) -> None:
    if spec.num_layers % par.pp_degree:
        raise SpecError(
            "pp_degree",
            f"num_layers {spec.num_layers} not divisible by pp_degree {par.pp_degree}",
        )
    if spec.num_kv_heads % par.tp_degree:
        raise SpecError(
            "tp_degree",
            f"num_kv_heads {spec.num_kv_heads} not divisible by tp_degree {par.tp_degree}",
        )
    if spec.mlp_dim % par.tp_degree:
        raise SpecError(
            "tp_degree",
            f"mlp_dim {spec.mlp_dim} not divisible by tp_degree {par.tp_degree}",
        )


def layers_per_stage(spec: ModelSpec, par: ParallelismConfig) -> list[int]:
    validate_parallelism(spec, par)
    return [spec.num_layers // par.pp_degree] * par.pp_degree


def _dims(**kw: int) -> tuple[tuple[str, int], ...]:
    return tuple(kw.items())


def derive_operators(spec: ModelSpec, par: ParallelismConfig) -> list[OperatorDescriptor]:
    """Per-device operator set for one pipeline stage (Megatron-style TP)."""
    validate_parallelism(spec, par)
    tp = par.tp_degree
    layers = spec.num_layers // par.pp_degree
    h, d, m = spec.hidden_dim, spec.head_dim, spec.mlp_dim
    q, kv = spec.num_q_heads, spec.num_kv_heads
    up = (2 if spec.gated_mlp else 1) * m
    qkv_out = (q + 2 * kv) * d

    def op(name, cls, sharded, unsharded, per_block=1):
        return OperatorDescriptor(
            op_name=name,
            op_class=cls,
            sharded_dims=sharded,
            unsharded_dims=unsharded,
            per_block=per_block,
            tp_degree=tp,
            layers=layers,
            elem_bytes=spec.param_bytes_per_element,
        )

    T, S, C = OpClass.TOKEN, OpClass.SEQUENCE, OpClass.COMMUNICATION
    ops = [
        op("add_norm", T, _dims(width=h), _dims(width=h), per_block=2),
        op("qkv_proj", T, _dims(d_in=h, d_out=qkv_out // tp), _dims(d_in=h, d_out=qkv_out)),
        op(
            "attn_prefill",
            S,
            _dims(q_heads=q // tp, kv_heads=kv // tp, head_dim=d),
            _dims(q_heads=q, kv_heads=kv, head_dim=d),
        ),
        op(
            "attn_decode",
            S,
            _dims(q_heads=q // tp, kv_heads=kv // tp, head_dim=d),
            _dims(q_heads=q, kv_heads=kv, head_dim=d),
        ),
        op("attn_out_proj", T, _dims(d_in=q * d // tp, d_out=h), _dims(d_in=q * d, d_out=h)),
        op("mlp_up_proj", T, _dims(d_in=h, d_out=up // tp), _dims(d_in=h, d_out=up)),
        op("act_fn", T, _dims(width=m // tp), _dims(width=m)),
        op("mlp_down_proj", T, _dims(d_in=m // tp, d_out=h), _dims(d_in=m, d_out=h)),
    ]
    if tp > 1:
        # one after attn_out_proj, one after mlp_down_proj
        ops.append(op("allreduce", C, _dims(width=h, group=tp), _dims(width=h, group=tp), per_block=2))
    if par.pp_degree > 1:
        ops.append(op("send_recv", C, _dims(width=h), _dims(width=h), per_block=0))
    return ops


def _layer_params(spec: ModelSpec, tp: int) -> tuple[int, int]:
    """(TP-sharded matmul params, replicated norm params) of one block."""
    h, d, m = spec.hidden_dim, spec.head_dim, spec.mlp_dim
    qkv = h * (spec.num_q_heads + 2 * spec.num_kv_heads) * d
    out = spec.num_q_heads * d * h
    mlp = (3 if spec.gated_mlp else 2) * h * m
    return (qkv + out + mlp) // tp, 2 * h


def layer_weight_bytes(spec: ModelSpec, tp: int) -> int:
    """Sharded matmul weight bytes of one transformer block on one device."""
    return _layer_params(spec, tp)[0] * spec.param_bytes_per_element


def param_bytes_per_stage(spec: ModelSpec, par: ParallelismConfig) -> list[int]:
    """Parameter bytes held by one device of each pipeline stage.

    Stage 0 holds the input embedding, the last stage holds the final norm and
    LM head; both embeddings are sharded along the vocab dimension under TP.
    """
    counts = layers_per_stage(spec, par)
    sharded, replicated = _layer_params(spec, par.tp_degree)
    embed = spec.vocab_size * spec.hidden_dim // par.tp_degree
    out = []
    for stage, n_layers in enumerate(counts):
        params = n_layers * (sharded + replicated)
        if stage == 0:
            params += embed
        if stage == len(counts) - 1:
            params += embed + spec.hidden_dim
        out.append(params * spec.param_bytes_per_element)
    return out


def param_bytes_per_device(spec: ModelSpec, par: ParallelismConfig) -> int:
    """Largest per-device parameter footprint across stages (binds memory)."""
    return max(param_bytes_per_stage(spec, par))


def kv_bytes_per_token_per_device(spec: ModelSpec, par: ParallelismConfig) -> int:
    if par.tp_degree > spec.num_kv_heads:
        raise SpecError(
            "tp_degree",
            f"tp_degree {par.tp_degree} exceeds num_kv_heads {spec.num_kv_heads}",
        )
    validate_parallelism(spec, par)
    return (
        2
        * (spec.num_layers // par.pp_degree)
        * (spec.num_kv_heads // par.tp_degree)
        * spec.head_dim
        * spec.param_bytes_per_element
    )


def kv_bytes_per_token_per_layer(spec: ModelSpec, tp_degree: int) -> int:
    return 2 * (spec.num_kv_heads // tp_degree) * spec.head_dim * spec.param_bytes_per_element

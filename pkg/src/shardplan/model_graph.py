"""Sub-layer shard graph of a decoder-only transformer.

The graph of a dense or mixture-of-experts decoder is broken at sub-layer
boundaries into schedulable shards: one attention shard, one KV-cache shard,
and one FFN (or expert-group) shard per layer, plus a single output head.
Each shard knows its resident byte footprint and can price one inference
pass analytically: FLOPs at 2 per multiply-accumulate, with element-wise
work (softmax, norms) folded in as a small configurable fraction, and byte
traffic split into reads and writes.

Residency and compute are deliberately asymmetric for expert groups: all
experts must be resident (or streamed) because routing is unknown at plan
time, but only the routed top-k experts contribute FLOPs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

from .errors import FormatError, SpecError
from .kernels import KernelRequest, OpKind, quant_class_for

MODEL_FORMAT = "model-spec/v1"

TENSOR_CLASSES = ("attn_weights", "ffn_weights", "output_weights", "kv_cache", "activations")

# Logits are materialized only for positions that get sampled: at most the
# decode-batch width per pass. Tiers above this are context chunks that
# sample a single position; charging the cap keeps the head cost monotone.
HEAD_ROWS_CAP = 64

DEFAULT_ELEMENTWISE_EPSILON = 0.02


class ShardKind(Enum):
    ATTENTION = "attention"
    KV_CACHE = "kv_cache"
    FFN = "ffn"
    MOE_EXPERT_GROUP = "moe_expert_group"
    OUTPUT_HEAD = "output_head"


# Lower ordinal pins first: attention, KV cache, FFN/experts, output head.
PRIORITY: dict[ShardKind, int] = {
    ShardKind.ATTENTION: 0,
    ShardKind.KV_CACHE: 1,
    ShardKind.FFN: 2,
    ShardKind.MOE_EXPERT_GROUP: 2,
    ShardKind.OUTPUT_HEAD: 3,
}


@dataclass(frozen=True)
class MoeSpec:
    n_experts: int
    top_k: int
    expert_ffn_dim: int


@dataclass(frozen=True)
class ModelSpec:
    name: str
    n_layers: int
    d_model: int
    n_heads: int
    n_kv_heads: int
    head_dim: int
    ffn_dim: int
    vocab_size: int
    max_context: int
    quant: dict[str, float]         # tensor class -> bytes per element
    moe: MoeSpec | None = None
    gated_ffn: bool = True
    elementwise_epsilon: float = DEFAULT_ELEMENTWISE_EPSILON

    def __post_init__(self):
        counts = {
            "n_layers": self.n_layers, "d_model": self.d_model,
            "n_heads": self.n_heads, "n_kv_heads": self.n_kv_heads,
            "head_dim": self.head_dim, "ffn_dim": self.ffn_dim,
            "vocab_size": self.vocab_size, "max_context": self.max_context,
        }
        for name, v in counts.items():
            if v <= 0:
                raise SpecError(f"{self.name}: {name} must be positive, got {v}")
        if self.n_heads % self.n_kv_heads != 0:
            raise SpecError(
                f"{self.name}: n_heads ({self.n_heads}) must be a multiple of "
                f"n_kv_heads ({self.n_kv_heads})"
            )
        missing = [c for c in TENSOR_CLASSES if c not in self.quant]
        if missing:
            raise SpecError(f"{self.name}: quant map missing classes {missing}")
        for c, bpe in self.quant.items():
            if bpe <= 0:
                raise SpecError(f"{self.name}: quant[{c}] must be positive, got {bpe}")
        if self.moe is not None:
            if self.moe.n_experts <= 0 or self.moe.top_k <= 0 or self.moe.expert_ffn_dim <= 0:
                raise SpecError(f"{self.name}: moe counts must be positive")
            if self.moe.top_k > self.moe.n_experts:
                raise SpecError(f"{self.name}: moe top_k exceeds n_experts")
        if not 0 <= self.elementwise_epsilon < 1:
            raise SpecError(f"{self.name}: elementwise_epsilon must be in [0, 1)")

    @property
    def ffn_mats(self) -> int:
        return 3 if self.gated_ffn else 2

    def activation_bytes(self, new_tokens: int) -> float:
        """Bytes of one intermediate tensor handed between adjacent shards."""
        return new_tokens * self.d_model * self.quant["activations"]


@dataclass(frozen=True)
class ShardCost:
    flops: float
    read_bytes: float
    write_bytes: float


@dataclass(frozen=True)
class SubLayerShard:
    """One schedulable unit: static footprint plus pure cost functions."""

    id: int
    layer_index: int
    kind: ShardKind
    weight_bytes: float
    priority: int
    spec: ModelSpec
    context_len: int   # context the graph was built for (sizes KV residency)
    kv_replicas: int = 1  # concurrent request caches (batched inference)

    def kernels(self, new_tokens: int, context_len: int) -> list[KernelRequest]:
        """Constituent kernels of one pass, with exact FLOP/byte counts."""
        if new_tokens < 1:
            raise SpecError(f"new_tokens must be >= 1, got {new_tokens}")
        s = self.spec
        eps = 1.0 + s.elementwise_epsilon
        qa = s.quant["activations"]
        t = new_tokens

        if self.kind is ShardKind.ATTENTION:
            q_cls = quant_class_for(s.quant["attn_weights"])
            qkv_width = 4 * s.n_heads * s.head_dim
            proj = KernelRequest(
                OpKind.MATMUL, q_cls, (t, s.d_model, qkv_width),
                flops=2.0 * t * s.d_model * qkv_width * eps,
                bytes=self.weight_bytes + t * s.d_model * qa + t * qkv_width * qa,
            )
            op = OpKind.MHA if s.n_kv_heads == s.n_heads else OpKind.GQA
            dims = ((t, context_len, s.n_heads, s.head_dim) if op is OpKind.MHA
                    else (t, context_len, s.n_heads, s.n_kv_heads, s.head_dim))
            attn = KernelRequest(
                op, quant_class_for(s.quant["kv_cache"]), dims,
                flops=4.0 * t * context_len * s.n_heads * s.head_dim * eps,
                bytes=2.0 * t * s.n_heads * s.head_dim * qa,
            )
            return [proj, attn]

        if self.kind is ShardKind.KV_CACHE:
            # Every in-flight request's cache is touched once per pass.
            qkv = s.quant["kv_cache"]
            elems = 2 * (self.kv_replicas * context_len + t) * s.n_kv_heads * s.head_dim
            return [KernelRequest(
                OpKind.ELEMENT_WISE, quant_class_for(qkv), (elems,),
                flops=float(elems), bytes=elems * qkv,
            )]

        if self.kind is ShardKind.FFN:
            width = s.ffn_mats * s.ffn_dim
            return [KernelRequest(
                OpKind.MATMUL, quant_class_for(s.quant["ffn_weights"]), (t, s.d_model, width),
                flops=2.0 * t * s.d_model * width * eps,
                bytes=self.weight_bytes + 2.0 * t * (s.d_model + s.ffn_dim) * qa,
            )]

        if self.kind is ShardKind.MOE_EXPERT_GROUP:
            moe = s.moe
            qf = s.quant["ffn_weights"]
            q_cls = quant_class_for(qf)
            route = KernelRequest(
                OpKind.MOE_ROUTE, q_cls, (t, s.d_model, moe.n_experts),
                flops=2.0 * t * s.d_model * moe.n_experts * eps,
                bytes=s.d_model * moe.n_experts * qf + t * (s.d_model + moe.n_experts) * qa,
            )
            touched = min(moe.n_experts, t * moe.top_k)
            expert_bytes = s.ffn_mats * s.d_model * moe.expert_ffn_dim * qf
            width = s.ffn_mats * moe.expert_ffn_dim
            experts = KernelRequest(
                OpKind.MATMUL, q_cls, (t * moe.top_k, s.d_model, width),
                flops=2.0 * t * moe.top_k * s.d_model * width * eps,
                bytes=(touched * expert_bytes
                       + t * moe.top_k * (s.d_model + 2 * moe.expert_ffn_dim) * qa
                       + t * s.d_model * qa),
            )
            return [route, experts]

        if self.kind is ShardKind.OUTPUT_HEAD:
            rows = min(t, HEAD_ROWS_CAP)
            return [KernelRequest(
                OpKind.MATMUL, quant_class_for(s.quant["output_weights"]),
                (rows, s.d_model, s.vocab_size),
                flops=2.0 * rows * s.d_model * s.vocab_size * eps,
                bytes=self.weight_bytes + rows * (s.d_model + s.vocab_size) * qa,
            )]

        raise SpecError(f"unhandled shard kind {self.kind}")

    def cost(self, new_tokens: int, context_len: int) -> ShardCost:
        return shard_cost(self, new_tokens, context_len)

    def peak_activation_bytes(self, new_tokens: int) -> float:
        """Largest simultaneous activation working set of one pass.

        Smaller than total traffic: expert groups loop over experts and FFNs
        reuse intermediates, so only one phase's tensors are live at a time.
        """
        s = self.spec
        qa = s.quant["activations"]
        t = new_tokens
        if self.kind is ShardKind.ATTENTION:
            return t * (s.d_model + 4 * s.n_heads * s.head_dim) * qa
        if self.kind is ShardKind.KV_CACHE:
            return 0.0
        if self.kind is ShardKind.FFN:
            live = 2 * s.ffn_dim if s.gated_ffn else s.ffn_dim
            return t * (s.d_model + live) * qa
        if self.kind is ShardKind.MOE_EXPERT_GROUP:
            moe = s.moe
            live = 2 * moe.expert_ffn_dim if s.gated_ffn else moe.expert_ffn_dim
            return t * (s.d_model + live) * qa + t * moe.n_experts * qa
        if self.kind is ShardKind.OUTPUT_HEAD:
            rows = min(t, HEAD_ROWS_CAP)
            return rows * (s.d_model + s.vocab_size) * qa
        raise SpecError(f"unhandled shard kind {self.kind}")

    def kv_append_bytes(self, new_tokens: int) -> float:
        """Newly written cache bytes per pass; zero for non-KV shards."""
        if self.kind is not ShardKind.KV_CACHE:
            return 0.0
        s = self.spec
        return 2.0 * new_tokens * s.n_kv_heads * s.head_dim * s.quant["kv_cache"]


def shard_cost(shard: SubLayerShard, new_tokens: int, context_len: int) -> ShardCost:
    """Aggregate FLOP/read/write accounting of one pass over a shard.

    Reads cover weights plus activation inputs; writes cover activation
    outputs and, for KV shards, the appended cache entries. The totals equal
    the sum over the shard's constituent kernels.
    """
    if new_tokens < 1:
        raise SpecError(f"new_tokens must be >= 1, got {new_tokens}")
    s = shard.spec
    qa = s.quant["activations"]
    t = new_tokens
    kernels = shard.kernels(new_tokens, context_len)
    flops = sum(k.flops for k in kernels)
    total_bytes = sum(k.bytes for k in kernels)

    if shard.kind is ShardKind.ATTENTION:
        write = t * (4 * s.n_heads * s.head_dim + s.n_heads * s.head_dim) * qa
    elif shard.kind is ShardKind.KV_CACHE:
        write = shard.kv_append_bytes(t)
    elif shard.kind is ShardKind.FFN:
        write = t * (s.d_model + s.ffn_dim) * qa
    elif shard.kind is ShardKind.MOE_EXPERT_GROUP:
        moe = s.moe
        write = t * moe.n_experts * qa + t * (moe.top_k * moe.expert_ffn_dim + s.d_model) * qa
    else:  # output head
        write = min(t, HEAD_ROWS_CAP) * s.vocab_size * qa
    return ShardCost(flops=flops, read_bytes=total_bytes - write, write_bytes=write)


def _attention_weight_bytes(s: ModelSpec) -> float:
    q = s.quant["attn_weights"]
    elems = (2 * s.d_model * s.n_heads * s.head_dim          # Q and O projections
             + 2 * s.d_model * s.n_kv_heads * s.head_dim)    # K and V projections
    return elems * q


def _ffn_weight_bytes(s: ModelSpec) -> float:
    q = s.quant["ffn_weights"]
    if s.moe is not None:
        experts = s.moe.n_experts * s.ffn_mats * s.d_model * s.moe.expert_ffn_dim
        router = s.d_model * s.moe.n_experts
        return (experts + router) * q
    return s.ffn_mats * s.d_model * s.ffn_dim * q


def _head_weight_bytes(s: ModelSpec) -> float:
    return s.d_model * s.vocab_size * s.quant["output_weights"]


def kv_cache_bytes(spec: ModelSpec, context_len: int) -> float:
    """Total cache footprint across all layers at a given context length."""
    if context_len < 0:
        raise SpecError(f"context_len must be >= 0, got {context_len}")
    return (2.0 * spec.n_layers * spec.n_kv_heads * spec.head_dim
            * context_len * spec.quant["kv_cache"])


def total_model_bytes(spec: ModelSpec) -> float:
    """Context-independent weight bytes across all shards."""
    per_layer = _attention_weight_bytes(spec) + _ffn_weight_bytes(spec)
    return spec.n_layers * per_layer + _head_weight_bytes(spec)


def build_shards(spec: ModelSpec, context_len: int, kv_replicas: int = 1) -> list[SubLayerShard]:
    """Emit the shard chain in topological order for one context length.

    Per layer: attention, KV cache, FFN or expert group; then the output
    head. 3 * n_layers + 1 shards, deterministic ids and sizes. With more
    than one KV replica the cache shards hold one cache per concurrent
    request, as batched inference requires.
    """
    if context_len < 0:
        raise SpecError(f"context_len must be >= 0, got {context_len}")
    if context_len > spec.max_context:
        raise SpecError(
            f"{spec.name}: context_len {context_len} exceeds max_context {spec.max_context}"
        )
    if kv_replicas < 1:
        raise SpecError(f"kv_replicas must be >= 1, got {kv_replicas}")
    attn_w = _attention_weight_bytes(spec)
    ffn_w = _ffn_weight_bytes(spec)
    kv_w = kv_replicas * kv_cache_bytes(spec, context_len) / spec.n_layers
    ffn_kind = ShardKind.MOE_EXPERT_GROUP if spec.moe is not None else ShardKind.FFN

    shards: list[SubLayerShard] = []

    def emit(layer: int, kind: ShardKind, weight: float):
        shards.append(SubLayerShard(
            id=len(shards), layer_index=layer, kind=kind, weight_bytes=weight,
            priority=PRIORITY[kind], spec=spec, context_len=context_len,
            kv_replicas=kv_replicas,
        ))

    for layer in range(spec.n_layers):
        emit(layer, ShardKind.ATTENTION, attn_w)
        emit(layer, ShardKind.KV_CACHE, kv_w)
        emit(layer, ffn_kind, ffn_w)
    emit(spec.n_layers, ShardKind.OUTPUT_HEAD, _head_weight_bytes(spec))
    return shards


# -- spec file round trip ----------------------------------------------------

def model_to_dict(s: ModelSpec) -> dict:
    doc = {
        "format": MODEL_FORMAT,
        "name": s.name,
        "n_layers": s.n_layers,
        "d_model": s.d_model,
        "n_heads": s.n_heads,
        "n_kv_heads": s.n_kv_heads,
        "head_dim": s.head_dim,
        "ffn_dim": s.ffn_dim,
        "vocab_size": s.vocab_size,
        "max_context": s.max_context,
        "quant": dict(s.quant),
        "gated_ffn": s.gated_ffn,
        "elementwise_epsilon": s.elementwise_epsilon,
        "moe": None,
    }
    if s.moe is not None:
        doc["moe"] = {
            "n_experts": s.moe.n_experts,
            "top_k": s.moe.top_k,
            "expert_ffn_dim": s.moe.expert_ffn_dim,
        }
    return doc


def model_from_dict(doc: dict) -> ModelSpec:
    if doc.get("format") != MODEL_FORMAT:
        raise FormatError(f"expected {MODEL_FORMAT}, got {doc.get('format')!r}")
    moe = None
    if doc.get("moe"):
        moe = MoeSpec(
            n_experts=int(doc["moe"]["n_experts"]),
            top_k=int(doc["moe"]["top_k"]),
            expert_ffn_dim=int(doc["moe"]["expert_ffn_dim"]),
        )
    return ModelSpec(
        name=doc["name"],
        n_layers=int(doc["n_layers"]),
        d_model=int(doc["d_model"]),
        n_heads=int(doc["n_heads"]),
        n_kv_heads=int(doc["n_kv_heads"]),
        head_dim=int(doc["head_dim"]),
        ffn_dim=int(doc["ffn_dim"]),
        vocab_size=int(doc["vocab_size"]),
        max_context=int(doc["max_context"]),
        quant={k: float(v) for k, v in doc["quant"].items()},
        moe=moe,
        gated_ffn=bool(doc.get("gated_ffn", True)),
        elementwise_epsilon=float(doc.get("elementwise_epsilon", DEFAULT_ELEMENTWISE_EPSILON)),
    )


def load_model(path: str | Path) -> ModelSpec:
    with open(path, "r", encoding="utf-8") as fh:
        return model_from_dict(json.load(fh))


def save_model(s: ModelSpec, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(s), fh, indent=2, sort_keys=True)
        fh.write("\n")

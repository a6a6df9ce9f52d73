"""Kernel vocabulary shared by the model graph, the profile database, and the planner.

A kernel request is the unit of cost estimation: an op kind, a quantization
class, a shape vector, and the exact FLOP / byte counts of one invocation.
Shards decompose into kernel requests; the profile database answers time
estimates for them; the synthetic profiler generates benchmark entries over
canonical workloads built from the same vocabulary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum


class OpKind(Enum):
    MATMUL = "matmul"
    GQA = "gqa"
    MHA = "mha"
    MOE_ROUTE = "moe_route"
    ELEMENT_WISE = "element_wise"


class Backend(Enum):
    CPU = "cpu"
    GPU = "gpu"


class Contention(Enum):
    STANDALONE = "standalone"
    UNDER_PCIE_TRAFFIC = "under_pcie_traffic"


# Quantization classes the profiler benchmarks, keyed by bytes per element.
# Model specs carry arbitrary rational widths; lookups snap to the nearest
# class in log space (relative width difference is what moves throughput).
QUANT_CLASSES: dict[str, float] = {
    "f32": 4.0,
    "f16": 2.0,
    "q8": 1.0,
    "q4": 0.5625,
    "q2": 0.3203125,
}

_QUANT_ORDER = sorted(QUANT_CLASSES.items(), key=lambda kv: kv[1])


def quant_class_for(bytes_per_elem: float) -> str:
    """Snap an arbitrary bytes-per-element width to the nearest benchmarked class."""
    if bytes_per_elem <= 0:
        raise ValueError(f"bytes_per_elem must be positive, got {bytes_per_elem}")
    target = math.log(bytes_per_elem)
    return min(_QUANT_ORDER, key=lambda kv: abs(math.log(kv[1]) - target))[0]


@dataclass(frozen=True)
class KernelRequest:
    """One kernel invocation to be priced: shape plus exact work counts."""

    op_kind: OpKind
    quant_class: str
    dims: tuple[int, ...]
    flops: float
    bytes: float


def canonical_workload(op_kind: OpKind, dims: tuple[int, ...], bpe: float) -> tuple[float, float]:
    """FLOP and byte counts of the canonical benchmark kernel for a grid point.

    The byte accounting mirrors what the corresponding model kernels are
    charged for: weights at the entry's quantization width, activations at
    f16. Attention kernels carry only their activation traffic; cache reads
    and writes are priced separately through element-wise entries, exactly
    as the shard decomposition splits them.
    """
    act = 2.0
    if op_kind is OpKind.MATMUL:
        m, k, n = dims
        return 2.0 * m * k * n, k * n * bpe + m * k * act + m * n * act
    if op_kind is OpKind.GQA:
        t, ctx, heads, kv_heads, head_dim = dims
        flops = 4.0 * t * ctx * heads * head_dim
        return flops, 2.0 * t * heads * head_dim * act
    if op_kind is OpKind.MHA:
        t, ctx, heads, head_dim = dims
        flops = 4.0 * t * ctx * heads * head_dim
        return flops, 2.0 * t * heads * head_dim * act
    if op_kind is OpKind.MOE_ROUTE:
        t, d_model, n_experts = dims
        flops = 2.0 * t * d_model * n_experts
        byts = d_model * n_experts * bpe + t * (d_model + n_experts) * act
        return flops, byts
    if op_kind is OpKind.ELEMENT_WISE:
        (n,) = dims
        # One op per element; bytes are the elements moved at the entry width.
        return float(n), n * bpe
    raise ValueError(f"unknown op kind {op_kind}")


def matmul_flops(m: int, n: int, k: int) -> int:
    """FLOPs of a plain m-by-k times k-by-n matmul at 2 FLOPs per MAC."""
    return 2 * m * n * k

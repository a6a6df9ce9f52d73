"""Planning phase: budget split, priority pinning, three candidate plans, tier table.

For each supported token tier the planner splits the VRAM budget into a
pinnable region and a scratch region, greedily pins shards in priority
order (attention, KV cache, FFN, outputs), and lays out three candidate
schedules for whatever did not fit:

  * gpu-only   - every unpinned shard executes on the GPU with its bytes
                 streamed just in time through a two-slot scratch buffer.
  * static     - a fixed frontier: the highest-priority unpinned shards are
                 pinned into the scratch region and run on the GPU, the rest
                 stay in system RAM and run on the CPU. Only activations
                 cross PCIe.
  * dynamic    - the highest-priority unpinned shards stream to the GPU
                 through the double buffer while the tail runs on the CPU,
                 overlapping CPU compute with the next GPU shard's transfer.

Plan cost is the sum over shards of max(compute, concurrent transfers),
with transfers billed to the shard that executes while they are in flight
(steady state: a streamed shard's upload runs during its predecessor,
cyclically). The static and dynamic frontiers are chosen by an exhaustive
sweep of the priority-ordered split point, which is cheap because the
shard chain is short.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

from .errors import FormatError, InfeasibleBudget, InfeasibleSchedule, SpecError
from .kernels import Backend, Contention
from .machine import MachineSpec
from .model_graph import ModelSpec, ShardKind, SubLayerShard, build_shards
from .profile_db import KernelKey, ProfileDb, estimate_kernel_time

TIER_TABLE_FORMAT = "tier-table/v1"

# Supported batch-wide new-token tiers.
TIERS = (1, 4, 16, 32, 64, 512, 1024, 2048, 4096, 8192, 16384)


class Residency(Enum):
    VRAM_PINNED = "vram_pinned"
    SYS_RAM = "sys_ram"


class Streaming(Enum):
    NONE = "none"
    WEIGHTS_H2D = "weights_h2d"
    KV_H2D = "kv_h2d"
    KV_D2H = "kv_d2h"
    WEIGHTS_AND_KV = "weights_and_kv"


class PlanKind(Enum):
    GPU_ONLY = "gpu_only"
    STATIC = "static"
    DYNAMIC = "dynamic"


# Selection tie-break order after estimated time and PCIe bytes.
_KIND_RANK = {PlanKind.STATIC: 0, PlanKind.DYNAMIC: 1, PlanKind.GPU_ONLY: 2}


@dataclass(frozen=True)
class Placement:
    shard_id: int
    residency: Residency
    exec_backend: Backend
    streaming: Streaming

    def __post_init__(self):
        if self.residency is Residency.VRAM_PINNED:
            if self.exec_backend is not Backend.GPU or self.streaming is not Streaming.NONE:
                raise SpecError("pinned shards execute on the GPU without streaming")
        if self.exec_backend is Backend.CPU:
            if self.residency is not Residency.SYS_RAM:
                raise SpecError("CPU execution requires sysRAM residency")
            if self.streaming not in (Streaming.NONE, Streaming.KV_D2H):
                raise SpecError("CPU shards may only stream KV back to sysRAM")


@dataclass(frozen=True)
class SchedulePlan:
    kind: PlanKind
    placements: tuple[Placement, ...]
    estimated_time: float
    pcie_h2d_bytes: float
    pcie_d2h_bytes: float
    scratch_bytes_required: float
    feasible: bool = True

    @property
    def pcie_total_bytes(self) -> float:
        return self.pcie_h2d_bytes + self.pcie_d2h_bytes


@dataclass(frozen=True)
class BudgetSplit:
    pinned: float
    scratch: float


@dataclass(frozen=True)
class PinResult:
    pinned_ids: frozenset[int]
    remaining: tuple[SubLayerShard, ...]  # original topological order
    leftover: float


def pin_order(shards: list[SubLayerShard]) -> list[SubLayerShard]:
    return sorted(shards, key=lambda s: (s.priority, s.layer_index, s.id))


def pin_shards(pinned_budget: float, shards: list[SubLayerShard]) -> PinResult:
    """Greedy first-fit whole-shard pinning in (priority, layer) order."""
    if pinned_budget < 0:
        raise SpecError(f"pinned_budget must be >= 0, got {pinned_budget}")
    leftover = pinned_budget
    pinned: set[int] = set()
    for shard in pin_order(shards):
        if shard.weight_bytes <= leftover:
            pinned.add(shard.id)
            leftover -= shard.weight_bytes
    remaining = tuple(s for s in shards if s.id not in pinned)
    return PinResult(frozenset(pinned), remaining, leftover)


def decide_scratch_budget(
    budget: float, shards: list[SubLayerShard], tier_tokens: int
) -> BudgetSplit:
    """Split the budget into pinnable and scratch regions.

    Scratch must hold the peak activation working set plus two double-buffer
    slots sized for the largest shard that ends up unpinned. Since what ends
    up unpinned depends on the split itself, the split is the fixpoint of
    re-pinning under a growing scratch reservation; the loop is monotone and
    terminates once scratch covers what actually remains (or hits the budget,
    in which case streaming plans may individually be infeasible).
    """
    if budget <= 0:
        raise SpecError(f"budget must be positive, got {budget}")
    acts = max(s.peak_activation_bytes(tier_tokens) for s in shards)
    if budget < acts:
        raise InfeasibleBudget(budget, acts, "activation scratch")
    scratch = acts
    while True:
        result = pin_shards(budget - scratch, shards)
        if not result.remaining:
            need = acts
        else:
            need = acts + 2.0 * max(s.weight_bytes for s in result.remaining)
        if need <= scratch or scratch >= budget:
            break
        scratch = min(budget, need)
    return BudgetSplit(pinned=budget - scratch, scratch=scratch)


# -- plan cost machinery -------------------------------------------------------


@dataclass
class _ShardRates:
    """Per-shard precomputed costs for one (tier, context) configuration."""

    gpu: list[float]            # compute time if executed on the GPU
    cpu_alone: list[float]      # CPU compute, no concurrent PCIe traffic
    cpu_contended: list[float]  # CPU compute under concurrent PCIe traffic
    stream_h2d: list[float]     # bytes uploaded per pass if this shard streams
    stream_d2h: list[float]     # bytes written back per pass if this shard streams
    act_hop_bytes: float        # activation tensor crossing a backend boundary


def _shard_compute_time(
    shard: SubLayerShard, backend: Backend, db: ProfileDb, machine: MachineSpec,
    tier_tokens: int, context_len: int, contended: bool,
) -> float:
    total = 0.0
    threads = machine.threads_available if backend is Backend.CPU else 0
    contention = (Contention.UNDER_PCIE_TRAFFIC
                  if backend is Backend.CPU and contended else Contention.STANDALONE)
    for req in shard.kernels(tier_tokens, context_len):
        key = KernelKey(req.op_kind, req.quant_class, backend, threads, req.dims, contention)
        t, _ = estimate_kernel_time(db, key, req.flops, req.bytes)
        total += t
    return total


def _rates_for(
    shards: list[SubLayerShard], db: ProfileDb, machine: MachineSpec,
    tier_tokens: int, context_len: int,
) -> _ShardRates:
    gpu, cpu_a, cpu_c, h2d, d2h = [], [], [], [], []
    for s in shards:
        gpu.append(_shard_compute_time(s, Backend.GPU, db, machine,
                                       tier_tokens, context_len, False))
        cpu_a.append(_shard_compute_time(s, Backend.CPU, db, machine,
                                         tier_tokens, context_len, False))
        cpu_c.append(_shard_compute_time(s, Backend.CPU, db, machine,
                                         tier_tokens, context_len, True))
        h2d.append(s.weight_bytes)
        d2h.append(s.kv_append_bytes(tier_tokens))
    act = shards[0].spec.activation_bytes(tier_tokens) if shards else 0.0
    return _ShardRates(gpu, cpu_a, cpu_c, h2d, d2h, act)


def _walk_plan(
    rates: _ShardRates, machine: MachineSpec,
    exec_backend: list[Backend], streams: list[bool],
) -> tuple[float, float, float]:
    """Sum-of-max plan time plus PCIe byte totals for one assignment.

    A streamed shard's upload is billed to the shard executing before it
    (cyclic, modeling the steady-state decode loop); KV write-back is billed
    to the shard after its producer. Activation hops between backends are
    serial. CPU compute and PCIe rates are contention-derated whenever the
    plan both streams and computes on the CPU.
    """
    n = len(exec_backend)
    any_cpu = any(b is Backend.CPU for b in exec_backend)
    h2d_bytes = [rates.stream_h2d[i] if streams[i] else 0.0 for i in range(n)]
    d2h_bytes = [rates.stream_d2h[i] if streams[i] else 0.0 for i in range(n)]
    streaming_total = sum(h2d_bytes) + sum(d2h_bytes)
    contended = any_cpu and streaming_total > 0
    h2d_rate = machine.pcie_rate(h2d=True, contended=contended)
    d2h_rate = machine.pcie_rate(h2d=False, contended=contended)
    cpu_times = rates.cpu_contended if contended else rates.cpu_alone

    total = 0.0
    for i in range(n):
        compute = rates.gpu[i] if exec_backend[i] is Backend.GPU else cpu_times[i]
        billed_h2d = h2d_bytes[(i + 1) % n]
        billed_d2h = d2h_bytes[(i - 1) % n]
        total += max(compute, billed_h2d / h2d_rate, billed_d2h / d2h_rate)

    pcie_h2d = sum(h2d_bytes)
    pcie_d2h = sum(d2h_bytes)
    for i in range(1, n):
        if exec_backend[i] is not exec_backend[i - 1]:
            to_gpu = exec_backend[i] is Backend.GPU
            rate = h2d_rate if to_gpu else d2h_rate
            total += rates.act_hop_bytes / rate
            if to_gpu:
                pcie_h2d += rates.act_hop_bytes
            else:
                pcie_d2h += rates.act_hop_bytes
    return total, pcie_h2d, pcie_d2h


def _stream_kind(shard: SubLayerShard) -> Streaming:
    return Streaming.KV_H2D if shard.kind is ShardKind.KV_CACHE else Streaming.WEIGHTS_H2D


def heuristic_split(
    shards: list[SubLayerShard], pin: PinResult, db: ProfileDb, machine: MachineSpec,
    tier_tokens: int, context_len: int, scratch: float,
) -> list[SchedulePlan]:
    """Generate the three candidate plans for the unpinned shards.

    The static and dynamic CPU/GPU frontiers sweep their split point
    exhaustively over the priority-ordered remaining shards (cheap: the
    chain is short) and keep the minimum-estimate assignment. Candidates
    are evaluated as flat backend/stream arrays; placements are only
    materialized for each winning assignment.
    """
    rates = _rates_for(shards, db, machine, tier_tokens, context_len)
    acts = max(s.peak_activation_bytes(tier_tokens) for s in shards)
    remaining = pin_order(list(pin.remaining))
    pinned_ids = pin.pinned_ids
    n = len(shards)
    id_to_idx = {s.id: i for i, s in enumerate(shards)}

    def materialize(kind: PlanKind, scratch_ids: set[int],
                    streamed_ids: set[int]) -> SchedulePlan:
        exec_backend, streams, placements = [], [], []
        scratch_pinned = 0.0
        for s in shards:
            if s.id in streamed_ids:
                placements.append(Placement(s.id, Residency.SYS_RAM,
                                            Backend.GPU, _stream_kind(s)))
                exec_backend.append(Backend.GPU)
                streams.append(True)
            elif s.id in pinned_ids or s.id in scratch_ids:
                placements.append(Placement(s.id, Residency.VRAM_PINNED,
                                            Backend.GPU, Streaming.NONE))
                exec_backend.append(Backend.GPU)
                streams.append(False)
                if s.id in scratch_ids:
                    scratch_pinned += s.weight_bytes
            else:
                placements.append(Placement(s.id, Residency.SYS_RAM,
                                            Backend.CPU, Streaming.NONE))
                exec_backend.append(Backend.CPU)
                streams.append(False)
        time, h2d, d2h = _walk_plan(rates, machine, exec_backend, streams)
        streamed_sizes = [shards[i].weight_bytes for i in range(n) if streams[i]]
        if streamed_sizes:
            scratch_req = acts + 2.0 * max(streamed_sizes)
        else:
            scratch_req = acts + scratch_pinned
        return SchedulePlan(
            kind=kind, placements=tuple(placements), estimated_time=time,
            pcie_h2d_bytes=h2d, pcie_d2h_bytes=d2h,
            scratch_bytes_required=scratch_req,
            feasible=scratch_req <= scratch,
        )

    gpu_only = materialize(PlanKind.GPU_ONLY, set(), {s.id for s in remaining})

    base_exec = [Backend.GPU if s.id in pinned_ids else Backend.CPU for s in shards]
    no_streams = [False] * n

    def sweep_static() -> SchedulePlan:
        # Scratch is packed with a greedy first-fit walk: a shard that does
        # not fit is skipped, not a stopping point, so small low-priority
        # shards can fill gaps. Two walk orders are swept and the better
        # assignment kept: the pinning priority order, and CPU-cost density
        # order (time saved per scratch byte), which matters for expert
        # groups whose resident bytes far exceed their routed traffic.
        def density(s: SubLayerShard) -> float:
            return rates.cpu_alone[id_to_idx[s.id]] / s.weight_bytes

        by_density = sorted(remaining, key=lambda s: (-density(s), s.priority,
                                                      s.layer_index, s.id))
        best_time, best_ids = None, set()
        for order in (remaining, by_density):
            exec_arr = list(base_exec)
            chosen: set[int] = set()
            used = 0.0
            for k in range(0, len(order) + 1):
                if k > 0:
                    s = order[k - 1]
                    if s.weight_bytes > scratch - acts - used:
                        continue
                    chosen.add(s.id)
                    used += s.weight_bytes
                    exec_arr[id_to_idx[s.id]] = Backend.GPU
                time, _, _ = _walk_plan(rates, machine, exec_arr, no_streams)
                if best_time is None or time < best_time:
                    best_time, best_ids = time, set(chosen)
        return materialize(PlanKind.STATIC, best_ids, set())

    def sweep_dynamic() -> SchedulePlan:
        # At least one shard stays on the CPU so the plan remains a genuinely
        # hybrid alternative to the gpu-only plan.
        slot = (scratch - acts) / 2.0
        exec_arr = list(base_exec)
        streams_arr = [False] * n
        best_time, best_k = None, 0
        feasible_k = True
        for k in range(0, max(0, len(remaining) - 1) + 1):
            if k > 0:
                idx = id_to_idx[remaining[k - 1].id]
                if shards[idx].weight_bytes > slot:
                    feasible_k = False  # double buffer cannot hold this shard
                exec_arr[idx] = Backend.GPU
                streams_arr[idx] = True
            if not feasible_k:
                continue
            time, _, _ = _walk_plan(rates, machine, exec_arr, streams_arr)
            if best_time is None or time < best_time:
                best_time, best_k = time, k
        return materialize(PlanKind.DYNAMIC, set(),
                           {s.id for s in remaining[:best_k]})

    return [gpu_only, sweep_static(), sweep_dynamic()]


def estimate_plan_time(
    plan: SchedulePlan, shards: list[SubLayerShard], db: ProfileDb,
    machine: MachineSpec, tier_tokens: int, context_len: int,
) -> float:
    """Recompute a plan's estimated time from its placements."""
    by_id = {p.shard_id: p for p in plan.placements}
    missing = [s.id for s in shards if s.id not in by_id]
    if missing:
        raise SpecError(f"plan does not cover shards {missing}")
    rates = _rates_for(shards, db, machine, tier_tokens, context_len)
    exec_backend = [by_id[s.id].exec_backend for s in shards]
    streams = [by_id[s.id].streaming in (Streaming.WEIGHTS_H2D, Streaming.KV_H2D,
                                         Streaming.WEIGHTS_AND_KV)
               for s in shards]
    time, _, _ = _walk_plan(rates, machine, exec_backend, streams)
    return time


def select_plan(plans: list[SchedulePlan]) -> SchedulePlan:
    feasible = [p for p in plans if p.feasible]
    if not feasible:
        raise InfeasibleBudget(0.0, min(p.scratch_bytes_required for p in plans),
                               "any schedule plan")
    return min(feasible, key=lambda p: (p.estimated_time, p.pcie_total_bytes,
                                        _KIND_RANK[p.kind]))


@dataclass(frozen=True)
class TierEntry:
    tier: int
    plan: SchedulePlan


@dataclass(frozen=True)
class TierTable:
    model: str
    machine: str
    budget_bytes: float
    context_len: int
    entries: dict[int, TierEntry]

    def __post_init__(self):
        if set(self.entries) != set(TIERS):
            raise SpecError(f"tier table must cover exactly {TIERS}")

    def time_for(self, tier: int) -> float:
        return self.entries[tier].plan.estimated_time


def plan_tier(
    spec: ModelSpec, machine: MachineSpec, db: ProfileDb,
    budget: float, context_len: int, tier_tokens: int, kv_replicas: int = 1,
) -> tuple[list[SubLayerShard], PinResult, BudgetSplit, list[SchedulePlan]]:
    """Shared planning pipeline for one tier: shard, split, pin, three plans."""
    if budget > machine.vram_capacity:
        raise InfeasibleSchedule(
            f"budget {budget / 1e6:.0f} MB exceeds {machine.name}'s "
            f"{machine.vram_capacity / 1e6:.0f} MB of VRAM")
    shards = build_shards(spec, context_len, kv_replicas)
    split = decide_scratch_budget(budget, shards, tier_tokens)
    pin = pin_shards(split.pinned, shards)
    plans = heuristic_split(shards, pin, db, machine, tier_tokens,
                            context_len, split.scratch)
    return shards, pin, split, plans


def build_tier_table(
    spec: ModelSpec, machine: MachineSpec, db: ProfileDb,
    budget: float, context_len: int, kv_replicas: int = 1,
) -> TierTable:
    entries = {}
    for tier in TIERS:
        _, _, _, plans = plan_tier(spec, machine, db, budget, context_len,
                                   tier, kv_replicas)
        entries[tier] = TierEntry(tier=tier, plan=select_plan(plans))
    return TierTable(model=spec.name, machine=machine.name,
                     budget_bytes=budget, context_len=context_len, entries=entries)


def pick_tier(table: TierTable, batch_new_tokens: int) -> int:
    """Tier minimizing passes * per-pass time; ties go to the smaller tier."""
    if batch_new_tokens < 1:
        raise SpecError(f"batch_new_tokens must be >= 1, got {batch_new_tokens}")
    best_tier, best_product = None, None
    for tier in TIERS:
        product = -(-batch_new_tokens // tier) * table.time_for(tier)
        if best_product is None or product < best_product:
            best_tier, best_product = tier, product
    return best_tier


# -- tier table persistence ----------------------------------------------------

def _plan_to_dict(plan: SchedulePlan) -> dict:
    return {
        "kind": plan.kind.value,
        "estimated_time_s": plan.estimated_time,
        "pcie_h2d_bytes": plan.pcie_h2d_bytes,
        "pcie_d2h_bytes": plan.pcie_d2h_bytes,
        "scratch_bytes_required": plan.scratch_bytes_required,
        "feasible": plan.feasible,
        "placements": [
            {
                "shard_id": p.shard_id,
                "residency": p.residency.value,
                "exec": p.exec_backend.value,
                "streaming": p.streaming.value,
            }
            for p in plan.placements
        ],
    }


def _plan_from_dict(doc: dict) -> SchedulePlan:
    return SchedulePlan(
        kind=PlanKind(doc["kind"]),
        placements=tuple(
            Placement(int(p["shard_id"]), Residency(p["residency"]),
                      Backend(p["exec"]), Streaming(p["streaming"]))
            for p in doc["placements"]
        ),
        estimated_time=float(doc["estimated_time_s"]),
        pcie_h2d_bytes=float(doc["pcie_h2d_bytes"]),
        pcie_d2h_bytes=float(doc["pcie_d2h_bytes"]),
        scratch_bytes_required=float(doc["scratch_bytes_required"]),
        feasible=bool(doc["feasible"]),
    )


def table_to_dict(table: TierTable) -> dict:
    return {
        "format": TIER_TABLE_FORMAT,
        "model": table.model,
        "machine": table.machine,
        "budget_bytes": table.budget_bytes,
        "context_len": table.context_len,
        "tiers": [
            {"tier": tier, "plan": _plan_to_dict(table.entries[tier].plan)}
            for tier in TIERS
        ],
    }


def table_from_dict(doc: dict) -> TierTable:
    if doc.get("format") != TIER_TABLE_FORMAT:
        raise FormatError(f"expected {TIER_TABLE_FORMAT}, got {doc.get('format')!r}")
    entries = {
        int(row["tier"]): TierEntry(int(row["tier"]), _plan_from_dict(row["plan"]))
        for row in doc["tiers"]
    }
    return TierTable(model=doc["model"], machine=doc["machine"],
                     budget_bytes=float(doc["budget_bytes"]),
                     context_len=int(doc["context_len"]), entries=entries)


def save_table(table: TierTable, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(table_to_dict(table), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_table(path: str | Path) -> TierTable:
    with open(path, "r", encoding="utf-8") as fh:
        return table_from_dict(json.load(fh))

"""Discrete-event simulation of schedules on a modeled CPU-GPU-PCIe machine.

The simulator is the validation oracle for the planner: it executes a
schedule plan's shard chain under a two-slot double-buffer pipeline
discipline and reports the true makespan of one pass, with per-resource
busy times. Shard compute is priced directly from the machine's parametric
curves (not the profile database), so the planner's profile-driven
estimates are checked against an independently computed ground truth of
the same modeled hardware.

Pipeline discipline per pass: each PCIe direction is an in-order channel;
upload k of the streamed sequence may start once upload k-1 finished and
slot (k mod 2) was released by the compute of streamed shard k-2; compute
waits for its own upload and its predecessor's output (plus an activation
hop when the predecessor ran on the other backend); KV write-back follows
the producing compute on the device-to-host channel. When a plan both
streams and computes on the CPU, the shared memory controller derates CPU
bandwidth and PCIe rates symmetrically.

On top of single passes, `simulate_inference` runs a request batch through
the tier table: every iteration picks the tier minimizing passes times
per-pass time, consumes prompt chunks or decode tokens, and accumulates
TTFT, decode TPS, and the normalized end-to-end latency TTFT + 100/TPS.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, replace
from pathlib import Path

from .errors import InfeasibleBudget, InfeasibleSchedule, SpecError
from .kernels import Backend
from .machine import MachineSpec
from .model_graph import ModelSpec, SubLayerShard, build_shards
from .planner import (
    PlanKind,
    Residency,
    SchedulePlan,
    Streaming,
    TIERS,
    TierTable,
    _KIND_RANK,
    build_tier_table,
    pick_tier,
    plan_tier,
    select_plan,
)
from .profile_db import ProfileDb, synth_profile

SWEEP_FORMAT = "shardplan-sweep/v1"
SWEEP_COLUMNS = ("model", "budget_mb", "context", "batch", "ttft_s", "tps",
                 "e2el_s", "interactive", "plan_digest", "status")

INTERACTIVE_TPS = 5.0
NORMALIZED_OUTPUT_TOKENS = 100

_PLAN_DIGEST = {PlanKind.GPU_ONLY: "G", PlanKind.STATIC: "S", PlanKind.DYNAMIC: "D"}


@dataclass(frozen=True)
class Request:
    prompt_len: int
    gen_len: int

    def __post_init__(self):
        if self.prompt_len < 1 or self.gen_len < 1:
            raise SpecError("requests need prompt_len >= 1 and gen_len >= 1")


@dataclass(frozen=True)
class ResourceBusy:
    cpu: float = 0.0
    gpu: float = 0.0
    pcie_h2d: float = 0.0
    pcie_d2h: float = 0.0


@dataclass(frozen=True)
class ScheduleSim:
    latency: float
    busy: ResourceBusy
    pcie_h2d_bytes: float
    pcie_d2h_bytes: float


@dataclass(frozen=True)
class IterationLog:
    tier: int
    plan_kind: PlanKind
    latency: float
    busy: ResourceBusy
    new_tokens: int


@dataclass(frozen=True)
class SimResult:
    ttft: float
    tps: float
    e2el: float
    per_iteration: tuple[IterationLog, ...]


def _shard_machine_time(shard: SubLayerShard, backend: Backend, machine: MachineSpec,
                        tier_tokens: int, context_len: int, contended: bool) -> float:
    total = 0.0
    for req in shard.kernels(tier_tokens, context_len):
        if backend is Backend.GPU:
            total += machine.gpu_time(req.flops, req.bytes)
        else:
            total += machine.cpu_time(req.flops, req.bytes,
                                      machine.threads_available, contended)
    return total


def simulate_schedule(
    plan: SchedulePlan, shards: list[SubLayerShard], machine: MachineSpec,
    tier_tokens: int, context_len: int,
) -> ScheduleSim:
    """Event-time recurrence for one pass of a plan's shard chain."""
    by_id = {p.shard_id: p for p in plan.placements}
    missing = [s.id for s in shards if s.id not in by_id]
    if missing:
        raise SpecError(f"plan does not cover shards {missing}")

    exec_backend = [by_id[s.id].exec_backend for s in shards]
    streams = [by_id[s.id].streaming in (Streaming.WEIGHTS_H2D, Streaming.KV_H2D,
                                         Streaming.WEIGHTS_AND_KV)
               for s in shards]
    h2d_bytes = [s.weight_bytes if streams[i] else 0.0 for i, s in enumerate(shards)]
    d2h_bytes = [s.kv_append_bytes(tier_tokens) if streams[i] else 0.0
                 for i, s in enumerate(shards)]
    act_bytes = shards[0].spec.activation_bytes(tier_tokens)

    resident = sum(s.weight_bytes for s in shards
                   if by_id[s.id].residency is Residency.VRAM_PINNED)
    acts_peak = max(s.peak_activation_bytes(tier_tokens) for s in shards)
    slot_bytes = 2.0 * max((h2d_bytes[i] for i in range(len(shards)) if streams[i]),
                           default=0.0)
    vram_demand = resident + acts_peak + slot_bytes
    if vram_demand > machine.vram_capacity:
        raise InfeasibleSchedule(
            f"plan needs {vram_demand / 1e9:.2f} GB of "
            f"{machine.vram_capacity / 1e9:.2f} GB VRAM")

    any_cpu = any(b is Backend.CPU for b in exec_backend)
    contended = any_cpu and (sum(h2d_bytes) + sum(d2h_bytes)) > 0
    h2d_rate = machine.pcie_rate(h2d=True, contended=contended)
    d2h_rate = machine.pcie_rate(h2d=False, contended=contended)

    compute = [_shard_machine_time(s, exec_backend[i], machine, tier_tokens,
                                   context_len, contended)
               for i, s in enumerate(shards)]

    stream_order = [i for i in range(len(shards)) if streams[i]]
    stream_pos = {i: j for j, i in enumerate(stream_order)}

    compute_end = [0.0] * len(shards)
    h2d_free = d2h_free = 0.0
    busy_cpu = busy_gpu = busy_h2d = busy_d2h = 0.0
    pcie_h2d = pcie_d2h = 0.0
    prev_end = 0.0

    for i in range(len(shards)):
        upload_ready = 0.0
        if streams[i]:
            j = stream_pos[i]
            slot_free = compute_end[stream_order[j - 2]] if j >= 2 else 0.0
            start = max(h2d_free, slot_free)
            dur = h2d_bytes[i] / h2d_rate
            h2d_free = start + dur
            busy_h2d += dur
            pcie_h2d += h2d_bytes[i]
            upload_ready = h2d_free

        ready = prev_end
        if i > 0 and exec_backend[i] is not exec_backend[i - 1]:
            to_gpu = exec_backend[i] is Backend.GPU
            dur = act_bytes / (h2d_rate if to_gpu else d2h_rate)
            if to_gpu:
                start = max(ready, h2d_free)
                h2d_free = start + dur
                busy_h2d += dur
                pcie_h2d += act_bytes
                ready = h2d_free
            else:
                start = max(ready, d2h_free)
                d2h_free = start + dur
                busy_d2h += dur
                pcie_d2h += act_bytes
                ready = d2h_free

        start = max(ready, upload_ready)
        compute_end[i] = start + compute[i]
        if exec_backend[i] is Backend.GPU:
            busy_gpu += compute[i]
        else:
            busy_cpu += compute[i]
        prev_end = compute_end[i]

        if streams[i] and d2h_bytes[i] > 0:
            start = max(d2h_free, compute_end[i])
            dur = d2h_bytes[i] / d2h_rate
            d2h_free = start + dur
            busy_d2h += dur
            pcie_d2h += d2h_bytes[i]

    makespan = max(prev_end, h2d_free, d2h_free)
    return ScheduleSim(
        latency=makespan,
        busy=ResourceBusy(cpu=busy_cpu, gpu=busy_gpu,
                          pcie_h2d=busy_h2d, pcie_d2h=busy_d2h),
        pcie_h2d_bytes=pcie_h2d,
        pcie_d2h_bytes=pcie_d2h,
    )


def oracle_best_plan(
    spec: ModelSpec, machine: MachineSpec, db: ProfileDb,
    budget: float, tier_tokens: int, context_len: int, kv_replicas: int = 1,
) -> PlanKind:
    """Simulate all three candidate plans and return the fastest feasible kind."""
    shards, _, _, plans = plan_tier(spec, machine, db, budget, context_len,
                                    tier_tokens, kv_replicas)
    results = []
    for plan in plans:
        if not plan.feasible:
            continue
        sim = simulate_schedule(plan, shards, machine, tier_tokens, context_len)
        results.append((sim.latency, plan.pcie_total_bytes, _KIND_RANK[plan.kind],
                        plan.kind))
    if not results:
        raise InfeasibleBudget(budget, min(p.scratch_bytes_required for p in plans),
                               "any schedule plan")
    return min(results)[3]


def simulate_inference(
    requests: list[Request], table: TierTable, shards: list[SubLayerShard],
    machine: MachineSpec,
) -> SimResult:
    """Run a request batch to completion through the tier table.

    Each iteration picks a tier for the outstanding batch-wide new tokens,
    then one pass of that tier's plan consumes up to tier tokens: decode
    requests take one slot each, context requests take chunks of what is
    left. A request's first output token arrives with its final prompt
    chunk, which fixes TTFT for the first request. TPS is measured over
    decode-only iterations; E2EL is reported for a normalized 100-token
    output as TTFT + 100 / TPS.
    """
    if not requests:
        raise SpecError("simulate_inference needs at least one request")
    context_len = table.context_len
    prompt_left = [r.prompt_len for r in requests]
    gen_left = [r.gen_len for r in requests]

    pass_cache: dict[int, ScheduleSim] = {}

    def pass_sim(tier: int) -> ScheduleSim:
        if tier not in pass_cache:
            plan = table.entries[tier].plan
            pass_cache[tier] = simulate_schedule(plan, shards, machine, tier, context_len)
        return pass_cache[tier]

    clock = 0.0
    ttft = None
    decode_tokens = 0
    decode_time = 0.0
    log: list[IterationLog] = []

    while any(p > 0 for p in prompt_left) or any(g > 0 for g in gen_left):
        outstanding = sum(p if p > 0 else (1 if g > 0 else 0)
                          for p, g in zip(prompt_left, gen_left))
        tier = pick_tier(table, outstanding)
        sim = pass_sim(tier)
        capacity = tier
        context_consumed = 0
        decoded = 0
        first_prompt_done = False
        for idx in range(len(requests)):
            if capacity <= 0:
                break
            if prompt_left[idx] > 0:
                take = min(prompt_left[idx], capacity)
                prompt_left[idx] -= take
                capacity -= take
                context_consumed += take
                if prompt_left[idx] == 0:
                    gen_left[idx] -= 1  # final chunk emits the first token
                    if idx == 0:
                        first_prompt_done = True
            elif gen_left[idx] > 0:
                gen_left[idx] -= 1
                capacity -= 1
                decoded += 1
        clock += sim.latency
        if first_prompt_done and ttft is None:
            ttft = clock
        if context_consumed == 0 and decoded > 0:
            decode_tokens += decoded
            decode_time += sim.latency
        log.append(IterationLog(
            tier=tier, plan_kind=table.entries[tier].plan.kind,
            latency=sim.latency, busy=sim.busy,
            new_tokens=context_consumed + decoded,
        ))

    if ttft is None:
        ttft = clock
    tps = decode_tokens / decode_time if decode_time > 0 else float("inf")
    e2el = ttft + NORMALIZED_OUTPUT_TOKENS / tps
    return SimResult(ttft=ttft, tps=tps, e2el=e2el, per_iteration=tuple(log))


# -- sweeps --------------------------------------------------------------------


@dataclass(frozen=True)
class SweepRow:
    model: str
    budget_mb: int
    context: int
    batch: int
    ttft_s: float
    tps: float
    e2el_s: float
    interactive: bool
    plan_digest: str
    status: str


def plan_digest(table: TierTable) -> str:
    return "".join(_PLAN_DIGEST[table.entries[t].plan.kind] for t in TIERS)


def sweep(
    models: list[ModelSpec], machine: MachineSpec, db: ProfileDb,
    budgets_mb: list[int], context_lens: list[int], batch_sizes: list[int],
    gen_len: int = NORMALIZED_OUTPUT_TOKENS,
) -> list[SweepRow]:
    """One row per configuration; infeasible rows are recorded, not fatal."""
    if not models or not budgets_mb or not context_lens or not batch_sizes:
        raise SpecError("sweep axes must be non-empty")
    rows = []
    for spec in models:
        for budget_mb in budgets_mb:
            for context in context_lens:
                for batch in batch_sizes:
                    rows.append(_sweep_row(spec, machine, db, budget_mb,
                                           context, batch, gen_len))
    rows.sort(key=lambda r: (r.model, r.budget_mb, r.context, r.batch))
    return rows


def _sweep_row(spec, machine, db, budget_mb, context, batch, gen_len) -> SweepRow:
    try:
        table = build_tier_table(spec, machine, db, budget_mb * 1e6, context,
                                 kv_replicas=batch)
        shards = build_shards(spec, context, kv_replicas=batch)
        prompt = max(1, context - gen_len)
        result = simulate_inference([Request(prompt, gen_len)] * batch,
                                    table, shards, machine)
        return SweepRow(
            model=spec.name, budget_mb=budget_mb, context=context, batch=batch,
            ttft_s=result.ttft, tps=result.tps, e2el_s=result.e2el,
            interactive=result.tps >= INTERACTIVE_TPS,
            plan_digest=plan_digest(table), status="ok",
        )
    except (InfeasibleBudget, InfeasibleSchedule) as exc:
        return SweepRow(
            model=spec.name, budget_mb=budget_mb, context=context, batch=batch,
            ttft_s=float("nan"), tps=float("nan"), e2el_s=float("nan"),
            interactive=False, plan_digest="", status=f"infeasible: {exc}",
        )


def sweep_to_csv(rows: list[SweepRow]) -> str:
    buf = io.StringIO()
    buf.write(f"# {SWEEP_FORMAT}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SWEEP_COLUMNS)
    for r in rows:
        writer.writerow([
            r.model, r.budget_mb, r.context, r.batch,
            repr(r.ttft_s), repr(r.tps), repr(r.e2el_s),
            int(r.interactive), r.plan_digest, r.status,
        ])
    return buf.getvalue()


def save_sweep(rows: list[SweepRow], path: str | Path) -> None:
    Path(path).write_text(sweep_to_csv(rows), encoding="utf-8")


# -- planner-vs-oracle validation grid ------------------------------------------


@dataclass(frozen=True)
class GridConfig:
    model: str
    pcie_bw: float
    threads: int
    context: int
    budget_mb: int


@dataclass(frozen=True)
class GridOutcome:
    config: GridConfig
    planner_choice: PlanKind | None
    oracle_choice: PlanKind | None
    agree: bool
    feasible: bool


@dataclass(frozen=True)
class ValidationReport:
    outcomes: tuple[GridOutcome, ...]
    agreement: float
    oracle_wins: dict[PlanKind, int]

    @property
    def feasible_count(self) -> int:
        return sum(1 for o in self.outcomes if o.feasible)


DEFAULT_GRID_PCIE = (13e9, 50e9)       # throttled and full-rate interconnects
DEFAULT_GRID_THREADS = (1, 4, 16)      # starved, partial, and saturating CPU
DEFAULT_GRID_CONTEXTS = (4096, 16384)
DEFAULT_GRID_BUDGETS_MB = (2000, 4000, 6000, 8000, 12000, 16000, 32000)
VALIDATION_TIER = 1                     # decode-phase schedules, as measured


def validation_grid(
    models: list[ModelSpec], machine: MachineSpec,
    pcie_rates=DEFAULT_GRID_PCIE, thread_counts=DEFAULT_GRID_THREADS,
    contexts=DEFAULT_GRID_CONTEXTS, budgets_mb=DEFAULT_GRID_BUDGETS_MB,
) -> ValidationReport:
    """Planner selection vs simulation oracle over a machine-condition grid."""
    outcomes = []
    wins = {kind: 0 for kind in PlanKind}
    profiles: dict[tuple, ProfileDb] = {}
    # Clamp the thread axis to what the machine's scaling curve supports.
    usable_threads = []
    for t in thread_counts:
        t = min(t, len(machine.cpu_scaling))
        if t not in usable_threads:
            usable_threads.append(t)
    for spec in models:
        for pcie in pcie_rates:
            for threads in usable_threads:
                variant = replace(machine, pcie_h2d_bw=pcie, pcie_d2h_bw=pcie,
                                  threads_available=threads,
                                  name=f"{machine.name}-p{pcie:.0f}-t{threads}")
                key = (pcie, threads)
                if key not in profiles:
                    profiles[key] = synth_profile(variant)
                db = profiles[key]
                for context in contexts:
                    for budget_mb in budgets_mb:
                        cfg = GridConfig(spec.name, pcie, threads, context, budget_mb)
                        outcomes.append(_grid_outcome(cfg, spec, variant, db))
    for o in outcomes:
        if o.feasible and o.oracle_choice is not None:
            wins[o.oracle_choice] += 1
    feasible = [o for o in outcomes if o.feasible]
    agreement = (sum(1 for o in feasible if o.agree) / len(feasible)) if feasible else 0.0
    return ValidationReport(tuple(outcomes), agreement, wins)


def _grid_outcome(cfg: GridConfig, spec, machine, db) -> GridOutcome:
    try:
        shards, _, _, plans = plan_tier(spec, machine, db, cfg.budget_mb * 1e6,
                                        cfg.context, VALIDATION_TIER)
        planned = select_plan(plans).kind
        sims = []
        for plan in plans:
            if not plan.feasible:
                continue
            sim = simulate_schedule(plan, shards, machine, VALIDATION_TIER, cfg.context)
            sims.append((sim.latency, plan.pcie_total_bytes, _KIND_RANK[plan.kind],
                         plan.kind))
        oracled = min(sims)[3]
        return GridOutcome(cfg, planned, oracled, planned is oracled, True)
    except (InfeasibleBudget, InfeasibleSchedule):
        return GridOutcome(cfg, None, None, False, False)

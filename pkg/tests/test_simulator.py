import math

import pytest

from shardplan import presets
from shardplan.errors import InfeasibleSchedule, SpecError
from shardplan.kernels import Backend
from shardplan.machine import MachineSpec
from shardplan.model_graph import ModelSpec, build_shards
from shardplan.planner import (
    PlanKind,
    Placement,
    Residency,
    SchedulePlan,
    Streaming,
    TIERS,
    build_tier_table,
    plan_tier,
    select_plan,
)
from shardplan.profile_db import synth_profile
from shardplan.simulator import (
    Request,
    _KIND_RANK,
    oracle_best_plan,
    simulate_inference,
    simulate_schedule,
    sweep,
    sweep_to_csv,
)

GB = 1e9

TOY_QUANT = {"attn_weights": 2.0, "ffn_weights": 2.0, "output_weights": 2.0,
             "kv_cache": 2.0, "activations": 2.0}


def toy_model(**over):
    args = dict(name="toy", n_layers=2, d_model=64, n_heads=4, n_kv_heads=4,
                head_dim=16, ffn_dim=128, vocab_size=512, max_context=2048,
                quant=dict(TOY_QUANT), elementwise_epsilon=0.0)
    args.update(over)
    return ModelSpec(**args)


def toy_machine(**over):
    args = dict(name="toybox", vram_capacity=64 * GB, gpu_flops=1e12,
                gpu_mem_bw=1e12, cpu_thread_flops=1e10, cpu_scaling=(1.0, 1.9),
                sysram_bw=5e10, pcie_h2d_bw=1e6, pcie_d2h_bw=1e6,
                contention_alpha=0.5, threads_available=2,
                cpu_bw_saturation_threads=1, gpu_launch_overhead_s=0.0)
    args.update(over)
    return MachineSpec(**args)


def all_pinned_plan(shards):
    return SchedulePlan(
        kind=PlanKind.STATIC,
        placements=tuple(Placement(s.id, Residency.VRAM_PINNED, Backend.GPU,
                                   Streaming.NONE) for s in shards),
        estimated_time=0.0, pcie_h2d_bytes=0.0, pcie_d2h_bytes=0.0,
        scratch_bytes_required=0.0)


def shard_gpu_time(shard, machine, tier, ctx):
    total = 0.0
    for req in shard.kernels(tier, ctx):
        total += machine.gpu_time(req.flops, req.bytes)
    return total


# -- simulate_schedule ------------------------------------------------------------


def test_zero_streaming_is_exact_sum_of_compute():
    spec, machine = toy_model(), toy_machine()
    shards = build_shards(spec, 256)
    sim = simulate_schedule(all_pinned_plan(shards), shards, machine, 8, 256)
    expected = 0.0
    for s in shards:  # same left-to-right accumulation as the event loop
        expected += shard_gpu_time(s, machine, 8, 256)
    assert sim.latency == expected  # bit-exact
    assert sim.busy.gpu == expected
    assert sim.busy.cpu == 0.0
    assert sim.pcie_h2d_bytes == 0.0 and sim.pcie_d2h_bytes == 0.0


def test_transfer_bound_limit_matches_link_rate():
    # Compute rates a million-fold above the link speed: the makespan is the
    # serialized upload chain, within 0.1%.
    spec = toy_model()
    machine = toy_machine(gpu_flops=1e18, gpu_mem_bw=1e18, pcie_h2d_bw=1e6,
                          pcie_d2h_bw=1e6)
    db = synth_profile(machine)
    shards, pin, split, plans = plan_tier(spec, machine, db, 200_000, 128, 1)
    gpu_only = plans[0]
    sim = simulate_schedule(gpu_only, shards, machine, 1, 128)
    h2d_time = sim.pcie_h2d_bytes / machine.pcie_h2d_bw
    d2h_time = sim.pcie_d2h_bytes / machine.pcie_d2h_bw
    assert sim.latency == pytest.approx(max(h2d_time, d2h_time), rel=1e-3)


def test_hand_traced_double_buffer_recurrence():
    # Re-derive the event times by hand for one pass: uploads serialize on
    # the link and wait for their slot (freed by the compute two streamed
    # shards earlier); compute waits for its own upload and its predecessor.
    spec, machine = toy_model(), toy_machine()
    db = synth_profile(machine)
    shards, pin, split, plans = plan_tier(spec, machine, db, 200_000, 128, 4)
    gpu_only = plans[0]
    streams = {p.shard_id: p.streaming is not Streaming.NONE
               for p in gpu_only.placements}
    assert sum(streams.values()) >= 3, "toy case should stream several shards"

    compute = [shard_gpu_time(s, machine, 4, 128) for s in shards]
    h2d = [s.weight_bytes if streams[s.id] else 0.0 for s in shards]
    d2h = [s.kv_append_bytes(4) if streams[s.id] else 0.0 for s in shards]
    rate = machine.pcie_h2d_bw

    order = [i for i in range(len(shards)) if streams[shards[i].id]]
    transfer_end = {}
    compute_end = [0.0] * len(shards)
    link_free = 0.0
    d2h_free = 0.0
    prev = 0.0
    for i in range(len(shards)):
        if streams[shards[i].id]:
            j = order.index(i)
            slot = compute_end[order[j - 2]] if j >= 2 else 0.0
            start = max(link_free, slot)
            link_free = start + h2d[i] / rate
            transfer_end[i] = link_free
        start = max(prev, transfer_end.get(i, 0.0))
        compute_end[i] = start + compute[i]
        prev = compute_end[i]
        if streams[shards[i].id] and d2h[i] > 0:
            d2h_free = max(d2h_free, compute_end[i]) + d2h[i] / machine.pcie_d2h_bw
    expected = max(prev, link_free, d2h_free)

    sim = simulate_schedule(gpu_only, shards, machine, 4, 128)
    assert sim.latency == pytest.approx(expected, rel=1e-12)


def test_busy_times_never_exceed_makespan(nemo8b, workstation, workstation_db):
    for tier in (1, 64, 4096):
        shards, pin, split, plans = plan_tier(nemo8b, workstation, workstation_db,
                                              4 * GB, 4096, tier)
        for plan in plans:
            if not plan.feasible:
                continue
            sim = simulate_schedule(plan, shards, workstation, tier, 4096)
            for busy in (sim.busy.cpu, sim.busy.gpu, sim.busy.pcie_h2d,
                         sim.busy.pcie_d2h):
                assert busy <= sim.latency + 1e-12
            assert sim.latency >= max(sim.busy.cpu, sim.busy.gpu,
                                      sim.busy.pcie_h2d, sim.busy.pcie_d2h) - 1e-12


def test_simulated_pcie_bytes_match_plan_declaration(nemo8b, workstation,
                                                     workstation_db):
    shards, pin, split, plans = plan_tier(nemo8b, workstation, workstation_db,
                                          6 * GB, 4096, 16)
    for plan in plans:
        if not plan.feasible:
            continue
        sim = simulate_schedule(plan, shards, workstation, 16, 4096)
        assert sim.pcie_h2d_bytes == plan.pcie_h2d_bytes
        assert sim.pcie_d2h_bytes == plan.pcie_d2h_bytes


def test_more_pinning_never_hurts_single_pass(nemo8b, workstation, workstation_db):
    latencies = []
    for budget in (2 * GB, 4 * GB, 8 * GB, 16 * GB, 32 * GB):
        shards, pin, split, plans = plan_tier(nemo8b, workstation, workstation_db,
                                              budget, 4096, 1)
        best = select_plan(plans)
        latencies.append(simulate_schedule(best, shards, workstation, 1, 4096).latency)
    for a, b in zip(latencies, latencies[1:]):
        assert b <= a * 1.01


def test_vram_capacity_enforced():
    spec = toy_model()
    machine = toy_machine(vram_capacity=1000.0)  # 1 KB of VRAM
    shards = build_shards(spec, 256)
    with pytest.raises(InfeasibleSchedule):
        simulate_schedule(all_pinned_plan(shards), shards, machine, 1, 256)


def test_determinism_bit_identical(nemo8b, workstation, workstation_db):
    shards, pin, split, plans = plan_tier(nemo8b, workstation, workstation_db,
                                          4 * GB, 4096, 32)
    plan = select_plan(plans)
    a = simulate_schedule(plan, shards, workstation, 32, 4096)
    b = simulate_schedule(plan, shards, workstation, 32, 4096)
    assert a == b


# -- oracle -----------------------------------------------------------------------


def test_oracle_picks_minimum_simulated_latency(nemo8b, workstation, workstation_db):
    shards, pin, split, plans = plan_tier(nemo8b, workstation, workstation_db,
                                          8 * GB, 4096, 1)
    sims = {p.kind: simulate_schedule(p, shards, workstation, 1, 4096).latency
            for p in plans if p.feasible}
    best = oracle_best_plan(nemo8b, workstation, workstation_db, 8 * GB, 1, 4096)
    assert sims[best] == min(sims.values())


# -- simulate_inference -------------------------------------------------------------


def test_smallest_trace_two_iterations(nemo8b, workstation, workstation_db):
    table = build_tier_table(nemo8b, workstation, workstation_db, 8 * GB, 4096)
    shards = build_shards(nemo8b, 4096)
    result = simulate_inference([Request(prompt_len=1, gen_len=2)],
                                table, shards, workstation)
    # Pass one consumes the single prompt token and emits the first output
    # token; pass two decodes the second.
    assert len(result.per_iteration) == 2
    assert result.ttft == pytest.approx(result.per_iteration[0].latency)
    assert result.per_iteration[1].tier == 1


def test_batch_of_64_decoders_uses_tier_64(nemo8b, workstation, workstation_db):
    from shardplan.planner import pick_tier
    table = build_tier_table(nemo8b, workstation, workstation_db, 8 * GB, 1024,
                             kv_replicas=64)
    shards = build_shards(nemo8b, 1024, kv_replicas=64)
    result = simulate_inference([Request(prompt_len=1, gen_len=3)] * 64,
                                table, shards, workstation)
    decode_iters = [it for it in result.per_iteration if it.new_tokens == 64]
    assert decode_iters
    assert decode_iters[-1].tier == pick_tier(table, 64)


def test_chunked_prefill_pass_count(nemo8b, workstation, workstation_db):
    table = build_tier_table(nemo8b, workstation, workstation_db, 8 * GB, 16384)
    shards = build_shards(nemo8b, 16384)
    prompt = 10000
    result = simulate_inference([Request(prompt_len=prompt, gen_len=2)],
                                table, shards, workstation)
    context_iters = [it for it in result.per_iteration
                     if it.tier >= 512]  # prompt chunks
    consumed = sum(min(it.tier, it.new_tokens) for it in context_iters)
    assert consumed >= prompt
    assert result.ttft == pytest.approx(
        sum(it.latency for it in result.per_iteration[:len(context_iters)]))


def test_e2el_identity(nemo8b, workstation, workstation_db):
    table = build_tier_table(nemo8b, workstation, workstation_db, 8 * GB, 4096)
    shards = build_shards(nemo8b, 4096)
    result = simulate_inference([Request(prompt_len=3996, gen_len=100)],
                                table, shards, workstation)
    assert result.e2el == pytest.approx(result.ttft + 100.0 / result.tps, rel=1e-9)


def test_empty_batch_rejected(nemo8b, workstation, workstation_db):
    table = build_tier_table(nemo8b, workstation, workstation_db, 8 * GB, 4096)
    shards = build_shards(nemo8b, 4096)
    with pytest.raises(SpecError):
        simulate_inference([], table, shards, workstation)


# -- sweep -------------------------------------------------------------------------


def test_sweep_row_count_is_axis_product(workstation, workstation_db, nemo8b):
    rows = sweep([nemo8b], workstation, workstation_db,
                 budgets_mb=[4000, 8000], context_lens=[1024, 4096],
                 batch_sizes=[1])
    assert len(rows) == 4
    assert all(r.status == "ok" for r in rows)


def test_sweep_single_configuration(workstation, workstation_db, nemo8b):
    rows = sweep([nemo8b], workstation, workstation_db, [8000], [4096], [1])
    assert len(rows) == 1
    row = rows[0]
    assert row.model == "nemo8b" and row.budget_mb == 8000
    assert row.e2el_s == pytest.approx(row.ttft_s + 100.0 / row.tps, rel=1e-9)
    assert row.interactive == (row.tps >= 5.0)
    assert len(row.plan_digest) == len(TIERS)


def test_sweep_tps_non_decreasing_in_budget(workstation, workstation_db, nemo8b):
    rows = sweep([nemo8b], workstation, workstation_db,
                 budgets_mb=[2000, 4000, 8000], context_lens=[4096],
                 batch_sizes=[1])
    tps = [r.tps for r in sorted(rows, key=lambda r: r.budget_mb)]
    assert tps[0] <= tps[1] * 1.01 and tps[1] <= tps[2] * 1.01


def test_sweep_csv_layout(workstation, workstation_db, nemo8b):
    rows = sweep([nemo8b], workstation, workstation_db, [4000], [1024], [1])
    text = sweep_to_csv(rows)
    lines = text.splitlines()
    assert lines[0] == "# shardplan-sweep/v1"
    assert lines[1] == ("model,budget_mb,context,batch,ttft_s,tps,e2el_s,"
                        "interactive,plan_digest,status")
    assert len(lines) == 3


def test_sweep_records_infeasible_rows(workstation, workstation_db):
    spec = presets.builtin_model("qwen235b")
    rows = sweep([spec], workstation, workstation_db,
                 budgets_mb=[1000], context_lens=[16384], batch_sizes=[1])
    assert len(rows) == 1
    assert rows[0].status.startswith("infeasible")
    assert math.isnan(rows[0].tps)


def test_sweep_handles_gen_of_one(workstation, workstation_db, nemo8b):
    # The whole output arrives with the final prompt chunk: no decode
    # iterations, infinite TPS, E2EL collapses to TTFT.
    rows = sweep([nemo8b], workstation, workstation_db, [8000], [1024], [1],
                 gen_len=1)
    assert rows[0].status == "ok"
    assert rows[0].tps == float("inf")
    assert rows[0].e2el_s == rows[0].ttft_s


def test_sweep_shape_tps_in_budget_and_context(workstation, workstation_db, qwen30b):
    # Shape property across the grid: decode TPS never falls as the budget
    # grows and never rises as the context grows.
    budgets = [2000, 8000, 32000]
    contexts = [1024, 4096, 16384]
    rows = sweep([qwen30b], workstation, workstation_db, budgets, contexts, [1])
    tps = {(r.budget_mb, r.context): r.tps for r in rows}
    for ctx in contexts:
        series = [tps[(b, ctx)] for b in budgets]
        assert all(hi >= lo * 0.99 for lo, hi in zip(series, series[1:]))
    for b in budgets:
        series = [tps[(b, c)] for c in contexts]
        assert all(hi <= lo * 1.01 for lo, hi in zip(series, series[1:]))


def test_ttft_improves_with_budget_when_link_is_slow(nemo8b):
    # On a slow interconnect, prefill transfers are exposed, so extra pinning
    # budget shortens time to first token.
    machine = presets.builtin_machine("laptop")
    db = synth_profile(machine)
    rows = sweep([nemo8b], machine, db, [2000, 6000, 12000], [4096], [1])
    ttft = [r.ttft_s for r in sorted(rows, key=lambda r: r.budget_mb)]
    assert ttft[0] > ttft[-1]
    assert all(hi <= lo * 1.01 for lo, hi in zip(ttft, ttft[1:]))


# -- planner agreement on the other shipped machines --------------------------------


def test_oracle_agreement_holds_on_all_presets(nemo8b, qwen30b):
    from shardplan.simulator import validation_grid
    for name in ("desktop", "laptop"):
        machine = presets.builtin_machine(name)
        report = validation_grid([nemo8b, qwen30b], machine)
        assert report.feasible_count >= 100
        assert report.agreement >= 0.95, f"{name}: {report.agreement}"


def test_oracle_agreement_on_randomized_machines(nemo8b, qwen30b):
    # Estimator/oracle consistency must not depend on the preset calibration:
    # random machines across the whole parameter envelope, fixed seed.
    import random
    from shardplan.errors import InfeasibleBudget
    from shardplan.planner import select_plan

    rng = random.Random(424242)
    agree = total = 0
    for trial in range(50):
        threads = rng.choice([1, 2, 4, 8])
        curve, step, v = [], 1.0, 0.0
        for _ in range(threads):
            v += step
            curve.append(v)
            step = max(0.1, step * rng.uniform(0.6, 1.0))
        machine = MachineSpec(
            name=f"rand{trial}", vram_capacity=64 * GB,
            gpu_flops=rng.uniform(5e12, 5e14), gpu_mem_bw=rng.uniform(1e11, 3e12),
            cpu_thread_flops=rng.uniform(1e10, 2e11), cpu_scaling=tuple(curve),
            sysram_bw=rng.uniform(3e10, 4e11), pcie_h2d_bw=rng.uniform(4e9, 1.3e11),
            pcie_d2h_bw=rng.uniform(4e9, 1.3e11),
            contention_alpha=rng.uniform(0.3, 1.0), threads_available=threads,
            cpu_bw_saturation_threads=rng.choice([1, 2, 4, 8]))
        db = synth_profile(machine)
        spec = rng.choice([nemo8b, qwen30b])
        budget = rng.uniform(1.5 * GB, 30 * GB)
        ctx = rng.choice([4096, 16384])
        tier = rng.choice(list(TIERS))
        try:
            shards, _, _, plans = plan_tier(spec, machine, db, budget, ctx, tier)
        except InfeasibleBudget:
            continue
        planned = select_plan(plans).kind
        sims = {p.kind: simulate_schedule(p, shards, machine, tier, ctx).latency
                for p in plans if p.feasible}
        oracled = min(sims, key=lambda k: (sims[k], _KIND_RANK[k]))
        total += 1
        agree += planned is oracled
    assert total >= 40
    assert agree / total >= 0.9

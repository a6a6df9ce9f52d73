"""Command-line front end for the three-phase workflow plus sweeps and validation.

Subcommands: profile (synthesize an install-phase kernel database), plan
(build the per-tier schedule table), simulate (run a request batch and
report TTFT/TPS/E2EL), sweep (tabulate configurations to CSV), vlm-mem
(vision-side peak memory arithmetic), and validate (planner vs. simulation
oracle over a condition grid). Budgets are given in MB and must be
multiples of 1000.

Model and machine arguments accept either a spec file path or the name of
a preset shipped with the package.
"""

from __future__ import annotations

import argparse
import random
import sys
from pathlib import Path

from . import presets
from .errors import InfeasibleBudget, InfeasibleSchedule, ShardPlanError, SpecError
from .machine import MachineSpec, load_machine
from .model_graph import ModelSpec, build_shards, load_model
from .planner import PlanKind, TIERS, build_tier_table, save_table
from .profile_db import ProfileDb, load_profile, save_profile, synth_profile
from .simulator import (
    Request,
    save_sweep,
    simulate_inference,
    sweep,
    validation_grid,
)
from .vlm_memory import (
    VisionSpec,
    choose_chunk,
    flash_attn_peak_bytes,
    load_vision,
    naive_attn_peak_bytes,
    peak_vram,
    vision_encode_time,
    vision_peak_bytes,
    vision_token_count,
)

EXIT_OK = 0
EXIT_INFEASIBLE = 1
EXIT_USAGE = 2


def _resolve_model(arg: str) -> ModelSpec:
    if Path(arg).exists():
        return load_model(arg)
    return presets.builtin_model(arg)


def _resolve_machine(arg: str) -> MachineSpec:
    if Path(arg).exists():
        return load_machine(arg)
    return presets.builtin_machine(arg)


def _resolve_vision(arg: str) -> VisionSpec:
    if Path(arg).exists():
        return load_vision(arg)
    return presets.builtin_vision(arg)


def _resolve_profile(arg: str | None, machine: MachineSpec) -> ProfileDb:
    if arg is None:
        return synth_profile(machine)
    return load_profile(arg)


def _budget_bytes(budget_mb: int) -> float:
    if budget_mb <= 0 or budget_mb % 1000 != 0:
        raise SpecError(f"--budget-mb must be a positive multiple of 1000, got {budget_mb}")
    return budget_mb * 1e6


def _int_list(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x]


def cmd_profile(args) -> int:
    machine = _resolve_machine(args.machine)
    db = synth_profile(machine)
    save_profile(db, args.out)
    print(f"wrote {len(db)} entries for machine '{machine.name}' to {args.out}")
    return EXIT_OK


def cmd_plan(args) -> int:
    model = _resolve_model(args.model)
    machine = _resolve_machine(args.machine)
    db = _resolve_profile(args.profile, machine)
    table = build_tier_table(model, machine, db, _budget_bytes(args.budget_mb),
                             args.context, kv_replicas=args.batch)
    if args.out:
        save_table(table, args.out)
    print(f"model={model.name} machine={machine.name} "
          f"budget={args.budget_mb}M context={args.context}")
    print(f"{'tier':>6}  {'plan':>8}  {'est_time_s':>12}  {'h2d_bytes':>14}  {'d2h_bytes':>14}")
    for tier in TIERS:
        plan = table.entries[tier].plan
        print(f"{tier:>6}  {plan.kind.value:>8}  {plan.estimated_time:>12.6f}  "
              f"{plan.pcie_h2d_bytes:>14.0f}  {plan.pcie_d2h_bytes:>14.0f}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    model = _resolve_model(args.model)
    machine = _resolve_machine(args.machine)
    db = _resolve_profile(args.profile, machine)
    table = build_tier_table(model, machine, db, _budget_bytes(args.budget_mb),
                             args.context, kv_replicas=args.batch)
    shards = build_shards(model, args.context, kv_replicas=args.batch)
    requests = [Request(args.prompt, args.gen)] * args.batch
    result = simulate_inference(requests, table, shards, machine)
    print(f"model={model.name} machine={machine.name} budget={args.budget_mb}M "
          f"context={args.context} batch={args.batch} prompt={args.prompt} gen={args.gen}")
    print(f"ttft_s={result.ttft:.6f} tps={result.tps:.3f} e2el_s={result.e2el:.6f}")
    if args.vision_spec:
        vspec = _resolve_vision(args.vision_spec)
        width, height = (int(x) for x in args.image.split("x"))
        n_tok = vision_token_count(vspec, width, height)
        venc = vision_encode_time(vspec, n_tok, db)
        print(f"vision_tokens={n_tok} vision_enc_s={venc:.6f} "
              f"e2el_with_vision_s={venc + result.e2el:.6f}")
    if args.verbose:
        for i, it in enumerate(result.per_iteration):
            print(f"iter={i} tier={it.tier} plan={it.plan_kind.value} "
                  f"tokens={it.new_tokens} latency_s={it.latency:.6f}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    models = [_resolve_model(m) for m in args.models.split(",")]
    machine = _resolve_machine(args.machine)
    db = _resolve_profile(args.profile, machine)
    for b in _int_list(args.budgets_mb):
        _budget_bytes(b)
    rows = sweep(models, machine, db, _int_list(args.budgets_mb),
                 _int_list(args.contexts), _int_list(args.batches), gen_len=args.gen)
    save_sweep(rows, args.out)
    ok = sum(1 for r in rows if r.status == "ok")
    print(f"wrote {len(rows)} rows ({ok} ok, {len(rows) - ok} infeasible) to {args.out}")
    return EXIT_OK


def cmd_vlm_mem(args) -> int:
    vspec = _resolve_vision(args.vision_spec)
    width, height = (int(x) for x in args.image.split("x"))
    budget = _budget_bytes(args.budget_mb)
    n_tok = vision_token_count(vspec, width, height)
    naive = naive_attn_peak_bytes(vspec, n_tok)
    chunk = choose_chunk(vspec, n_tok, budget)
    flash = flash_attn_peak_bytes(vspec, n_tok, chunk)
    lang = args.language_peak_mb * 1e6
    vis_total = vision_peak_bytes(vspec, n_tok, chunk, weights_on_gpu=not args.offload_weights)
    print(f"vision={vspec.name} image={width}x{height} tokens={n_tok}")
    print(f"naive_attn_peak_mb={naive / 1e6:.1f}")
    print(f"flash_attn_peak_mb={flash / 1e6:.1f} q_chunk={chunk}")
    print(f"vision_peak_mb={vis_total / 1e6:.1f} "
          f"(weights {'offloaded' if args.offload_weights else 'resident'})")
    print(f"serialized_peak_mb={peak_vram(vis_total, lang, True) / 1e6:.1f} "
          f"overlapped_peak_mb={peak_vram(vis_total, lang, False) / 1e6:.1f}")
    return EXIT_OK


def cmd_validate(args) -> int:
    models = [_resolve_model(m) for m in args.models.split(",")]
    machine = _resolve_machine(args.machine)
    budgets = tuple(_int_list(args.budgets_mb))
    report = validation_grid(models, machine, budgets_mb=budgets)
    outcomes = list(report.outcomes)
    if args.sample and args.sample < len(outcomes):
        rng = random.Random(args.seed)
        outcomes = rng.sample(outcomes, args.sample)
        feasible = [o for o in outcomes if o.feasible]
        agreement = (sum(1 for o in feasible if o.agree) / len(feasible)) if feasible else 0.0
    else:
        agreement = report.agreement
    total = len(outcomes)
    feasible_n = sum(1 for o in outcomes if o.feasible)
    print(f"configurations={total} feasible={feasible_n} agreement={agreement:.4f}")
    for kind in PlanKind:
        print(f"oracle_wins[{kind.value}]={report.oracle_wins[kind]}")
    if args.verbose:
        for o in outcomes:
            mark = "ok" if o.agree else ("--" if not o.feasible else "MISMATCH")
            planned = o.planner_choice.value if o.planner_choice else "-"
            oracled = o.oracle_choice.value if o.oracle_choice else "-"
            print(f"{mark:>8} model={o.config.model} pcie={o.config.pcie_bw:.0f} "
                  f"threads={o.config.threads} ctx={o.config.context} "
                  f"budget={o.config.budget_mb}M planner={planned} oracle={oracled}")
    if agreement < args.threshold:
        print(f"FAIL: agreement {agreement:.4f} below threshold {args.threshold}")
        return EXIT_INFEASIBLE
    print("PASS")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="shardplan",
        description="Plan and simulate VRAM-constrained hybrid inference schedules.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("profile", help="synthesize an install-phase kernel profile")
    p.add_argument("--machine", required=True, help="machine spec path or preset name")
    p.add_argument("--out", required=True, help="profile output path")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("plan", help="build the token-tier schedule table")
    p.add_argument("--model", required=True)
    p.add_argument("--machine", required=True)
    p.add_argument("--profile", help="profile path (synthesized when omitted)")
    p.add_argument("--budget-mb", type=int, required=True, help="VRAM budget, multiple of 1000")
    p.add_argument("--context", type=int, required=True)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--out", help="tier table output path")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("simulate", help="simulate one request batch")
    p.add_argument("--model", required=True)
    p.add_argument("--machine", required=True)
    p.add_argument("--profile")
    p.add_argument("--budget-mb", type=int, required=True)
    p.add_argument("--context", type=int, required=True)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--prompt", type=int, required=True, help="prompt tokens per request")
    p.add_argument("--gen", type=int, default=100, help="output tokens per request")
    p.add_argument("--vision-spec", help="add vision encode time for a VLM")
    p.add_argument("--image", default="1280x720", help="WxH, used with --vision-spec")
    p.add_argument("--verbose", action="store_true", help="print per-iteration log")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", help="tabulate TTFT/TPS/E2EL over configuration axes")
    p.add_argument("--models", required=True, help="comma-separated paths or presets")
    p.add_argument("--machine", required=True)
    p.add_argument("--profile")
    p.add_argument("--budgets-mb", required=True, help="comma-separated, multiples of 1000")
    p.add_argument("--contexts", required=True, help="comma-separated context lengths")
    p.add_argument("--batches", default="1", help="comma-separated batch sizes")
    p.add_argument("--gen", type=int, default=100)
    p.add_argument("--out", required=True, help="CSV output path")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("vlm-mem", help="vision-side peak VRAM arithmetic")
    p.add_argument("--vision-spec", required=True)
    p.add_argument("--image", required=True, help="WxH, e.g. 2560x1440")
    p.add_argument("--budget-mb", type=int, required=True, help="vision VRAM budget")
    p.add_argument("--language-peak-mb", type=float, default=0.0,
                   help="language-side peak for the serialization comparison")
    p.add_argument("--offload-weights", action="store_true",
                   help="model encoder weights as CPU-resident")
    p.set_defaults(func=cmd_vlm_mem)

    p = sub.add_parser("validate", help="planner vs. simulation oracle over a grid")
    p.add_argument("--models", default="nemo8b,qwen30b")
    p.add_argument("--machine", default="workstation")
    p.add_argument("--budgets-mb", default="2000,4000,6000,8000,12000,16000,32000")
    p.add_argument("--threshold", type=float, default=0.95)
    p.add_argument("--sample", type=int, help="subsample the grid to this many configs")
    p.add_argument("--seed", type=int, default=0, help="determines grid sampling")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (InfeasibleBudget, InfeasibleSchedule) as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (ShardPlanError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

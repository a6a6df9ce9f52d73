"""shardplan: plan and simulate VRAM-constrained hybrid CPU/GPU inference schedules.

The toolkit shards a transformer graph at sub-layer granularity, estimates
schedule costs from a kernel-throughput profile via roofline analysis,
selects among three CPU/GPU/PCIe schedule plans per token tier, and
validates selections against a discrete-event simulation oracle. All
compute is analytic and simulated; no weights or GPUs are involved.
"""

from .errors import (
    FormatError,
    InfeasibleBudget,
    InfeasibleSchedule,
    ShardPlanError,
    SpecError,
)
from .kernels import Backend, Contention, OpKind
from .machine import MachineSpec, load_machine, save_machine
from .model_graph import (
    ModelSpec,
    MoeSpec,
    ShardKind,
    SubLayerShard,
    build_shards,
    kv_cache_bytes,
    load_model,
    save_model,
    shard_cost,
    total_model_bytes,
)
from .planner import (
    Placement,
    PlanKind,
    Residency,
    SchedulePlan,
    Streaming,
    TIERS,
    TierTable,
    build_tier_table,
    decide_scratch_budget,
    estimate_plan_time,
    heuristic_split,
    load_table,
    pick_tier,
    pin_shards,
    save_table,
)
from .profile_db import (
    KernelKey,
    MatchKind,
    ProfileDb,
    ProfileEntry,
    estimate_kernel_time,
    load_profile,
    lookup_exact,
    lookup_nearest,
    match_stats,
    roofline_time,
    save_profile,
    synth_profile,
)
from .simulator import (
    Request,
    SimResult,
    SweepRow,
    oracle_best_plan,
    save_sweep,
    simulate_inference,
    simulate_schedule,
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

__version__ = "0.1.0"

"""Kernel throughput database with exact and nearest-neighbor lookup.

The database stands in for an install-time benchmarking run: one entry per
(op kind, quantization class, backend, thread count, shape, contention
state), holding the achieved FLOP rate of that benchmark kernel and the
byte rate it could attain. Estimation follows a three-way procedure: an
exact key match divides the query's FLOPs by the stored rate; a partial
match (same key except shape) picks the nearest neighbor in log-shape space
and prices the query on that entry's roofline; no match at all is skipped
as negligible.

Entries are synthesized from a MachineSpec's parametric curves rather than
measured, so planner estimates and the simulation oracle describe the same
modeled hardware.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

from .errors import FormatError, SpecError
from .kernels import QUANT_CLASSES, Backend, Contention, OpKind, canonical_workload
from .machine import MachineSpec, machine_to_dict

PROFILE_FORMAT = "shardplan-profile v1"


@dataclass(frozen=True)
class KernelKey:
    op_kind: OpKind
    quant: str                    # quantization class tag, see kernels.QUANT_CLASSES
    backend: Backend
    threads: int                  # 0 for GPU entries
    dims: tuple[int, ...]
    contention: Contention = Contention.STANDALONE

    def __post_init__(self):
        if not self.dims:
            raise SpecError("kernel key dims must be non-empty")
        if self.backend is Backend.GPU:
            if self.threads != 0 or self.contention is not Contention.STANDALONE:
                raise SpecError("GPU keys must have threads=0 and standalone contention")
        elif self.threads < 1:
            raise SpecError("CPU keys need threads >= 1")


@dataclass(frozen=True)
class ProfileEntry:
    key: KernelKey
    flops_per_sec: float
    bytes_per_sec: float

    def __post_init__(self):
        if self.flops_per_sec <= 0 or self.bytes_per_sec <= 0:
            raise SpecError("profile entry rates must be positive")


class Generator(Enum):
    MEASURED = "measured"
    SYNTHETIC = "synthetic"


@dataclass(frozen=True)
class ProfileMeta:
    machine_id: str
    generation_timestamp: str
    generator: Generator


class MatchKind(Enum):
    EXACT = "exact"
    PARTIAL = "partial"
    SKIPPED = "skipped"


class ProfileDb:
    """Immutable collection of profile entries with indexed lookups."""

    def __init__(self, entries: list[ProfileEntry], meta: ProfileMeta):
        self.meta = meta
        self._by_key: dict[KernelKey, ProfileEntry] = {}
        self._partial: dict[tuple, list[ProfileEntry]] = {}
        self._nn_cache: dict[KernelKey, ProfileEntry | None] = {}
        for e in entries:
            if e.key in self._by_key:
                raise SpecError(f"duplicate profile key {e.key}")
            self._by_key[e.key] = e
            self._partial.setdefault(_partial_key(e.key), []).append(e)

    def __len__(self) -> int:
        return len(self._by_key)

    def entries(self) -> list[ProfileEntry]:
        return sorted(self._by_key.values(), key=lambda e: _sort_key(e.key))


def _partial_key(key: KernelKey) -> tuple:
    # Everything but the dims values; arity must match for comparability.
    return (key.op_kind, key.quant, key.backend, key.threads, key.contention, len(key.dims))


def _sort_key(key: KernelKey) -> tuple:
    return (key.op_kind.value, key.quant, key.backend.value, key.threads,
            key.contention.value, key.dims)


def lookup_exact(db: ProfileDb, key: KernelKey) -> ProfileEntry | None:
    return db._by_key.get(key)


def lookup_nearest(db: ProfileDb, key: KernelKey) -> ProfileEntry | None:
    """Nearest partial match by Euclidean distance between log-dims.

    Relative shape differences are what move throughput, hence log space.
    Entries with a different dims arity are incomparable and excluded.
    Ties break toward the lexicographically smallest dims vector.
    """
    if key in db._nn_cache:
        return db._nn_cache[key]
    candidates = db._partial.get(_partial_key(key))
    if not candidates:
        db._nn_cache[key] = None
        return None
    qlog = [math.log(d) for d in key.dims]

    def distance(e: ProfileEntry) -> float:
        return math.sqrt(sum((math.log(d) - q) ** 2 for d, q in zip(e.key.dims, qlog)))

    found = min(candidates, key=lambda e: (distance(e), e.key.dims))
    db._nn_cache[key] = found
    return found


def roofline_time(kernel_flops: float, kernel_bytes: float, entry: ProfileEntry) -> float:
    """Price a kernel on an entry's roofline.

    At or above the ridge (arithmetic intensity = entry flop rate / byte
    rate) the kernel is compute bound; below it, memory bound. Both branches
    agree exactly at the ridge, so the >= convention is value-neutral.
    """
    if kernel_bytes <= 0:
        raise SpecError(f"kernel_bytes must be positive, got {kernel_bytes}")
    if kernel_flops < 0:
        raise SpecError(f"kernel_flops must be >= 0, got {kernel_flops}")
    intensity = kernel_flops / kernel_bytes
    ridge = entry.flops_per_sec / entry.bytes_per_sec
    if intensity >= ridge:
        return kernel_flops / entry.flops_per_sec
    return kernel_bytes / entry.bytes_per_sec


def estimate_kernel_time(
    db: ProfileDb, key: KernelKey, kernel_flops: float, kernel_bytes: float
) -> tuple[float, MatchKind]:
    """Three-way estimate: exact rate division, nearest-neighbor roofline, or skip."""
    entry = lookup_exact(db, key)
    if entry is not None:
        return kernel_flops / entry.flops_per_sec, MatchKind.EXACT
    entry = lookup_nearest(db, key)
    if entry is not None:
        return roofline_time(kernel_flops, kernel_bytes, entry), MatchKind.PARTIAL
    return 0.0, MatchKind.SKIPPED


@dataclass(frozen=True)
class MatchStats:
    exact_frac: float
    partial_frac: float
    skipped_frac: float


def match_stats(db: ProfileDb, kernels: list[tuple[KernelKey, float, float]]) -> MatchStats:
    if not kernels:
        raise SpecError("match_stats needs a non-empty kernel list")
    counts = {MatchKind.EXACT: 0, MatchKind.PARTIAL: 0, MatchKind.SKIPPED: 0}
    for key, flops, byts in kernels:
        _, kind = estimate_kernel_time(db, key, flops, byts)
        counts[kind] += 1
    n = len(kernels)
    return MatchStats(counts[MatchKind.EXACT] / n,
                      counts[MatchKind.PARTIAL] / n,
                      counts[MatchKind.SKIPPED] / n)


# -- synthetic install-phase generation ---------------------------------------

# Shape ladders benchmarked per op kind. For weight-dominated matmuls the
# arithmetic intensity tracks the row count, so the row ladder must cover
# every token count the planner queries (the scheduling tiers, and tiers
# fanned out by expert top-k) or partial matches misprice the roofline.
_ROW_LADDER = (1, 4, 8, 16, 32, 64, 128, 256, 512, 1024, 2048,
               4096, 8192, 16384, 32768, 65536, 131072)
_TOKEN_LADDER = (1, 4, 16, 32, 64, 512, 1024, 2048, 4096, 8192, 16384)
_MATMUL_KN = ((1024, 1024), (4096, 4096), (4096, 16384))
_CTX_LADDER = (1024, 16384)
_EW_LADDER = (2 ** 10, 2 ** 16, 2 ** 20, 2 ** 24, 2 ** 28)


def _grid_shapes() -> list[tuple[OpKind, tuple[int, ...]]]:
    shapes: list[tuple[OpKind, tuple[int, ...]]] = []
    for m in _ROW_LADDER:
        for k, n in _MATMUL_KN:
            shapes.append((OpKind.MATMUL, (m, k, n)))
    for t in _TOKEN_LADDER:
        for ctx in _CTX_LADDER:
            shapes.append((OpKind.GQA, (t, ctx, 32, 8, 128)))
            shapes.append((OpKind.MHA, (t, ctx, 32, 128)))
    for t in _TOKEN_LADDER:
        shapes.append((OpKind.MOE_ROUTE, (t, 2048, 128)))
    for n in _EW_LADDER:
        shapes.append((OpKind.ELEMENT_WISE, (n,)))
    return shapes


def synth_grid_size(machine: MachineSpec) -> int:
    configs = 2 * machine.threads_available + 1  # CPU x contention, plus GPU
    return len(_grid_shapes()) * len(QUANT_CLASSES) * configs


def _machine_stamp(machine: MachineSpec) -> str:
    doc = json.dumps(machine_to_dict(machine), sort_keys=True)
    return hashlib.sha256(doc.encode()).hexdigest()[:16]


def synth_profile(machine: MachineSpec) -> ProfileDb:
    """Generate the full benchmark grid from a machine's parametric curves.

    Each entry stores the rate the benchmark kernel would achieve on that
    configuration (its roofline-limited FLOP rate) and the byte rate the
    configuration can attain, contention-derated for CPU entries measured
    under concurrent PCIe traffic. Generation is noise-free and
    deterministic, keyed by a content stamp of the machine spec.
    """
    entries: list[ProfileEntry] = []
    shapes = _grid_shapes()

    for quant, bpe in QUANT_CLASSES.items():
        for op_kind, dims in shapes:
            flops, byts = canonical_workload(op_kind, dims, bpe)
            entries.append(ProfileEntry(
                KernelKey(op_kind, quant, Backend.GPU, 0, dims),
                flops_per_sec=flops / machine.gpu_time(flops, byts),
                bytes_per_sec=machine.gpu_mem_bw,
            ))
            for threads in range(1, machine.threads_available + 1):
                for contention in (Contention.STANDALONE, Contention.UNDER_PCIE_TRAFFIC):
                    contended = contention is Contention.UNDER_PCIE_TRAFFIC
                    entries.append(ProfileEntry(
                        KernelKey(op_kind, quant, Backend.CPU, threads, dims, contention),
                        flops_per_sec=flops / machine.cpu_time(flops, byts, threads, contended),
                        bytes_per_sec=machine.cpu_mem_bw_at(threads, contended),
                    ))
    meta = ProfileMeta(machine_id=machine.name,
                       generation_timestamp=_machine_stamp(machine),
                       generator=Generator.SYNTHETIC)
    return ProfileDb(entries, meta)


# -- line-oriented persistence -------------------------------------------------

def save_profile(db: ProfileDb, path: str | Path) -> None:
    lines = [
        PROFILE_FORMAT,
        f"machine_id {db.meta.machine_id}",
        f"generated {db.meta.generation_timestamp}",
        f"generator {db.meta.generator.value}",
        f"entries {len(db)}",
    ]
    for e in db.entries():
        k = e.key
        dims = ",".join(str(d) for d in k.dims)
        lines.append(
            f"{k.op_kind.value} {k.quant} {k.backend.value} {k.threads} "
            f"{k.contention.value} {dims} {e.flops_per_sec!r} {e.bytes_per_sec!r}"
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_profile(path: str | Path) -> ProfileDb:
    text = Path(path).read_text(encoding="utf-8").splitlines()
    if not text or text[0] != PROFILE_FORMAT:
        raise FormatError(f"unknown profile format: {text[0] if text else '(empty)'}")
    header: dict[str, str] = {}
    body_start = 1
    for i, line in enumerate(text[1:], start=1):
        name, _, value = line.partition(" ")
        if name in ("machine_id", "generated", "generator", "entries"):
            header[name] = value
            body_start = i + 1
        else:
            break
    entries: list[ProfileEntry] = []
    for lineno, line in enumerate(text[body_start:], start=body_start + 1):
        if not line.strip():
            continue
        try:
            op, quant, backend, threads, contention, dims, fps, bps = line.split(" ")
            entries.append(ProfileEntry(
                KernelKey(
                    OpKind(op), quant, Backend(backend), int(threads),
                    tuple(int(d) for d in dims.split(",")), Contention(contention),
                ),
                flops_per_sec=float(fps), bytes_per_sec=float(bps),
            ))
        except (ValueError, SpecError) as exc:
            raise FormatError(f"malformed profile entry at line {lineno}: {exc}") from exc
    declared = int(header.get("entries", len(entries)))
    if declared != len(entries):
        raise FormatError(f"profile declares {declared} entries but has {len(entries)}")
    meta = ProfileMeta(
        machine_id=header.get("machine_id", "unknown"),
        generation_timestamp=header.get("generated", ""),
        generator=Generator(header.get("generator", "synthetic")),
    )
    return ProfileDb(entries, meta)

"""Parametric hardware model.

A MachineSpec describes one client system: GPU throughput ceilings, a CPU
whose compute scales with thread count along a measured efficiency curve,
system RAM bandwidth that a handful of threads saturates, and two simplex
PCIe channels. The same curves drive the synthetic install-phase profiler
and the discrete-event simulator, so the planner's profile-based estimates
and the simulation oracle describe one consistent modeled machine.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .errors import FormatError, SpecError

MACHINE_FORMAT = "machine-spec/v1"


@dataclass(frozen=True)
class MachineSpec:
    name: str
    vram_capacity: float          # bytes
    gpu_flops: float              # flop/s ceiling
    gpu_mem_bw: float             # bytes/s
    cpu_thread_flops: float       # flop/s of one thread
    cpu_scaling: tuple[float, ...]  # effective thread count at 1..N threads
    sysram_bw: float              # bytes/s
    pcie_h2d_bw: float            # bytes/s
    pcie_d2h_bw: float            # bytes/s
    contention_alpha: float = 0.5
    threads_available: int = 8
    # Threads needed to saturate sysRAM bandwidth; fewer threads reach a
    # proportional fraction. Captures "the CPU will not be able to saturate
    # sysRAM bandwidth" with few threads.
    cpu_bw_saturation_threads: int = 4
    # Per-launch cost that floors tiny GPU kernels; batched async launches
    # keep it small but nonzero.
    gpu_launch_overhead_s: float = 2e-6

    def __post_init__(self):
        rates = {
            "gpu_flops": self.gpu_flops,
            "gpu_mem_bw": self.gpu_mem_bw,
            "cpu_thread_flops": self.cpu_thread_flops,
            "sysram_bw": self.sysram_bw,
            "pcie_h2d_bw": self.pcie_h2d_bw,
            "pcie_d2h_bw": self.pcie_d2h_bw,
        }
        for name, rate in rates.items():
            if rate <= 0:
                raise SpecError(f"{self.name}: {name} must be positive, got {rate}")
        if not 0 < self.contention_alpha <= 1:
            raise SpecError(f"{self.name}: contention_alpha must be in (0, 1]")
        if self.threads_available < 1 or self.cpu_bw_saturation_threads < 1:
            raise SpecError(f"{self.name}: thread counts must be >= 1")
        if len(self.cpu_scaling) < self.threads_available:
            raise SpecError(
                f"{self.name}: cpu_scaling needs an entry per thread count "
                f"({len(self.cpu_scaling)} < {self.threads_available})"
            )
        if self.cpu_scaling[0] <= 0:
            raise SpecError(f"{self.name}: cpu_scaling must start positive")
        prev, prev_step = 0.0, float("inf")
        for i, eff in enumerate(self.cpu_scaling):
            step = eff - prev
            # non-decreasing with non-increasing marginal gain; a plateau
            # (saturated CPU) is allowed
            if step < 0 or step > prev_step + 1e-12:
                raise SpecError(
                    f"{self.name}: cpu_scaling must grow with non-increasing "
                    f"marginal efficiency (index {i})"
                )
            prev, prev_step = eff, step

    # -- analytic rate curves -------------------------------------------------

    def cpu_flops_at(self, threads: int) -> float:
        threads = max(1, min(threads, len(self.cpu_scaling)))
        return self.cpu_thread_flops * self.cpu_scaling[threads - 1]

    def cpu_mem_bw_at(self, threads: int, contended: bool) -> float:
        frac = min(1.0, threads / self.cpu_bw_saturation_threads)
        bw = self.sysram_bw * frac
        return bw * self.contention_alpha if contended else bw

    def cpu_time(self, flops: float, byts: float, threads: int, contended: bool) -> float:
        """Roofline time of one kernel on the CPU at a given thread count."""
        return max(flops / self.cpu_flops_at(threads),
                   byts / self.cpu_mem_bw_at(threads, contended))

    def gpu_time(self, flops: float, byts: float) -> float:
        """Roofline time of one kernel on the GPU plus the launch floor."""
        return (max(flops / self.gpu_flops, byts / self.gpu_mem_bw)
                + self.gpu_launch_overhead_s)

    def pcie_rate(self, h2d: bool, contended: bool) -> float:
        rate = self.pcie_h2d_bw if h2d else self.pcie_d2h_bw
        return rate * self.contention_alpha if contended else rate


def machine_to_dict(m: MachineSpec) -> dict:
    return {
        "format": MACHINE_FORMAT,
        "name": m.name,
        "vram_capacity": m.vram_capacity,
        "gpu_flops": m.gpu_flops,
        "gpu_mem_bw": m.gpu_mem_bw,
        "cpu_thread_flops": m.cpu_thread_flops,
        "cpu_scaling": list(m.cpu_scaling),
        "sysram_bw": m.sysram_bw,
        "pcie_h2d_bw": m.pcie_h2d_bw,
        "pcie_d2h_bw": m.pcie_d2h_bw,
        "contention_alpha": m.contention_alpha,
        "threads_available": m.threads_available,
        "cpu_bw_saturation_threads": m.cpu_bw_saturation_threads,
        "gpu_launch_overhead_s": m.gpu_launch_overhead_s,
    }


def machine_from_dict(doc: dict) -> MachineSpec:
    if doc.get("format") != MACHINE_FORMAT:
        raise FormatError(f"expected {MACHINE_FORMAT}, got {doc.get('format')!r}")
    return MachineSpec(
        name=doc["name"],
        vram_capacity=float(doc["vram_capacity"]),
        gpu_flops=float(doc["gpu_flops"]),
        gpu_mem_bw=float(doc["gpu_mem_bw"]),
        cpu_thread_flops=float(doc["cpu_thread_flops"]),
        cpu_scaling=tuple(float(x) for x in doc["cpu_scaling"]),
        sysram_bw=float(doc["sysram_bw"]),
        pcie_h2d_bw=float(doc["pcie_h2d_bw"]),
        pcie_d2h_bw=float(doc["pcie_d2h_bw"]),
        contention_alpha=float(doc.get("contention_alpha", 0.5)),
        threads_available=int(doc.get("threads_available", 8)),
        cpu_bw_saturation_threads=int(doc.get("cpu_bw_saturation_threads", 4)),
        gpu_launch_overhead_s=float(doc.get("gpu_launch_overhead_s", 2e-6)),
    )


def load_machine(path: str | Path) -> MachineSpec:
    with open(path, "r", encoding="utf-8") as fh:
        return machine_from_dict(json.load(fh))


def save_machine(m: MachineSpec, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(machine_to_dict(m), fh, indent=2, sort_keys=True)
        fh.write("\n")

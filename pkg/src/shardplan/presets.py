"""Access to the calibrated model, machine, and vision specs shipped in the package."""

from __future__ import annotations

import json
from importlib import resources

from .machine import MachineSpec, machine_from_dict
from .model_graph import ModelSpec, model_from_dict
from .vlm_memory import VisionSpec, vision_from_dict

_KINDS = {"models", "machines", "vision"}


def _read(kind: str, name: str) -> dict:
    if kind not in _KINDS:
        raise ValueError(f"unknown preset kind {kind}")
    ref = resources.files("shardplan").joinpath("data", kind, f"{name}.json")
    with ref.open("r", encoding="utf-8") as fh:
        return json.load(fh)


def list_presets(kind: str) -> list[str]:
    if kind not in _KINDS:
        raise ValueError(f"unknown preset kind {kind}")
    ref = resources.files("shardplan").joinpath("data", kind)
    return sorted(p.name[:-5] for p in ref.iterdir() if p.name.endswith(".json"))


def builtin_model(name: str) -> ModelSpec:
    return model_from_dict(_read("models", name))


def builtin_machine(name: str) -> MachineSpec:
    return machine_from_dict(_read("machines", name))


def builtin_vision(name: str) -> VisionSpec:
    return vision_from_dict(_read("vision", name))

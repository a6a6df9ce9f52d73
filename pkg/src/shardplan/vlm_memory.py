"""Analytic peak-VRAM model for the vision side of a VLM.

Covers the three vision memory levers: offloading encoder weights to the
CPU, replacing the quadratic naive attention score tensors with flash
attention whose query dimension is chunked to cap the score tile, and
serializing vision encoding against language decoding so peak VRAM is the
max of the two demands instead of their sum.

This models memory, not pixels: token counts use pure ceilings over the
patch grid, whereas real encoders resize inputs to multiples of the token
span first.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .errors import FormatError, InfeasibleBudget, SpecError
from .kernels import Backend, Contention, OpKind
from .profile_db import KernelKey, ProfileDb, estimate_kernel_time

VISION_FORMAT = "vision-spec/v1"

# Vision encoder MLP expansion; standard transformer encoder ratio.
_MLP_RATIO = 4


@dataclass(frozen=True)
class VisionSpec:
    name: str
    patch_px: int
    merge: int                   # tokens span merge * patch_px pixels per side
    n_heads: int
    head_dim: int
    d_vision: int
    n_vision_layers: int
    score_bytes_per_elem: float
    weight_bytes: float

    def __post_init__(self):
        if self.patch_px < 1 or self.merge < 1:
            raise SpecError(f"{self.name}: patch_px and merge must be >= 1")
        if self.score_bytes_per_elem <= 0:
            raise SpecError(f"{self.name}: score_bytes_per_elem must be positive")
        if min(self.n_heads, self.head_dim, self.d_vision, self.n_vision_layers) < 1:
            raise SpecError(f"{self.name}: encoder dimensions must be positive")

    @property
    def token_span_px(self) -> int:
        return self.patch_px * self.merge


def vision_token_count(vspec: VisionSpec, width_px: int, height_px: int) -> int:
    span = vspec.token_span_px
    if width_px < span or height_px < span:
        raise SpecError(f"image must span at least one {span}px token")
    return -(-width_px // span) * -(-height_px // span)


def naive_attn_peak_bytes(vspec: VisionSpec, n_tokens: int) -> float:
    """Full score tensor plus its softmax intermediate: quadratic in tokens."""
    if n_tokens < 1:
        raise SpecError(f"n_tokens must be >= 1, got {n_tokens}")
    return 2.0 * vspec.n_heads * n_tokens ** 2 * vspec.score_bytes_per_elem


def flash_attn_peak_bytes(vspec: VisionSpec, n_tokens: int, q_chunk: int) -> float:
    """Peak with the query dimension tiled to q_chunk rows.

    One score tile plus resident Q/K/V and the partial-output concatenation
    buffer; linear in tokens at fixed chunk.
    """
    if not 1 <= q_chunk <= n_tokens:
        raise SpecError(f"q_chunk must be in [1, {n_tokens}], got {q_chunk}")
    b = vspec.score_bytes_per_elem
    tile = vspec.n_heads * q_chunk * n_tokens * b
    resident_qkv = 3.0 * n_tokens * vspec.d_vision * b
    concat = float(n_tokens * vspec.d_vision) * b
    return tile + resident_qkv + concat


def choose_chunk(vspec: VisionSpec, n_tokens: int, vision_budget: float) -> int:
    """Largest q_chunk whose flash-attention peak fits the budget."""
    floor = flash_attn_peak_bytes(vspec, n_tokens, 1)
    if vision_budget < floor:
        raise InfeasibleBudget(vision_budget, floor, "flash attention at q_chunk=1")
    lo, hi = 1, n_tokens
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if flash_attn_peak_bytes(vspec, n_tokens, mid) <= vision_budget:
            lo = mid
        else:
            hi = mid - 1
    return lo


def vision_peak_bytes(
    vspec: VisionSpec, n_tokens: int, q_chunk: int | None,
    weights_on_gpu: bool = True,
) -> float:
    """Vision-side VRAM peak: attention working set plus resident weights.

    Offloading the encoder weights to system RAM removes exactly
    weight_bytes from the peak; q_chunk None selects naive attention.
    """
    if q_chunk is None:
        attn = naive_attn_peak_bytes(vspec, n_tokens)
    else:
        attn = flash_attn_peak_bytes(vspec, n_tokens, q_chunk)
    return attn + (vspec.weight_bytes if weights_on_gpu else 0.0)


def peak_vram(vision_peak: float, language_peak: float, serialized: bool) -> float:
    """Whole-model peak: max of the two phases when serialized, else their sum."""
    if vision_peak < 0 or language_peak < 0:
        raise SpecError("peaks must be >= 0")
    if serialized:
        return max(vision_peak, language_peak)
    return vision_peak + language_peak


def vision_encode_time(vspec: VisionSpec, n_tokens: int, db: ProfileDb) -> float:
    """Encoder wall time on the GPU, priced through the profile database.

    Per layer: fused QKV+output projections, full self-attention over all
    vision tokens, and the MLP block. Weights are f16; per-layer weight
    bytes are the spec total split evenly across layers.
    """
    d = vspec.d_vision
    act = 2.0
    layer_w = vspec.weight_bytes / vspec.n_vision_layers
    kernels = [
        (OpKind.MATMUL, (n_tokens, d, 4 * d),
         2.0 * n_tokens * d * 4 * d, layer_w / 2 + 5 * n_tokens * d * act),
        (OpKind.MHA, (n_tokens, n_tokens, vspec.n_heads, vspec.head_dim),
         4.0 * n_tokens * n_tokens * vspec.n_heads * vspec.head_dim,
         4.0 * n_tokens * d * act),
        (OpKind.MATMUL, (n_tokens, d, 2 * _MLP_RATIO * d),
         2.0 * n_tokens * d * 2 * _MLP_RATIO * d,
         layer_w / 2 + 2.0 * n_tokens * (d + _MLP_RATIO * d) * act),
    ]
    per_layer = 0.0
    for op, dims, flops, byts in kernels:
        key = KernelKey(op, "f16", Backend.GPU, 0, dims, Contention.STANDALONE)
        t, _ = estimate_kernel_time(db, key, flops, byts)
        per_layer += t
    return vspec.n_vision_layers * per_layer


def vision_to_dict(v: VisionSpec) -> dict:
    return {
        "format": VISION_FORMAT,
        "name": v.name,
        "patch_px": v.patch_px,
        "merge": v.merge,
        "n_heads": v.n_heads,
        "head_dim": v.head_dim,
        "d_vision": v.d_vision,
        "n_vision_layers": v.n_vision_layers,
        "score_bytes_per_elem": v.score_bytes_per_elem,
        "weight_bytes": v.weight_bytes,
    }


def vision_from_dict(doc: dict) -> VisionSpec:
    if doc.get("format") != VISION_FORMAT:
        raise FormatError(f"expected {VISION_FORMAT}, got {doc.get('format')!r}")
    return VisionSpec(
        name=doc["name"],
        patch_px=int(doc["patch_px"]),
        merge=int(doc["merge"]),
        n_heads=int(doc["n_heads"]),
        head_dim=int(doc["head_dim"]),
        d_vision=int(doc["d_vision"]),
        n_vision_layers=int(doc["n_vision_layers"]),
        score_bytes_per_elem=float(doc["score_bytes_per_elem"]),
        weight_bytes=float(doc["weight_bytes"]),
    )


def load_vision(path: str | Path) -> VisionSpec:
    with open(path, "r", encoding="utf-8") as fh:
        return vision_from_dict(json.load(fh))


def save_vision(v: VisionSpec, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(vision_to_dict(v), fh, indent=2, sort_keys=True)
        fh.write("\n")

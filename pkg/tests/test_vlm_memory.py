import random

import pytest

from shardplan import presets
from shardplan.errors import FormatError, InfeasibleBudget, SpecError
from shardplan.vlm_memory import (
    VisionSpec,
    choose_chunk,
    flash_attn_peak_bytes,
    load_vision,
    naive_attn_peak_bytes,
    peak_vram,
    save_vision,
    vision_encode_time,
    vision_peak_bytes,
    vision_from_dict,
    vision_to_dict,
    vision_token_count,
)

GB = 1e9


def vspec(**over):
    args = dict(name="enc", patch_px=14, merge=2, n_heads=16, head_dim=80,
                d_vision=1280, n_vision_layers=32, score_bytes_per_elem=4.0,
                weight_bytes=1.26e9)
    args.update(over)
    return VisionSpec(**args)


# -- token counts ---------------------------------------------------------------

def test_square_image_at_fixed_encoder_resolution():
    assert vision_token_count(vspec(), 336, 336) == 144


def test_720p_token_count():
    assert vision_token_count(vspec(), 1280, 720) == 46 * 26 == 1196


def test_1440p_token_count():
    assert vision_token_count(vspec(), 2560, 1440) == 92 * 52
    assert vision_token_count(vspec(), 2560, 1440) == 4784


def test_image_below_one_token_rejected():
    with pytest.raises(SpecError):
        vision_token_count(vspec(), 20, 336)


# -- naive attention --------------------------------------------------------------

def test_naive_single_token():
    v = vspec()
    assert naive_attn_peak_bytes(v, 1) == 2 * v.n_heads * v.score_bytes_per_elem


def test_naive_quadratic_doubling():
    v = vspec()
    assert naive_attn_peak_bytes(v, 2048) == 4 * naive_attn_peak_bytes(v, 1024)


def test_naive_1440p_reaches_gigabytes():
    v = vspec()
    n = vision_token_count(v, 2560, 1440)
    peak = naive_attn_peak_bytes(v, n)
    assert peak == 2 * 16 * 4784 ** 2 * 4.0
    assert peak > 2 * GB


# -- flash attention ---------------------------------------------------------------

def test_full_chunk_tile_is_half_naive():
    v = vspec()
    n = 1000
    tile = flash_attn_peak_bytes(v, n, n) - 4 * n * v.d_vision * v.score_bytes_per_elem
    assert tile == naive_attn_peak_bytes(v, n) / 2


def test_chunk_one_dominated_by_resident_tensors():
    v = vspec()
    n = 4096
    peak = flash_attn_peak_bytes(v, n, 1)
    resident = 4 * n * v.d_vision * v.score_bytes_per_elem
    assert peak - resident == v.n_heads * n * v.score_bytes_per_elem
    assert resident > (peak - resident)


def test_flash_monotone_in_chunk():
    v = vspec()
    n = 2222
    peaks = [flash_attn_peak_bytes(v, n, q) for q in (1, 7, 50, 700, n)]
    assert peaks == sorted(peaks)


def test_chunk_bounds_enforced():
    with pytest.raises(SpecError):
        flash_attn_peak_bytes(vspec(), 100, 0)
    with pytest.raises(SpecError):
        flash_attn_peak_bytes(vspec(), 100, 101)


# -- chunk selection ----------------------------------------------------------------

def test_unlimited_budget_takes_full_chunk():
    v = vspec()
    assert choose_chunk(v, 500, 1e15) == 500


def test_budget_at_floor_takes_chunk_one():
    v = vspec()
    floor = flash_attn_peak_bytes(v, 500, 1)
    assert choose_chunk(v, 500, floor) == 1


def test_budget_below_floor_raises():
    v = vspec()
    floor = flash_attn_peak_bytes(v, 500, 1)
    with pytest.raises(InfeasibleBudget):
        choose_chunk(v, 500, floor - 1)


def test_chosen_chunk_is_maximal():
    v = vspec()
    rng = random.Random(5)
    for _ in range(50):
        n = rng.randint(2, 6000)
        budget = rng.uniform(flash_attn_peak_bytes(v, n, 1), 3e9)
        q = choose_chunk(v, n, budget)
        assert flash_attn_peak_bytes(v, n, q) <= budget
        if q < n:
            assert flash_attn_peak_bytes(v, n, q + 1) > budget


def test_chunk_at_2gb_1440p_regression():
    # The resident Q/K/V and concat buffers leave room for the full-query
    # tile at this resolution, so the search tops out at n_tokens.
    v = vspec()
    n = vision_token_count(v, 2560, 1440)
    assert choose_chunk(v, n, 2 * GB) == 4784


def test_naive_to_flash_ratio_grows_with_resolution():
    # Quadratic vs linear: doubling the token count should nearly double the
    # naive-to-flash ratio at a fixed chunk.
    v = vspec()
    q = 128
    r1 = naive_attn_peak_bytes(v, 2048) / flash_attn_peak_bytes(v, 2048, q)
    r2 = naive_attn_peak_bytes(v, 4096) / flash_attn_peak_bytes(v, 4096, q)
    assert r2 / r1 > 1.9


# -- peak composition ----------------------------------------------------------------

def test_serialized_takes_max_overlapped_takes_sum():
    assert peak_vram(3 * GB, 5 * GB, serialized=True) == 5 * GB
    assert peak_vram(3 * GB, 5 * GB, serialized=False) == 8 * GB
    assert peak_vram(0.0, 7.0, serialized=True) == 7.0
    assert peak_vram(0.0, 7.0, serialized=False) == 7.0


def test_serialized_never_exceeds_overlapped():
    rng = random.Random(9)
    for _ in range(200):
        v, l = rng.uniform(0, 10 * GB), rng.uniform(0, 10 * GB)
        assert peak_vram(v, l, True) <= peak_vram(v, l, False)


def test_weight_offload_reduces_peak_by_exact_weight_bytes():
    v = vspec()
    n = 1196
    on = vision_peak_bytes(v, n, 256, weights_on_gpu=True)
    off = vision_peak_bytes(v, n, 256, weights_on_gpu=False)
    assert on - off == v.weight_bytes


def test_encode_time_grows_with_tokens(workstation_db):
    v = vspec()
    t_small = vision_encode_time(v, 144, workstation_db)
    t_large = vision_encode_time(v, 4784, workstation_db)
    assert 0 < t_small < t_large


# -- persistence ----------------------------------------------------------------------

def test_vision_round_trip(tmp_path):
    v = presets.builtin_vision("cr1-vision")
    path = tmp_path / "v.json"
    save_vision(v, path)
    assert load_vision(path) == v


def test_vision_loader_rejects_unknown_format():
    doc = vision_to_dict(vspec())
    doc["format"] = "vision-spec/v9"
    with pytest.raises(FormatError):
        vision_from_dict(doc)

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from povt import harness as hs
from povt import model as md


def test_attention_formula_example():
    assert hs.attention_flops(4, 4, 2, projections=False) == 128


def test_totals_are_component_sums():
    for cfg in (md.ModelConfig(), md.ModelConfig.paper_scale(), md.ModelConfig(drop_obj_time=True)):
        for mode in ("povt", "full"):
            r = hs.count_flops(cfg, mode, 8)
            assert r.total == sum(r.components.values())
            assert all(v >= 0 for v in r.components.values())


def test_no_objects_matches_single_stream():
    for T in (1, 3, 8):
        cfg = md.ModelConfig(K=0, W_b=T, W_o=T)
        assert hs.count_flops(cfg, "povt", T).total == hs.count_flops(cfg, "full", T).total


def hand_decoder_flops(S, D, M, layers, V):
    # independent closed form for a plain decoder: 8SD^2 + 4S^2D attention, 4SDM MLP per layer
    per_layer = 8 * S * D * D + 4 * S * S * D + 4 * S * D * M
    return layers * per_layer + 2 * S * D * V + S * D


@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 3), st.sampled_from([8, 16, 32]))
@settings(max_examples=30, deadline=None)
def test_full_mode_matches_hand_formula(frames, side, layers, D):
    cfg = md.ModelConfig(K=0, W_b=frames, W_o=frames, latent_h=side, latent_w=side, layers=layers, D=D, heads=2, mlp=4 * D, V_z=11)
    S = frames * side * side
    assert hs.count_flops(cfg, "full", frames).total == hand_decoder_flops(S, D, 4 * D, layers, 11)


def test_paper_scale_ratio_and_growth():
    cfg = md.ModelConfig.paper_scale()
    assert hs.count_flops(cfg, "povt", 8).ratio >= 2.0
    ratios = [hs.count_flops(cfg, "povt", T).ratio for T in (4, 8, 16, 32)]
    assert all(b > a for a, b in zip(ratios, ratios[1:]))


def test_train_toggle_triples():
    cfg = md.ModelConfig()
    assert hs.count_flops(cfg, "povt", 8, train=True).total == 3 * hs.count_flops(cfg, "povt", 8).total


@pytest.mark.parametrize(
    "flag,component",
    [
        ("no_patch_encoding", "patch_encoder"),
        ("fixed_grid_patches", "box_patch_extraction"),
        ("drop_base_base", "base_base"),
        ("drop_base_obj", "base_obj"),
        ("drop_obj_time", "obj_time"),
        ("drop_obj_per_t", "obj_per_t"),
    ],
)
def test_ablation_zeroes_component(flag, component):
    full = hs.count_flops(md.ModelConfig(), "povt", 8)
    ablated = hs.count_flops(md.ModelConfig(**{flag: True}), "povt", 8)
    assert full.components[component] > 0
    assert ablated.components[component] == 0


def test_psnr_values():
    a = np.random.default_rng(0).random((3, 8, 8))
    assert hs.psnr(a, a) == math.inf
    b = np.full((4, 4), 0.5)
    assert hs.psnr(b, b + 0.1) == pytest.approx(20.0, abs=1e-9)
    c = np.random.default_rng(1).random((3, 8, 8))
    direct = 10 * math.log10(1.0 / np.mean((a - c) ** 2))
    assert abs(hs.psnr(a, c) - direct) < 1e-9
    assert hs.psnr(a, c) == hs.psnr(c, a)
    with pytest.raises(ValueError):
        hs.psnr(a, c[:2])


def ssim_scalar(a, b):
    """Loop-based reference: per channel, per valid window position."""
    size, sigma = 11, 1.5
    g = [math.exp(-((i - 5) ** 2) / (2 * sigma * sigma)) for i in range(size)]
    s = sum(g)
    g = [v / s for v in g]
    vals = []
    C, H, W = a.shape
    for c in range(C):
        for r in range(H - size + 1):
            for q in range(W - size + 1):
                ma = mb = saa = sbb = sab = 0.0
                for i in range(size):
                    for j in range(size):
                        w = g[i] * g[j]
                        x, y = a[c, r + i, q + j], b[c, r + i, q + j]
                        ma += w * x
                        mb += w * y
                        saa += w * x * x
                        sbb += w * y * y
                        sab += w * x * y
                va, vb, cov = saa - ma * ma, sbb - mb * mb, sab - ma * mb
                c1, c2 = 0.01**2, 0.03**2
                vals.append(((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2)))
    return sum(vals) / len(vals)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_ssim_matches_scalar_reference(seed):
    rng = np.random.default_rng(seed)
    a = rng.random((2, 13, 14))
    b = np.clip(a + rng.normal(0, 0.2, size=a.shape), 0, 1)
    assert abs(hs.ssim(a, b) - ssim_scalar(a, b)) < 1e-6


def test_ssim_properties():
    rng = np.random.default_rng(3)
    a = rng.random((3, 16, 16))
    b = rng.random((3, 16, 16))
    assert hs.ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    assert hs.ssim(a, b) == pytest.approx(hs.ssim(b, a), abs=1e-15)
    assert -1.0 <= hs.ssim(a, b) <= 1.0
    binary = (rng.random((1, 16, 16)) > 0.5).astype(float)
    assert hs.ssim(binary, 1 - binary) < 0
    with pytest.raises(ValueError):
        hs.ssim(np.zeros((3, 8, 8)), np.zeros((3, 8, 8)))

import numpy as np
import pytest

from povt import audit
from povt import boxes as bx
from povt import model as md
from povt import numerics as nx


def tiny(**kw):
    base = dict(W_b=1, W_o=3, K=2, obj_rep=1, patch_res=4, latent_h=2, latent_w=2, V_z=7,
                layers=1, heads=2, D=8, mlp=16, D_obj=4, dropout=0.0, attn_dropout=0.0, init_std=0.3)
    base.update(kw)
    return md.ModelConfig(**base)


def random_inputs(cfg, T, n_b, seed=0, B=1):
    rng = np.random.default_rng(seed)
    pres = rng.integers(0, 2, size=(B, T, cfg.K, 1))
    coords = rng.integers(0, bx.NUM_BINS, size=(B, T, cfg.K, 4))
    toks = np.concatenate([pres, np.where(pres == 1, coords, bx.NULL)], axis=-1)
    patches = rng.random((B, T, cfg.K, cfg.channels, cfg.patch_res, cfg.patch_res))
    mask = np.ones((B, T, cfg.K), dtype=bool)
    mask[:, 0] = False
    z = rng.integers(0, cfg.V_z, size=(B, n_b, cfg.latent_h, cfg.latent_w))
    return md.PriorInputs(toks, patches, mask, z)


def forward(m, inputs):
    with nx.no_grad():
        return m.forward(inputs)


def test_single_base_step_mask_is_raster_causal():
    cfg = tiny()
    masks = md.build_masks(cfg, 3, 1)
    assert np.array_equal(masks.base_base, np.tril(np.ones((4, 4), dtype=bool)))


def test_object_masks_follow_sequence_order():
    # brute force over (t, k, l) positions, generated in that order
    cfg = tiny(W_o=2, K=1)
    T, K, L = 2, 1, cfg.L
    masks = md.build_masks(cfg, T, 1)
    pos = [(t, k, l) for t in range(T) for k in range(K) for l in range(L)]
    for q in pos:
        for key in pos:
            if q[1] == key[1]:
                want = key <= q
                assert masks.obj_time[q[0] * L + q[2], key[0] * L + key[2]] == want
            if q[0] == key[0]:
                want = key <= q
                assert masks.obj_per_t[q[1] * L + q[2], key[1] * L + key[2]] == want


def test_base_attends_only_aligned_time():
    cfg = tiny(W_o=4, W_b=2, K=2)
    masks = md.build_masks(cfg, 4, 2)
    hw, KL = cfg.tokens_per_frame, cfg.K * cfg.L
    for q in range(2 * hw):
        j = q // hw
        allowed_times = {c // KL for c in np.flatnonzero(masks.base_obj[q])}
        assert allowed_times == {4 - 2 + j}


def test_mask_window_errors():
    with pytest.raises(md.ModelConfigError):
        md.build_masks(tiny(), 2, 3)
    with pytest.raises(md.ModelConfigError):
        md.ModelConfig(W_b=3, W_o=2)


def test_output_shapes():
    cfg = tiny()
    m = md.POVT(cfg, seed=0)
    out = forward(m, random_inputs(cfg, 3, 1))
    assert out.pres_logits.shape == (1, 3, 2, 2)
    assert out.coord_logits.shape == (1, 3, 2, 4, bx.COORD_VOCAB)
    assert out.z_logits.shape == (1, 1, 2, 2, 7)


def test_zero_output_projections_make_blocks_identity():
    cfg = tiny()
    m = md.POVT(cfg, seed=0)
    for name, p in m.params.items():
        if name.endswith((".wo", ".bo", ".w2", ".b2")):
            p.data[...] = 0.0
    inputs = random_inputs(cfg, 3, 1)
    with nx.no_grad():
        obj_in, base_in = m.embed(inputs)
        cache = m.object_pass(obj_in)
        base_out = m.base_pass(base_in, cache, 1)
        want_obj = m._ln(obj_in + m._obj_positions(3), "final.ln_o")
        want_base = m._ln(base_in + m._base_positions(1), "final.ln_b")
    np.testing.assert_allclose(cache.obj_out.data, want_obj.data, rtol=0, atol=1e-14)
    np.testing.assert_allclose(base_out.data, want_base.data, rtol=0, atol=1e-14)


def test_drop_obj_time_cuts_temporal_path():
    def delta(cfg):
        m = md.POVT(cfg, seed=1)
        a = random_inputs(cfg, 3, 1, seed=2)
        b = random_inputs(cfg, 3, 1, seed=2)
        b.box_tokens[0, 0] = [[1, 5, 6, 7, 8], [1, 9, 10, 11, 12]]
        a.box_tokens[0, 0] = [[1, 50, 40, 30, 20], [1, 1, 2, 3, 4]]
        with nx.no_grad():
            oa = m.object_pass(m.embed_objects(a.box_tokens, a.patches, a.patch_mask)).obj_out.data
            ob = m.object_pass(m.embed_objects(b.box_tokens, b.patches, b.patch_mask)).obj_out.data
        return np.abs(oa[0, 2] - ob[0, 2]).max()

    assert delta(tiny(drop_obj_time=True)) == 0.0
    assert delta(tiny()) > 1e-6


def test_z_logits_ignore_future_tokens():
    cfg = tiny(W_o=3, W_b=2)
    m = md.POVT(cfg, seed=3)
    a = random_inputs(cfg, 3, 2, seed=4)
    b = random_inputs(cfg, 3, 2, seed=4)
    # base step 0 sits at object time 1; change object time 2 and later latents
    b.box_tokens[0, 2] = np.where(b.box_tokens[0, 2] == bx.NULL, bx.NULL, (b.box_tokens[0, 2] + 3) % bx.NUM_BINS)
    b.box_tokens[0, 2, :, 0] = a.box_tokens[0, 2, :, 0]
    b.patches[0, 2] += 1.0
    b.z_tokens[0, 0, 1, 1] = (a.z_tokens[0, 0, 1, 1] + 1) % cfg.V_z
    b.z_tokens[0, 1] = (a.z_tokens[0, 1] + 2) % cfg.V_z
    za, zb = forward(m, a).z_logits.data, forward(m, b).z_logits.data
    # raster positions up to and including (0, 1, 1) only see earlier latents
    flat_a, flat_b = za.reshape(2, 4, -1), zb.reshape(2, 4, -1)
    assert np.abs(flat_a[0, :4] - flat_b[0, :4]).max() < 1e-9
    assert np.abs(flat_a[1] - flat_b[1]).max() > 1e-6


def test_pres_logit_ignores_later_objects():
    cfg = tiny(K=3)
    m = md.POVT(cfg, seed=5)
    a = random_inputs(cfg, 3, 1, seed=6)
    b = random_inputs(cfg, 3, 1, seed=6)
    b.box_tokens[0, 1, 2] = [1, 3, 3, 3, 3] if a.box_tokens[0, 1, 2, 0] == 0 else [0, bx.NULL, bx.NULL, bx.NULL, bx.NULL]
    pa, pb = forward(m, a).pres_logits.data, forward(m, b).pres_logits.data
    assert np.abs(pa[0, 1, :3] - pb[0, 1, :3]).max() < 1e-9
    assert np.abs(pa[0, 2] - pb[0, 2]).max() > 1e-9


def test_first_step_patches_are_pad_token():
    cfg = tiny()
    m = md.POVT(cfg, seed=0)
    inputs = random_inputs(cfg, 3, 1)
    with nx.no_grad():
        obj = m.embed_objects(inputs.box_tokens, inputs.patches, inputs.patch_mask).data
    for k in range(cfg.K):
        np.testing.assert_array_equal(obj[0, 0, k, : cfg.P], m.params["patch.pad"].data)


def test_absent_boxes_embed_to_zero():
    cfg = tiny()
    m = md.POVT(cfg, seed=0)
    inputs = random_inputs(cfg, 3, 1)
    inputs.box_tokens[0, 1, 0] = [0, bx.NULL, bx.NULL, bx.NULL, bx.NULL]
    with nx.no_grad():
        obj = m.embed_objects(inputs.box_tokens, inputs.patches, inputs.patch_mask).data
    assert np.all(obj[0, 1, 0, cfg.P :] == 0.0)


def test_no_patch_encoding_gives_zero_patch_tokens():
    cfg = tiny(no_patch_encoding=True)
    m = md.POVT(cfg, seed=0)
    inputs = random_inputs(cfg, 3, 1)
    with nx.no_grad():
        obj = m.embed_objects(inputs.box_tokens, inputs.patches, inputs.patch_mask).data
    assert obj.shape[3] == cfg.L
    assert np.all(obj[..., : cfg.P, :] == 0.0)


def test_invalid_tokens_rejected():
    cfg = tiny()
    m = md.POVT(cfg, seed=0)
    bad = random_inputs(cfg, 3, 1)
    bad.z_tokens[0, 0, 0, 0] = cfg.V_z
    with pytest.raises(IndexError):
        m.forward(bad)
    bad = random_inputs(cfg, 3, 1)
    bad.box_tokens[0, 0, 0, 1] = bx.COORD_VOCAB
    with pytest.raises(IndexError):
        m.forward(bad)


def test_slot_permutation_equivariance_without_per_step_order():
    cfg = tiny(K=3, drop_obj_per_t=True)
    m = md.POVT(cfg, seed=7)
    a = random_inputs(cfg, 3, 1, seed=8)
    perm = np.array([2, 0, 1])
    b = md.PriorInputs(a.box_tokens[:, :, perm], a.patches[:, :, perm], a.patch_mask[:, :, perm], a.z_tokens)
    oa, ob = forward(m, a), forward(m, b)
    np.testing.assert_allclose(oa.pres_logits.data[:, :, perm], ob.pres_logits.data, atol=1e-12)
    np.testing.assert_allclose(oa.coord_logits.data[:, :, perm], ob.coord_logits.data, atol=1e-12)
    np.testing.assert_allclose(oa.z_logits.data, ob.z_logits.data, atol=1e-12)


def test_patch_encoder_receives_gradient():
    cfg = tiny()
    m = md.POVT(cfg, seed=0)
    inputs = random_inputs(cfg, 3, 1)
    out = m.forward(inputs)
    nx.backward(nx.tsum(out.pres_logits) + nx.tsum(out.z_logits))
    assert np.abs(m.params["patch.w"].grad).max() > 0


def test_parameter_count_matches_tensors():
    for cfg in (tiny(), tiny(shared_attention=False), tiny(no_patch_encoding=True)):
        m = md.POVT(cfg, seed=0)
        assert m.num_parameters() == sum(p.data.size for p in m.params.values())
    assert md.parameter_count(tiny()) == md.parameter_count(tiny())


@pytest.mark.parametrize("kw", [{}, {"shared_attention": False}, {"W_b": 2, "obj_rep": 2, "layers": 2}])
def test_causality_audit(kw):
    cfg = tiny(**kw)
    res = audit.jacobian_audit(md.POVT(cfg, seed=11))
    assert res.ok, (res.violations[:5], res.dead[:5])


def test_audit_detects_leaks(monkeypatch):
    real = md.build_masks

    def leaky(cfg, T=None, n_b=None):
        m = real(cfg, T, n_b)
        m.obj_per_t = np.ones_like(m.obj_per_t)
        return m

    monkeypatch.setattr(md, "build_masks", leaky)
    res = audit.jacobian_audit(md.POVT(tiny(), seed=11))
    assert res.violations


def test_config_round_trip():
    cfg = tiny(drop_base_obj=True)
    assert md.ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(md.ModelConfigError):
        md.ModelConfig.from_dict({"bogus": 1})


def test_window_patches_shift():
    cfg = tiny()
    rng = np.random.default_rng(0)
    frames = rng.random((3, 3, 32, 32))
    boxes = np.tile(np.array([1.0, 0.5, 0.5, 0.5, 0.5]), (3, 2, 1))
    patches, mask = md.window_patches(cfg, frames, boxes)
    assert not mask[0].any() and mask[1:].all()
    np.testing.assert_allclose(patches[1, 0], bx.extract_patch(frames[1], boxes[1, 0], cfg.patch_res))

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from povt import boxes as bx
from povt import numerics as nx


def test_quantize_boundaries():
    assert bx.quantize_box(bx.BBox(1, 0.0, 1.0, 0.5, 0.5)) == (1, 0, 63, 32, 32)
    assert bx.quantize_box(bx.BBox(0, 0.3, 0.3, 0.3, 0.3)) == (0, bx.NULL, bx.NULL, bx.NULL, bx.NULL)


def test_quantize_rejects_out_of_range():
    with pytest.raises(bx.BoxError):
        bx.quantize_coord(1.01)
    with pytest.raises(bx.BoxError):
        bx.BBox(1, -0.1, 0.5, 0.5, 0.5)


def test_dequantize():
    assert bx.dequantize_box((1, 0, 0, 0, 0)).x == pytest.approx(1 / 128)
    assert bx.dequantize_box((0, bx.NULL, bx.NULL, bx.NULL, bx.NULL)).pres == 0
    with pytest.raises(bx.BoxError):
        bx.dequantize_box((1, bx.NULL, 3, 3, 3))


@given(st.floats(0.0, 1.0))
def test_round_trip_error_bounded(v):
    assert abs(bx.dequantize_coord(bx.quantize_coord(v)) - v) <= 1 / 128 + 1e-15


@given(st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_quantization_monotone(a, b):
    lo, hi = min(a, b), max(a, b)
    assert bx.quantize_coord(lo) <= bx.quantize_coord(hi)


def test_track_tokens_round_trip():
    tracks = np.array([[[1, 0.2, 0.3, 0.1, 0.4], [0, 0, 0, 0, 0]]])
    tok = bx.quantize_tracks(tracks)
    assert tok.tolist() == [[[1, 12, 19, 6, 25], [0, 64, 64, 64, 64]]]
    back = bx.dequantize_tracks(tok)
    assert np.all(np.abs(back - tracks) <= 1 / 128)


def test_permuting_tracks_permutes_tokens():
    rng = np.random.default_rng(0)
    tracks = np.concatenate([np.ones((4, 3, 1)), rng.uniform(0, 1, (4, 3, 4))], axis=-1)
    perm = [2, 0, 1]
    a = bx.quantize_tracks(tracks)
    b = bx.quantize_tracks(tracks[:, perm])
    assert sorted(map(tuple, a.transpose(1, 0, 2).reshape(3, -1))) == sorted(map(tuple, b.transpose(1, 0, 2).reshape(3, -1)))


def test_full_frame_patch_is_identity():
    img = np.random.default_rng(1).uniform(size=(3, 16, 16))
    patch = bx.extract_patch(img, bx.BBox(1, 0.5, 0.5, 1.0, 1.0), out_res=16)
    np.testing.assert_allclose(patch, img, atol=1e-12)


def test_constant_image_gives_constant_patch():
    img = np.full((3, 32, 32), 0.37)
    patch = bx.extract_patch(img, bx.BBox(1, 0.4, 0.6, 0.3, 0.2), out_res=8)
    np.testing.assert_allclose(patch, 0.37, atol=1e-12)


def _oracle_bilinear(img, box, r):
    # independent per-pixel sampler: explicit four-neighbour weights with zero padding
    C, H, W = img.shape
    _, x, y, w, h = box
    out = np.zeros((C, r, r))
    for i in range(r):
        for j in range(r):
            sy = (y - h / 2 + (i + 0.5) / r * h) * H - 0.5
            sx = (x - w / 2 + (j + 0.5) / r * w) * W - 0.5
            iy, ix = int(np.floor(sy)), int(np.floor(sx))
            for yy in (iy, iy + 1):
                for xx in (ix, ix + 1):
                    wgt = (1 - abs(sy - yy)) * (1 - abs(sx - xx))
                    if 0 <= yy < H and 0 <= xx < W:
                        out[:, i, j] += wgt * img[:, yy, xx]
    return out


def test_linear_gradient_matches_bilinear_oracle():
    H = W = 32
    yy, xx = np.mgrid[0:H, 0:W]
    img = np.stack([0.01 * xx + 0.02 * yy, 0.03 * xx, 0.5 + 0 * yy]).astype(float)
    rng = np.random.default_rng(2)
    for _ in range(5):
        box = (1, *rng.uniform(0.2, 0.8, 2), *rng.uniform(0.1, 0.6, 2))
        np.testing.assert_allclose(bx.extract_patch(img, box, 8), _oracle_bilinear(img, box, 8), atol=1e-10)


def test_patch_translation_consistent():
    rng = np.random.default_rng(3)
    img = rng.uniform(size=(3, 32, 32))
    shifted = np.zeros_like(img)
    shifted[:, 3:, 5:] = img[:, :-3, :-5]
    box = (1, 0.4, 0.4, 0.25, 0.25)
    moved = (1, 0.4 + 5 / 32, 0.4 + 3 / 32, 0.25, 0.25)
    np.testing.assert_allclose(bx.extract_patch(img, box, 8), bx.extract_patch(shifted, moved, 8), atol=1e-12)


def test_absent_and_degenerate_boxes_give_zero_patch():
    img = np.ones((3, 32, 32))
    assert not bx.extract_patch(img, bx.BBox(0), 8).any()
    assert bx.is_degenerate((1, 0.5, 0.5, 0.01, 0.5))
    assert not bx.extract_patch(img, (1, 0.5, 0.5, 0.01, 0.5), 8).any()
    _, valid = bx.extract_patches(img[None], np.array([[[1, 0.5, 0.5, 0.01, 0.5], [1, 0.5, 0.5, 0.5, 0.5]]]))
    assert valid.tolist() == [[False, True]]


def test_outside_samples_are_zero_padded():
    img = np.ones((1, 8, 8))
    patch = bx.extract_patch(img, (1, 1.0, 0.5, 1.0, 1.0), 8)
    assert patch[0, :, :4].max() == 1.0 and patch[0, :, -3:].max() == 0.0


def test_encode_patch_shapes_and_zero():
    w = nx.parameter(np.random.default_rng(4).standard_normal((16, 3, 8, 8)))
    b = nx.parameter(np.zeros(16))
    tok = bx.encode_patch(nx.Tensor(np.zeros((5, 3, 8, 8))), w, b, stride=8)
    assert tok.shape == (5, 1, 16) and not tok.data.any()
    w4 = nx.parameter(np.random.default_rng(5).standard_normal((16, 3, 4, 4)))
    tok = bx.encode_patch(nx.Tensor(np.ones((2, 3, 8, 8))), w4, b, stride=4)
    assert tok.shape == (2, 4, 16)


def test_grid_boxes_tile_frame():
    g = bx.grid_boxes(4)
    assert g[:, 3].tolist() == [0.5] * 4
    assert g[:, 1].tolist() == [0.25, 0.75, 0.25, 0.75]

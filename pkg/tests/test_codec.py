import math

import numpy as np
import pytest

from povt import checkpoint as ckpt
from povt import codec as cd
from povt import data
from povt import numerics as nx


@pytest.fixture(scope="module")
def small():
    return cd.Codec(cd.CodecConfig(hidden=16, residual_units=8, codebook_size=16, codebook_dim=8), seed=1)


def test_encode_grid_shape(small):
    frames = np.random.default_rng(0).random((2, 3, 32, 32))
    z = small.encode(frames)
    assert z.shape == (2, 8, 8, 8)
    assert small.tokens(frames).shape == (2, 8, 8)


def test_zero_frame_finite(small):
    z = small.encode(np.zeros((1, 3, 32, 32)))
    assert np.all(np.isfinite(z.data))
    out = small.decode_latents(nx.Tensor(np.zeros((1, 8, 8, 8))))
    assert np.all(np.isfinite(out.data))


def test_wrong_size_rejected(small):
    with pytest.raises(nx.DimensionError):
        small.encode(np.zeros((1, 3, 16, 16)))


def test_round_trip_shape(small):
    x = np.random.default_rng(1).random((3, 3, 32, 32))
    assert small.reconstruct(x).shape == x.shape


def test_quantize_nearest():
    cb = np.array([[0.0, 0.0], [1.0, 1.0]])
    idx, zq = cd.quantize(np.array([[0.9, 0.8]]), cb)
    assert idx.tolist() == [1]
    assert zq.tolist() == [[1.0, 1.0]]


def test_quantize_tie_lowest_index():
    cb = np.array([[1.0, 0.0], [0.0, 0.0], [-1.0, 0.0]])
    idx, _ = cd.quantize(np.array([[0.0, 0.0], [0.5, 0.0], [-0.5, 0.0]]), cb)
    assert idx.tolist() == [1, 0, 1]


def test_quantize_near_tie_exact():
    # expanded-form rounding must not flip a near tie
    cb = np.array([[1e8, 0.0], [1e8 + 2.0, 0.0]])
    idx, _ = cd.quantize(np.array([[1e8 + 1.0 - 1e-7, 0.0]]), cb)
    assert idx.tolist() == [0]


def test_quantize_errors():
    with pytest.raises(cd.CodecConfigError):
        cd.quantize(np.zeros((1, 2)), np.zeros((0, 2)))
    with pytest.raises(nx.DimensionError):
        cd.quantize(np.zeros((1, 3)), np.zeros((4, 2)))


def test_commitment_arithmetic():
    z_e = nx.parameter(np.array([[0.9, 0.8]]))
    cb = np.array([[0.0, 0.0], [1.0, 1.0]])
    idx, zq = cd.quantize(z_e.data, cb)
    commit = nx.tsum((z_e - zq) ** 2) * 0.25
    assert commit.item() == pytest.approx(0.0125, abs=1e-15)


def test_quantize_idempotent_and_in_range():
    rng = np.random.default_rng(2)
    cb = rng.normal(size=(32, 4))
    idx, zq = cd.quantize(rng.normal(size=(10, 6, 4)), cb)
    idx2, _ = cd.quantize(zq, cb)
    assert np.array_equal(idx, idx2)
    assert idx.min() >= 0 and idx.max() < 32


def test_straight_through_gradient(small):
    frames = np.random.default_rng(3).random((1, 3, 32, 32))
    z_e = nx.parameter(small.encode(frames).data)
    _, zq_np = cd.quantize(z_e.data, small.codebook.data)
    zq = nx.parameter(zq_np)
    nx.backward(nx.mse(small.decode_latents(nx.straight_through(z_e, zq_np)), frames))
    nx.backward(nx.mse(small.decode_latents(zq), frames))
    np.testing.assert_allclose(z_e.grad, zq.grad, rtol=1e-12, atol=1e-15)


def test_beta_zero_removes_commitment(small):
    frames = np.random.default_rng(4).random((2, 3, 32, 32))
    t0, p0 = small.loss(frames, beta=0.0)
    t1, p1 = small.loss(frames, beta=0.25)
    assert p0["total"] == pytest.approx(p0["recon"] + p0["codebook"], rel=1e-14)
    assert p1["total"] - p0["total"] == pytest.approx(0.25 * p1["commit"], rel=1e-10)


def test_default_beta():
    assert cd.CodecConfig().beta == 0.25


def test_decode_index_out_of_range(small):
    with pytest.raises(IndexError):
        small.decode(np.full((8, 8), 16))


def test_config_validation():
    with pytest.raises(cd.CodecConfigError):
        cd.CodecConfig(input_size=24, latent_size=8)
    with pytest.raises(cd.CodecConfigError):
        cd.CodecConfig(codebook_size=1)


def test_checkpoint_round_trip(tmp_path, small):
    conf, tensors = cd.codec_state(small)
    ckpt.save(tmp_path / "c.ckpt", conf, tensors)
    conf2, tensors2 = ckpt.load(tmp_path / "c.ckpt")
    back = cd.codec_from_state(conf2, tensors2)
    x = np.random.default_rng(5).random((1, 3, 32, 32))
    assert np.array_equal(back.tokens(x), small.tokens(x))
    raw = (tmp_path / "c.ckpt").read_bytes()
    with pytest.raises(ckpt.CheckpointError):
        ckpt.loads(raw[:-3])
    with pytest.raises(ckpt.CheckpointError):
        ckpt.loads(b"XXXXXXXX" + raw[8:])


def test_empty_batch_rejected(small):
    with pytest.raises(ValueError):
        cd.CodecTrainer(small).step(np.zeros((0, 3, 32, 32)))


def test_loss_decreases_on_small_set():
    frames = data.gen_bounce_video(11, 16, 2).frames
    codec = cd.Codec(cd.CodecConfig(hidden=16, residual_units=8, codebook_size=32, codebook_dim=8), seed=0)
    codec.init_codebook_from(frames, seed=0)
    trainer = cd.CodecTrainer(codec)
    losses = [trainer.step(frames)["total"] for _ in range(200)]
    avg = np.convolve(losses, np.ones(20) / 20, mode="valid")
    assert np.all(np.diff(avg) < 0)
    assert all(math.isfinite(v) for v in losses)

"""VQ-VAE frame codec: conv encoder, nearest-codebook quantizer, mirrored decoder."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nx
from .numerics import Tensor


class CodecConfigError(ValueError):
    pass


@dataclass
class CodecConfig:
    input_size: int = 32
    latent_size: int = 8
    channels: int = 3
    hidden: int = 64
    residual_units: int = 32
    residual_layers: int = 1
    codebook_size: int = 128
    codebook_dim: int = 32
    beta: float = 0.25
    lr: float = 7e-4

    def __post_init__(self):
        ratio = self.input_size / self.latent_size
        if ratio < 1 or ratio != int(ratio) or int(ratio) & (int(ratio) - 1):
            raise CodecConfigError("input_size must be a power-of-two multiple of latent_size")
        if self.codebook_size < 2:
            raise CodecConfigError("codebook needs at least 2 entries")

    @property
    def stages(self) -> int:
        return int(round(math.log2(self.input_size // self.latent_size)))

    @classmethod
    def paper_scale(cls) -> CodecConfig:
        return cls(
            input_size=64,
            latent_size=16,
            hidden=256,
            residual_units=128,
            residual_layers=2,
            codebook_size=1024,
            codebook_dim=128,
        )

    def to_dict(self) -> dict:
        return asdict(self)


def _conv_init(rng, out_c, in_c, k, transposed=False):
    fan_in = in_c * k * k
    shape = (in_c, out_c, k, k) if transposed else (out_c, in_c, k, k)
    return rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)


def init_codec_params(cfg: CodecConfig, seed: int = 0) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    p: dict[str, np.ndarray] = {}
    c_in = cfg.channels
    for s in range(cfg.stages):
        p[f"enc.down{s}.w"] = _conv_init(rng, cfg.hidden, c_in, 4)
        p[f"enc.down{s}.b"] = np.zeros(cfg.hidden)
        c_in = cfg.hidden
    p["enc.mid.w"] = _conv_init(rng, cfg.hidden, cfg.hidden, 3)
    p["enc.mid.b"] = np.zeros(cfg.hidden)
    for side in ("enc", "dec"):
        for r in range(cfg.residual_layers):
            p[f"{side}.res{r}.w1"] = _conv_init(rng, cfg.residual_units, cfg.hidden, 3)
            p[f"{side}.res{r}.b1"] = np.zeros(cfg.residual_units)
            p[f"{side}.res{r}.w2"] = _conv_init(rng, cfg.hidden, cfg.residual_units, 1)
            p[f"{side}.res{r}.b2"] = np.zeros(cfg.hidden)
    p["enc.out.w"] = _conv_init(rng, cfg.codebook_dim, cfg.hidden, 1)
    p["enc.out.b"] = np.zeros(cfg.codebook_dim)
    p["dec.in.w"] = _conv_init(rng, cfg.hidden, cfg.codebook_dim, 3)
    p["dec.in.b"] = np.zeros(cfg.hidden)
    for s in range(cfg.stages):
        out_c = cfg.channels if s == cfg.stages - 1 else cfg.hidden
        p[f"dec.up{s}.w"] = _conv_init(rng, out_c, cfg.hidden, 4, transposed=True)
        p[f"dec.up{s}.b"] = np.zeros(out_c)
    V = cfg.codebook_size
    p["codebook"] = rng.uniform(-1.0 / V, 1.0 / V, size=(V, cfg.codebook_dim))
    return {k: nx.parameter(v, name=k) for k, v in p.items()}


def _res_stack(x: Tensor, p: dict[str, Tensor], side: str, layers: int) -> Tensor:
    for r in range(layers):
        h = nx.conv2d(nx.relu(x), p[f"{side}.res{r}.w1"], p[f"{side}.res{r}.b1"], stride=1, pad=1)
        h = nx.conv2d(nx.relu(h), p[f"{side}.res{r}.w2"], p[f"{side}.res{r}.b2"])
        x = x + h
    return nx.relu(x)


def quantize(z_e: np.ndarray, codebook: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest codebook rows by squared Euclidean distance; ties go to the lowest index.

    z_e [..., d] -> (indices [...], z_q [..., d]).
    """
    codebook = np.asarray(codebook, dtype=np.float64)
    if codebook.ndim != 2 or codebook.shape[0] == 0:
        raise CodecConfigError("empty codebook")
    z_e = np.asarray(z_e, dtype=np.float64)
    if z_e.shape[-1] != codebook.shape[1]:
        raise nx.DimensionError(f"feature dim {z_e.shape[-1]} != codebook dim {codebook.shape[1]}")
    flat = z_e.reshape(-1, z_e.shape[-1])
    approx = (flat * flat).sum(1)[:, None] - 2.0 * flat @ codebook.T + (codebook * codebook).sum(1)[None, :]
    idx = np.argmin(approx, axis=1)
    # the expanded form can misorder near-ties by rounding; settle those exactly
    best = approx[np.arange(len(flat)), idx]
    close = approx <= best[:, None] + 1e-9 * (1.0 + np.abs(best[:, None]))
    for r in np.flatnonzero(close.sum(1) > 1):
        cand = np.flatnonzero(close[r])
        exact = ((flat[r] - codebook[cand]) ** 2).sum(axis=1)
        idx[r] = cand[np.argmin(exact)]
    return idx.reshape(z_e.shape[:-1]), codebook[idx].reshape(z_e.shape)


class Codec:
    """Frames [B,C,H,W] <-> latent index grids [B,h,w]."""

    def __init__(self, cfg: CodecConfig | None = None, params: dict[str, Tensor] | None = None, seed: int = 0):
        self.cfg = cfg or CodecConfig()
        self.params = params if params is not None else init_codec_params(self.cfg, seed)

    @property
    def codebook(self) -> Tensor:
        return self.params["codebook"]

    def _check_frames(self, x: np.ndarray | Tensor):
        shape = x.shape
        c = self.cfg
        if len(shape) != 4 or shape[1:] != (c.channels, c.input_size, c.input_size):
            raise nx.DimensionError(
                f"expected frames [B,{c.channels},{c.input_size},{c.input_size}], got {tuple(shape)}"
            )

    def encode(self, frames) -> Tensor:
        """Continuous pre-quantization features [B,h,w,d]."""
        frames = frames if isinstance(frames, Tensor) else Tensor(frames)
        if frames.ndim == 3:
            frames = frames.reshape((1,) + frames.shape)
        self._check_frames(frames)
        p, c = self.params, self.cfg
        x = frames
        for s in range(c.stages):
            x = nx.relu(nx.conv2d(x, p[f"enc.down{s}.w"], p[f"enc.down{s}.b"], stride=2, pad=1))
        x = nx.conv2d(x, p["enc.mid.w"], p["enc.mid.b"], stride=1, pad=1)
        x = _res_stack(x, p, "enc", c.residual_layers)
        x = nx.conv2d(x, p["enc.out.w"], p["enc.out.b"])
        return nx.transpose(x, (0, 2, 3, 1))

    def decode_latents(self, z: Tensor) -> Tensor:
        """[B,h,w,d] latents -> [B,C,H,W] reconstruction (unclamped)."""
        p, c = self.params, self.cfg
        x = nx.transpose(z, (0, 3, 1, 2))
        x = nx.conv2d(x, p["dec.in.w"], p["dec.in.b"], stride=1, pad=1)
        x = _res_stack(x, p, "dec", c.residual_layers)
        for s in range(c.stages):
            x = nx.conv_transpose2d(x, p[f"dec.up{s}.w"], p[f"dec.up{s}.b"], stride=2, pad=1)
            if s < c.stages - 1:
                x = nx.relu(x)
        return x

    def decode(self, indices) -> np.ndarray:
        """Index grids [B,h,w] (or [h,w]) -> frames, clamped to [0, 1]."""
        idx = np.asarray(indices)
        single = idx.ndim == 2
        if single:
            idx = idx[None]
        with nx.no_grad():
            z = nx.embedding(self.codebook, idx)
            out = np.clip(self.decode_latents(z).data, 0.0, 1.0)
        return out[0] if single else out

    def tokens(self, frames) -> np.ndarray:
        with nx.no_grad():
            z_e = self.encode(frames).data
        return quantize(z_e, self.codebook.data)[0]

    def reconstruct(self, frames) -> np.ndarray:
        return self.decode(self.tokens(frames))

    def loss(self, frames: np.ndarray, beta: float | None = None, return_codes: bool = False):
        """Reconstruction MSE + codebook loss + beta * commitment loss.

        Returns (total, parts), plus (indices, encoder features) with ``return_codes``.
        """
        beta = self.cfg.beta if beta is None else beta
        frames = np.asarray(frames, dtype=np.float64)
        z_e = self.encode(frames)
        idx, zq_np = quantize(z_e.data, self.codebook.data)
        e = nx.embedding(self.codebook, idx)
        cells = idx.size
        codebook_loss = nx.tsum((e - z_e.data) ** 2) * (1.0 / cells)
        commit = nx.tsum((z_e - e.data) ** 2) * (1.0 / cells)
        recon = nx.mse(self.decode_latents(nx.straight_through(z_e, zq_np)), frames)
        total = recon + codebook_loss
        if beta:
            total = total + commit * beta
        parts = {
            "recon": recon.item(),
            "codebook": codebook_loss.item(),
            "commit": commit.item(),
            "total": total.item(),
        }
        if return_codes:
            return total, parts, idx, z_e.data
        return total, parts

    def init_codebook_from(self, frames: np.ndarray, seed: int = 0) -> None:
        """Seed the codebook with distinct encoder outputs (farthest-point picks)."""
        with nx.no_grad():
            z = self.encode(frames).data.reshape(-1, self.cfg.codebook_dim)
        rng = np.random.default_rng(seed)
        V = self.cfg.codebook_size
        chosen = [int(rng.integers(len(z)))]
        d = ((z - z[chosen[0]]) ** 2).sum(axis=1)
        while len(chosen) < min(V, len(z)):
            nxt = int(np.argmax(d))
            if d[nxt] <= 0:
                break
            chosen.append(nxt)
            d = np.minimum(d, ((z - z[nxt]) ** 2).sum(axis=1))
        cb = self.codebook.data
        cb[: len(chosen)] = z[chosen]
        if len(chosen) < V:
            cb[len(chosen) :] = z[rng.integers(len(z), size=V - len(chosen))] + rng.normal(
                0, 1e-3, size=(V - len(chosen), z.shape[1])
            )


class CodecTrainer:
    """Adam on the codec loss, with periodic restarts of unused codebook rows.

    Every ``restart_every`` steps, rows that no cell selected since the last
    check are moved onto randomly chosen encoder outputs of the current batch,
    which keeps the codebook from collapsing onto a few entries.
    """

    def __init__(self, codec: Codec, lr: float | None = None, warmup: int = 0, restart_every: int = 20, seed: int = 0):
        self.codec = codec
        self.opt = nx.Adam(codec.params, lr=lr or codec.cfg.lr, warmup=warmup)
        self.restart_every = restart_every
        self.usage = np.zeros(codec.cfg.codebook_size, dtype=np.int64)
        self.rng = np.random.default_rng([seed, 3])
        self.restarted = 0

    def step(self, frames: np.ndarray) -> dict[str, float]:
        if len(frames) == 0:
            raise ValueError("empty batch")
        self.opt.zero_grad()
        total, parts, idx, z_e = self.codec.loss(frames, return_codes=True)
        if not all(math.isfinite(v) for v in parts.values()):
            raise FloatingPointError(f"non-finite codec loss at step {self.opt.step_count}: {parts}")
        nx.backward(total)
        self.opt.step()
        self.usage += np.bincount(idx.reshape(-1), minlength=len(self.usage))
        if self.restart_every and self.opt.step_count % self.restart_every == 0:
            self._restart_dead(z_e.reshape(-1, z_e.shape[-1]))
        return parts

    def _restart_dead(self, feats: np.ndarray) -> None:
        dead = np.flatnonzero(self.usage == 0)
        self.usage[:] = 0
        if dead.size == 0:
            return
        picks = self.rng.integers(len(feats), size=dead.size)
        cb = self.codec.codebook.data
        cb[dead] = feats[picks] + self.rng.normal(0.0, 1e-4, size=(dead.size, feats.shape[1]))
        self.opt.m["codebook"][dead] = 0.0
        self.opt.v["codebook"][dead] = 0.0
        self.restarted += int(dead.size)


def train_codec_step(trainer: CodecTrainer, frames: np.ndarray) -> dict[str, float]:
    return trainer.step(frames)


def psnr_of(codec: Codec, frames: np.ndarray) -> float:
    rec = codec.reconstruct(frames)
    m = float(((rec - frames) ** 2).mean())
    return math.inf if m == 0 else 10 * math.log10(1.0 / m)


def codec_state(codec: Codec, prefix: str = "codec.") -> tuple[dict, dict[str, np.ndarray]]:
    return codec.cfg.to_dict(), {prefix + k: v.data for k, v in codec.params.items()}


def codec_from_state(config: dict, tensors: dict[str, np.ndarray], prefix: str = "codec.") -> Codec:
    cfg = CodecConfig(**config)
    expected = init_codec_params(cfg)
    params = {}
    for k, ref in expected.items():
        arr = tensors.get(prefix + k)
        if arr is None or arr.shape != ref.shape:
            raise CodecConfigError(f"checkpoint tensor {prefix + k} missing or mis-shaped")
        params[k] = nx.parameter(arr, name=k)
    return Codec(cfg, params)

"""Windowed training objective and optimization loop for the prior.

Every iteration draws a history length tau, then for each video a window of
tau context timesteps followed by W_b modeled timesteps.  The object stream
sees the whole window, the base stream only the modeled part, and the loss
covers only modeled tokens.
"""

from __future__ import annotations

import csv
import math
import queue
import threading
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import boxes as bx
from . import numerics as nx
from . import checkpoint as ckpt
from .codec import Codec, codec_from_state, codec_state
from .data import VideoSample
from .model import POVT, ModelConfig, PriorInputs, PriorOutputs, frame_crops, load_params, shift_crops


class TrainConfigError(ValueError):
    pass


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, last_good_step: int, last_good_path: str | None = None):
        where = f"; last good weights from step {last_good_step}"
        if last_good_path:
            where += f" at {last_good_path}"
        super().__init__(f"non-finite loss or gradient at step {step}{where}")
        self.step = step
        self.last_good_step = last_good_step
        self.last_good_path = last_good_path


@dataclass
class TrainConfig:
    T: int = 8
    W_b: int = 1
    W_o: int = 8
    lr: float = 1e-3
    batch_size: int = 8
    steps: int = 1000
    seed: int = 0
    loss_on_history: bool = False
    warmup: int = 500
    clip_norm: float = 1.0
    shuffle_tracks: bool = True
    cosine_decay: bool = False  # anneal lr to zero over ``steps``
    log_every: int = 10

    def __post_init__(self):
        if self.T < self.W_b:
            raise TrainConfigError("clip length T must be >= W_b")
        if self.W_o > self.T:
            raise TrainConfigError("W_o must not exceed the clip length T")
        if self.W_b < 1 or self.W_o < self.W_b:
            raise TrainConfigError("need W_o >= W_b >= 1")
        if self.lr <= 0:
            raise TrainConfigError("learning rate must be positive")
        if self.batch_size < 1:
            raise TrainConfigError("batch size must be >= 1")

    @property
    def max_tau(self) -> int:
        return min(self.T - self.W_b, self.W_o - self.W_b)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class PreparedVideo:
    """Token-level view of one video for prior training.

    crops[t] are taken from the codec reconstruction of frame t at its
    dequantized boxes, i.e. exactly what generation would see at time t+1.
    """

    box_tokens: np.ndarray  # [T, K, 5]
    z_tokens: np.ndarray  # [T, h, w]
    crops: np.ndarray  # [T, K, C, r, r]
    crop_mask: np.ndarray  # [T, K]

    @property
    def length(self) -> int:
        return self.box_tokens.shape[0]


@dataclass
class Window:
    tau: int
    start: int  # first object timestep in the video
    n_b: int

    @property
    def length(self) -> int:
        return self.tau + self.n_b


def prepare_video(video: VideoSample, codec: Codec, cfg: ModelConfig) -> PreparedVideo:
    if video.tracks.shape[1] != cfg.K:
        raise TrainConfigError(f"video has {video.tracks.shape[1]} track slots, model expects {cfg.K}")
    toks = bx.quantize_tracks(video.tracks)
    with nx.no_grad():
        z = codec.tokens(video.frames)
        recon = codec.decode(z)
    crops, mask = frame_crops(cfg, recon, bx.dequantize_tracks(toks))
    return PreparedVideo(toks, z, crops, mask)


def sample_tau(rng: np.random.Generator, cfg: TrainConfig) -> int:
    return int(rng.integers(0, cfg.max_tau + 1))


def sample_window(video: PreparedVideo | VideoSample, rng: np.random.Generator, cfg: TrainConfig, tau: int | None = None) -> Window | None:
    """Place a window of tau history plus W_b modeled steps; None when the video is too short."""
    n = video.length
    if n < cfg.W_b:
        return None
    if tau is None:
        tau = int(rng.integers(0, min(n - cfg.W_b, cfg.W_o - cfg.W_b) + 1))
    if tau + cfg.W_b > n:
        return None
    start = int(rng.integers(0, n - tau - cfg.W_b + 1))
    return Window(tau, start, cfg.W_b)


def window_inputs(video: PreparedVideo, win: Window, perm: np.ndarray | None = None) -> PriorInputs:
    """Inputs for one window (batch axis of 1); ``perm`` reorders the track slots."""
    a, n = win.start, win.length
    toks = video.box_tokens[a : a + n]
    patches, mask = shift_crops(video.crops[a : a + n], video.crop_mask[a : a + n])
    if perm is not None:
        toks, patches, mask = toks[:, perm], patches[:, perm], mask[:, perm]
    z = video.z_tokens[a + win.tau : a + n]
    return PriorInputs(toks[None], patches[None], mask[None], z[None])


def stack_inputs(items: list[PriorInputs]) -> PriorInputs:
    return PriorInputs(*(np.concatenate([getattr(i, f) for i in items]) for f in ("box_tokens", "patches", "patch_mask", "z_tokens")))


def loss_mask(T: int, tau: int, loss_on_history: bool = False) -> np.ndarray:
    """[T] bool over object timesteps that carry box loss."""
    m = np.zeros(T, dtype=bool)
    m[0 if loss_on_history else tau :] = True
    return m


@dataclass
class LossParts:
    total: nx.Tensor
    pres: float
    coord: float
    z: float
    nll_sum: float  # summed nats over every modeled token
    count: int

    @property
    def per_token(self) -> float:
        return self.nll_sum / self.count


def _token_nll(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(logits - m).sum(axis=-1)) + m[..., 0]
    return lse - np.take_along_axis(logits, targets[..., None], axis=-1)[..., 0]


def prior_loss(out: PriorOutputs, inputs: PriorInputs, time_mask: np.ndarray) -> LossParts:
    """Per-stream mean cross-entropies, summed with weight 1.

    Box tokens count at object timesteps where ``time_mask`` is set; coordinate
    tokens only where the object is present; every base-stream token counts.
    """
    toks = np.asarray(inputs.box_tokens, dtype=np.int64)
    B, T, K, _ = toks.shape
    time_mask = np.broadcast_to(np.asarray(time_mask, dtype=bool), (T,))
    keep = np.broadcast_to(time_mask[None, :, None], (B, T, K))
    parts, total = {}, None
    nll_sum, count = 0.0, 0
    streams = [
        ("pres", out.pres_logits, toks[..., 0], keep),
        ("coord", out.coord_logits, toks[..., 1:], (keep & (toks[..., 0] == 1))[..., None] & np.ones(4, dtype=bool)),
    ]
    if out.z_logits is not None:
        z = np.asarray(inputs.z_tokens, dtype=np.int64)
        streams.append(("z", out.z_logits, z, np.ones(z.shape, dtype=bool)))
    for name, logits, targets, m in streams:
        if not m.any():
            parts[name] = 0.0
            continue
        V = logits.shape[-1]
        flat = logits.reshape(-1, V)
        term = nx.softmax_cross_entropy(flat, targets.reshape(-1), ignore=~m.reshape(-1))
        parts[name] = term.item()
        total = term if total is None else total + term
        sel = m.reshape(-1)
        nll_sum += math.fsum(_token_nll(flat.data[sel], targets.reshape(-1)[sel]))
        count += int(sel.sum())
    if total is None:
        raise nx.DegenerateLossError("loss mask selects no tokens")
    parts.setdefault("z", 0.0)
    return LossParts(total, parts["pres"], parts["coord"], parts["z"], nll_sum, count)


def prefetch(produce, depth: int = 2):
    """Run ``produce`` (a generator function) on a worker thread behind a bounded queue."""
    q: queue.Queue = queue.Queue(maxsize=depth)
    stop = threading.Event()
    done = object()

    def work():
        try:
            for item in produce():
                while not stop.is_set():
                    try:
                        q.put(item, timeout=0.1)
                        break
                    except queue.Full:
                        continue
                if stop.is_set():
                    return
            q.put(done)
        except BaseException as e:  # surface producer errors in the consumer
            q.put(e)

    th = threading.Thread(target=work, daemon=True)
    th.start()
    try:
        while True:
            item = q.get()
            if item is done:
                return
            if isinstance(item, BaseException):
                raise item
            yield item
    finally:
        stop.set()


class PriorTrainer:
    """Single optimizer owner for the prior; the codec is only used for preprocessing."""

    def __init__(self, model: POVT, cfg: TrainConfig, videos: list[PreparedVideo], codec: Codec | None = None):
        if cfg.W_b != model.cfg.W_b or cfg.W_o != model.cfg.W_o:
            raise TrainConfigError("train and model windows disagree")
        if not videos:
            raise TrainConfigError("no training videos")
        self.model = model
        self.cfg = cfg
        self.videos = [v for v in videos if v.length >= cfg.W_b]
        if not self.videos:
            raise TrainConfigError("every video is shorter than W_b")
        self.codec = codec
        if codec is not None:
            for p in codec.params.values():
                p.grad = None
        self.opt = nx.Adam(model.params, cfg.lr, warmup=cfg.warmup, clip_norm=cfg.clip_norm,
                           decay_steps=cfg.steps if cfg.cosine_decay else None)
        self.drop_rng = np.random.default_rng([cfg.seed, 2])
        self.step_count = 0
        self.last_good_step = 0
        self.last_good_path: str | None = None
        self._snapshot = {k: p.data.copy() for k, p in model.params.items()}

    def batch_rng(self, step: int) -> np.random.Generator:
        # one stream per step, so prefetching ahead never changes what a step sees
        return np.random.default_rng([self.cfg.seed, 1, step])

    def next_batch(self, rng: np.random.Generator) -> tuple[PriorInputs, int]:
        cfg = self.cfg
        tau = sample_tau(rng, cfg)
        pool = [v for v in self.videos if v.length >= tau + cfg.W_b]
        picks = rng.permutation(len(pool))
        picks = np.resize(picks, cfg.batch_size) if len(pool) < cfg.batch_size else picks[: cfg.batch_size]
        items = []
        for i in picks:
            v = pool[int(i)]
            win = sample_window(v, rng, cfg, tau)
            perm = rng.permutation(self.model.cfg.K) if cfg.shuffle_tracks else None
            items.append(window_inputs(v, win, perm))
        return stack_inputs(items), tau

    def batches(self, first_step: int = 1):
        step = first_step
        while True:
            yield self.next_batch(self.batch_rng(step))
            step += 1

    def step(self, inputs: PriorInputs, tau: int, update: bool = True) -> dict[str, float]:
        self.opt.zero_grad()
        out = self.model.forward(inputs, training=True, rng=self.drop_rng)
        parts = prior_loss(out, inputs, loss_mask(inputs.T, tau, self.cfg.loss_on_history))
        self.step_count += 1
        if not math.isfinite(parts.total.item()):
            self.restore_last_good()
            raise TrainingDiverged(self.step_count, self.last_good_step, self.last_good_path)
        nx.backward(parts.total)
        if self.codec is not None:
            leaked = [k for k, p in self.codec.params.items() if p.grad is not None]
            assert not leaked, f"prior step produced codec gradients: {leaked}"
        if update:
            norm = self.opt.step()
            if not math.isfinite(norm):
                self.restore_last_good()
                raise TrainingDiverged(self.step_count, self.last_good_step, self.last_good_path)
        return {"loss": parts.total.item(), "pres": parts.pres, "coord": parts.coord, "z": parts.z, "nll": parts.per_token}

    def mark_good(self, path: str | None = None) -> None:
        self._snapshot = {k: p.data.copy() for k, p in self.model.params.items()}
        self.last_good_step = self.step_count
        self.last_good_path = path

    def restore_last_good(self) -> None:
        for k, p in self.model.params.items():
            p.data = self._snapshot[k].copy()

    def run(self, steps: int, log_path: str | Path | None = None, callback=None, prefetch_depth: int = 2) -> list[dict]:
        """Train for ``steps`` iterations; ``callback(step, row)`` returning True stops early."""
        history = []
        writer = fh = None
        if log_path is not None:
            fh = open(log_path, "w", newline="")
            writer = csv.writer(fh)
            writer.writerow(["step", "loss_z", "loss_pres", "loss_coord", "wallclock"])
        t0 = time.perf_counter()
        first = self.step_count + 1
        stream = prefetch(lambda: self.batches(first), prefetch_depth) if prefetch_depth else self.batches(first)
        try:
            for _ in range(steps):
                inputs, tau = next(stream)
                row = self.step(inputs, tau)
                row["step"] = self.step_count
                history.append(row)
                if writer is not None and (self.step_count % self.cfg.log_every == 0 or self.step_count == 1):
                    writer.writerow([self.step_count, f"{row['z']:.6f}", f"{row['pres']:.6f}", f"{row['coord']:.6f}", f"{time.perf_counter() - t0:.3f}"])
                if callback is not None and callback(self.step_count, row):
                    break
        finally:
            if hasattr(stream, "close"):
                stream.close()
            if fh is not None:
                fh.close()
        return history


def train_prior_step(trainer: PriorTrainer, batch: PriorInputs, tau: int) -> dict[str, float]:
    return trainer.step(batch, tau)


def rollout_windows(video: PreparedVideo, cfg: ModelConfig, first: int = 1) -> list[tuple[int, Window]]:
    """The windows generation uses: for each frame s >= first, all history that fits."""
    out = []
    for s in range(first, video.length - cfg.W_b + 1):
        tau = min(s, cfg.W_o - cfg.W_b)
        out.append((s, Window(tau, s - tau, cfg.W_b)))
    return out


def evaluate_nll(model: POVT, videos: list[PreparedVideo], first: int = 1) -> float:
    """Teacher-forced nats per modeled token over the rollout windows of every video."""
    total, count = 0.0, 0
    with nx.no_grad():
        for v in videos:
            for _, win in rollout_windows(v, model.cfg, first):
                inputs = window_inputs(v, win)
                out = model.forward(inputs)
                parts = prior_loss(out, inputs, loss_mask(inputs.T, win.tau))
                total += parts.nll_sum
                count += parts.count
    return total / count


def save_prior_checkpoint(path, model: POVT, codec: Codec, train_cfg: TrainConfig | None = None, extra: dict | None = None) -> None:
    """One file holding the frozen codec (``codec.`` tensors) and the prior (``prior.`` tensors)."""
    ccfg, ctensors = codec_state(codec)
    config = {"kind": "prior", "model": model.cfg.to_dict(), "codec": ccfg}
    if train_cfg is not None:
        config["train"] = train_cfg.to_dict()
    if extra:
        config.update(extra)
    tensors = dict(ctensors)
    tensors.update({"prior." + k: p.data for k, p in model.params.items()})
    ckpt.save(path, config, tensors)


def load_prior_checkpoint(path) -> tuple[POVT, Codec, dict]:
    config, tensors = ckpt.load(path)
    if config.get("kind") != "prior":
        raise ckpt.CheckpointError(f"{path} is not a prior checkpoint")
    try:
        mcfg = ModelConfig.from_dict(config["model"])
        model = POVT(mcfg, load_params(mcfg, tensors))
        codec = codec_from_state(config["codec"], tensors)
    except (KeyError, ValueError) as e:
        raise ckpt.CheckpointError(f"checkpoint/config mismatch: {e}") from e
    return model, codec, config

"""Autoregressive generation: boxes first, then the frame's latent grid, one frame at a time."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import boxes as bx
from . import numerics as nx
from .codec import Codec
from .data import PALETTE, VideoSample
from .model import POVT, frame_crops
from .train import PreparedVideo, Window, window_inputs


class GenerationError(ValueError):
    pass


class EditError(GenerationError):
    pass


def draw_token(logits: np.ndarray, temperature: float, top_k: int | None, rng: np.random.Generator) -> int:
    """One token from a logit vector; temperature 0 is argmax (lowest index on ties)."""
    logits = np.asarray(logits, dtype=np.float64)
    if temperature == 0:
        return int(np.argmax(logits))
    if temperature < 0:
        raise GenerationError("temperature must be >= 0")
    z = logits / temperature
    if top_k is not None and 0 < top_k < z.size:
        cut = np.sort(z)[-top_k]
        z = np.where(z >= cut, z, -np.inf)
    p = np.exp(z - z.max())
    p /= p.sum()
    u = rng.random()
    return int(min(np.searchsorted(np.cumsum(p), u, side="right"), z.size - 1))


@dataclass
class GenState:
    """Everything materialized so far, in token form, plus sampling settings.

    ``frames[t]`` is the decoded frame t; ``crops[t]`` are its object crops,
    which feed the patch slots at time t + 1.
    """

    model: POVT
    codec: Codec
    frames: list = field(default_factory=list)
    box_tokens: list = field(default_factory=list)
    z_tokens: list = field(default_factory=list)
    crops: list = field(default_factory=list)
    crop_mask: list = field(default_factory=list)
    forced: dict = field(default_factory=dict)  # (t, k) -> 5 box tokens
    temperature: float = 1.0
    top_k: int | None = None
    rng: np.random.Generator | None = None

    @property
    def t(self) -> int:
        return len(self.frames)

    def materialize(self, frame: np.ndarray, box_tok: np.ndarray, z: np.ndarray) -> None:
        cfg = self.model.cfg
        crops, mask = frame_crops(cfg, frame[None], bx.dequantize_tracks(box_tok)[None])
        self.frames.append(frame)
        self.box_tokens.append(np.asarray(box_tok, dtype=np.int64))
        self.z_tokens.append(np.asarray(z, dtype=np.int64))
        self.crops.append(crops[0])
        self.crop_mask.append(mask[0])

    def _view(self, box_t: np.ndarray, z_t: np.ndarray) -> PreparedVideo:
        """Materialized history with a partially filled row for the current time."""
        cfg = self.model.cfg
        c = np.zeros((cfg.K, cfg.channels, cfg.patch_res, cfg.patch_res))
        return PreparedVideo(
            np.stack(self.box_tokens + [box_t]),
            np.stack(self.z_tokens + [z_t]),
            np.stack(self.crops + [c]),
            np.stack(self.crop_mask + [np.zeros(cfg.K, dtype=bool)]),
        )

    def window(self) -> Window:
        cfg, t = self.model.cfg, self.t
        n_b = min(cfg.W_b, t + 1)
        tau = min(t + 1, cfg.W_o) - n_b
        return Window(tau, t + 1 - n_b - tau, n_b)


def _placeholder_boxes(K: int) -> np.ndarray:
    out = np.full((K, 5), bx.NULL, dtype=np.int64)
    out[:, 0] = 0
    return out


def sample_boxes_step(state: GenState) -> np.ndarray:
    """Boxes for the next frame, slot by slot, each token fed back before the next pass."""
    model, cfg = state.model, state.model.cfg
    t = state.t
    toks = _placeholder_boxes(cfg.K)
    z_blank = np.zeros((cfg.latent_h, cfg.latent_w), dtype=np.int64)
    win = state.window()

    def box_logits():
        inputs = window_inputs(state._view(toks, z_blank), win)
        with nx.no_grad():
            obj_in = model.embed_objects(inputs.box_tokens, inputs.patches, inputs.patch_mask)
            pres, coords = model.box_logits(model.object_pass(obj_in))
        return pres.data[0, -1], coords.data[0, -1]

    for k in range(cfg.K):
        if (t, k) in state.forced:
            toks[k] = state.forced[(t, k)]
            continue
        pres_l, _ = box_logits()
        pres = draw_token(pres_l[k], state.temperature, state.top_k, state.rng)
        toks[k, 0] = pres
        if pres == 0:
            continue
        for j in range(4):
            _, coord_l = box_logits()
            # a present box must get a real bin, never the NULL slot
            toks[k, 1 + j] = draw_token(coord_l[k, j, : bx.NUM_BINS], state.temperature, state.top_k, state.rng)
    return toks


def sample_latents_step(state: GenState, boxes_t: np.ndarray) -> np.ndarray:
    """Latent grid for the next frame in raster order, conditioned on its boxes."""
    model, cfg = state.model, state.model.cfg
    h, w = cfg.latent_h, cfg.latent_w
    z = np.zeros((h, w), dtype=np.int64)
    win = state.window()
    inputs = window_inputs(state._view(boxes_t, z), win)
    with nx.no_grad():
        obj_in = model.embed_objects(inputs.box_tokens, inputs.patches, inputs.patch_mask)
        cache = model.object_pass(obj_in)
        for i in range(h * w):
            r, c = divmod(i, w)
            zt = inputs.z_tokens.copy()
            zt[0, -1] = z
            base_out = model.base_pass(model.embed_latents(zt), cache, win.n_b)
            logits = model.z_logits(base_out, win.n_b).data[0, -1, r, c]
            z[r, c] = draw_token(logits, state.temperature, state.top_k, state.rng)
    return z


def step(state: GenState) -> None:
    boxes_t = sample_boxes_step(state)
    z = sample_latents_step(state, boxes_t)
    frame = state.codec.decode(z)
    state.materialize(frame, boxes_t, z)


def apply_edit(state: GenState, k: int, new_box: bx.BBox, t: int) -> None:
    """Force object k's box at future time t; generation free-runs everything else."""
    if not 0 <= k < state.model.cfg.K:
        raise EditError(f"object slot {k} outside [0, {state.model.cfg.K})")
    if t < state.t:
        raise EditError(f"time {t} is already materialized (next frame is {state.t})")
    if not isinstance(new_box, bx.BBox):
        new_box = bx.BBox.from_array(new_box)
    state.forced[(t, k)] = np.array(bx.quantize_box(new_box), dtype=np.int64)


def start_state(
    model: POVT,
    codec: Codec,
    frames: np.ndarray,
    tracks: np.ndarray,
    seed: int = 0,
    temperature: float = 1.0,
    top_k: int | None = None,
) -> GenState:
    """Teacher-force conditioning frames [n,C,H,W] and tracks [n,K,5] into a fresh state."""
    cfg = model.cfg
    frames = np.asarray(frames, dtype=np.float64)
    tracks = np.asarray(tracks, dtype=np.float64)
    n = len(frames)
    if n < 1 or len(tracks) != n:
        raise GenerationError("need at least one conditioning frame and matching tracks")
    if n > cfg.W_o:
        raise GenerationError(f"{n} conditioning steps exceed the object window W_o={cfg.W_o}")
    if tracks.shape[1:] != (cfg.K, 5):
        raise GenerationError(f"tracks must be [n,{cfg.K},5], got {tracks.shape}")
    state = GenState(model, codec, temperature=temperature, top_k=top_k, rng=np.random.default_rng(seed))
    z = codec.tokens(frames)
    recon = codec.decode(z)
    toks = bx.quantize_tracks(tracks)
    for i in range(n):
        state.materialize(recon[i], toks[i], z[i])
    return state


@dataclass
class Rollout:
    video: VideoSample  # conditioning frames as given, then generated frames
    box_tokens: np.ndarray  # [T, K, 5]
    z_tokens: np.ndarray  # [T, h, w]
    overlays: np.ndarray  # [T, C, H, W] frames with boxes drawn


def generate(
    model: POVT,
    codec: Codec,
    frames: np.ndarray,
    tracks: np.ndarray,
    horizon: int,
    seed: int = 0,
    temperature: float = 1.0,
    top_k: int | None = None,
    edits: list[tuple[int, int, bx.BBox]] | None = None,
) -> Rollout:
    """Condition on (frames, tracks), then generate ``horizon`` more frames.

    ``edits`` holds (time, object slot, box) overrides, applied before the
    frame at that time is generated.
    """
    if horizon < 0:
        raise GenerationError("horizon must be >= 0")
    state = start_state(model, codec, frames, tracks, seed, temperature, top_k)
    for t, k, box in edits or []:
        apply_edit(state, k, box, t)
    for _ in range(horizon):
        step(state)
    return finish(state, frames, tracks)


def finish(state: GenState, frames: np.ndarray, tracks: np.ndarray) -> Rollout:
    n = len(frames)
    toks = np.stack(state.box_tokens)
    out_frames = np.concatenate([np.asarray(frames, dtype=np.float64), np.stack(state.frames[n:])]) if state.t > n else np.asarray(frames, dtype=np.float64)
    out_tracks = np.concatenate([np.asarray(tracks, dtype=np.float64), bx.dequantize_tracks(toks[n:])]) if state.t > n else np.asarray(tracks, dtype=np.float64)
    video = VideoSample(out_frames, out_tracks, {"conditioning": n, "generated": state.t - n})
    return Rollout(video, toks, np.stack(state.z_tokens), draw_overlays(out_frames, out_tracks))


def draw_overlays(frames: np.ndarray, tracks: np.ndarray) -> np.ndarray:
    """Copy of frames [T,C,H,W] with a one-pixel outline per present box, colored by slot."""
    out = np.array(frames, dtype=np.float64, copy=True)
    T, C, H, W = out.shape
    for t in range(T):
        for k, box in enumerate(tracks[t]):
            if box[0] != 1:
                continue
            _, x, y, w, h = box
            c0 = int(np.clip(np.floor((x - w / 2) * W), 0, W - 1))
            c1 = int(np.clip(np.ceil((x + w / 2) * W) - 1, 0, W - 1))
            r0 = int(np.clip(np.floor((y - h / 2) * H), 0, H - 1))
            r1 = int(np.clip(np.ceil((y + h / 2) * H) - 1, 0, H - 1))
            color = PALETTE[k % len(PALETTE)].astype(np.float64) / 255.0
            color = color[:C] if C == 3 else color.mean(keepdims=True)
            out[t, :, r0, c0 : c1 + 1] = color[:, None]
            out[t, :, r1, c0 : c1 + 1] = color[:, None]
            out[t, :, r0 : r1 + 1, c0] = color[:, None]
            out[t, :, r0 : r1 + 1, c1] = color[:, None]
    return out

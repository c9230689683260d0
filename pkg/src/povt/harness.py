"""FLOP accounting, image metrics, and best-of-S evaluation."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import boxes as bx
from .codec import Codec
from .data import VideoSample
from .model import POVT, ModelConfig
from .sample import generate
from .train import evaluate_nll, prepare_video

SCHEMA_VERSION = 1

COMPONENTS = (
    "base_base",
    "base_obj",
    "obj_time",
    "obj_per_t",
    "mlp_base",
    "mlp_obj",
    "heads",
    "embeddings",
    "patch_encoder",
    "box_patch_extraction",
)


class EvalError(ValueError):
    pass


# FLOP accounting. Dense convention: a matmul of (m x n)(n x p) costs 2mnp and
# masked attention pairs are counted like any other.


def matmul_flops(m: int, n: int, p: int) -> int:
    return 2 * m * n * p


def attention_flops(s_q: int, s_k: int, D: int, projections: bool = True) -> int:
    """One attention sub-op: Q/K/V/output projections plus scores and aggregation."""
    core = 2 * matmul_flops(s_q, D, s_k)  # q k^T, then probs v
    if not projections:
        return core
    proj = matmul_flops(s_q, D, D) * 2 + matmul_flops(s_k, D, D) * 2  # q, out on queries; k, v on keys
    return proj + core


@dataclass
class FlopReport:
    mode: str
    frames: int
    components: dict[str, int]
    total: int
    baseline_total: int  # equal-depth single-stream model over the same frames
    ratio: float  # baseline_total / total
    train_multiplier: int = 1
    generation_naive: int = 0  # per generated frame, full recomputation per token
    generation_cached: int = 0  # per generated frame, if keys/values were cached
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        return asdict(self)


def _full_components(cfg: ModelConfig, frames: int) -> dict[str, int]:
    S, D, M = frames * cfg.tokens_per_frame, cfg.D, cfg.mlp
    c = dict.fromkeys(COMPONENTS, 0)
    c["base_base"] = cfg.layers * attention_flops(S, S, D)
    c["mlp_base"] = cfg.layers * (matmul_flops(S, D, M) + matmul_flops(S, M, D))
    c["heads"] = matmul_flops(S, D, cfg.V_z)
    c["embeddings"] = S * D
    return c


def _povt_components(cfg: ModelConfig, frames: int) -> dict[str, int]:
    T = frames
    n_b = min(cfg.W_b, T)
    S_b, D, M, L, K = n_b * cfg.tokens_per_frame, cfg.D, cfg.mlp, cfg.L, cfg.K
    N_o = T * K * L
    active = cfg.active_terms()
    c = dict.fromkeys(COMPONENTS, 0)
    if active["base_base"]:
        c["base_base"] = cfg.layers * attention_flops(S_b, S_b, D)
    if active["base_obj"]:
        c["base_obj"] = cfg.layers * attention_flops(S_b, N_o, D)
    if active["obj_time"]:
        c["obj_time"] = cfg.layers * (K * attention_flops(T * L, T * L, D))
    if active["obj_per_t"]:
        c["obj_per_t"] = cfg.layers * (T * attention_flops(K * L, K * L, D))
    c["mlp_base"] = cfg.layers * (matmul_flops(S_b, D, M) + matmul_flops(S_b, M, D))
    c["mlp_obj"] = cfg.layers * (matmul_flops(N_o, D, M) + matmul_flops(N_o, M, D))
    c["heads"] = (
        matmul_flops(S_b, D, cfg.V_z) + matmul_flops(T * K, D, 2) + 4 * matmul_flops(T * K, D, bx.COORD_VOCAB)
    )
    c["embeddings"] = (S_b + N_o) * D
    crops = max(T - 1, 0) * K  # time 0 uses the pad token
    if not cfg.no_patch_encoding and crops:
        stride = cfg.patch_res // cfg.obj_rep
        conv = matmul_flops(cfg.P, cfg.channels * stride * stride, cfg.D_obj)
        c["patch_encoder"] = crops * (conv + matmul_flops(cfg.P, cfg.D_obj, D))
        if not cfg.fixed_grid_patches:
            # bilinear resampling: 4 taps, a multiply and an add each, per output value
            c["box_patch_extraction"] = crops * 8 * cfg.channels * cfg.patch_res**2
    return c


def count_flops(cfg: ModelConfig, mode: str = "povt", frames: int | None = None, train: bool = False) -> FlopReport:
    """Forward FLOPs of one window spanning ``frames`` timesteps.

    ``povt`` models the two-stream network with the object window stretched
    to the span; ``full`` models one stream over every latent of the span.
    ``train`` multiplies by 3 as a forward+backward estimate.
    """
    frames = cfg.W_o if frames is None else frames
    if frames < 1:
        raise ValueError("frames must be >= 1")
    if mode not in ("povt", "full"):
        raise ValueError(f"unknown mode {mode!r}")
    mult = 3 if train else 1
    comps = _povt_components(cfg, frames) if mode == "povt" else _full_components(cfg, frames)
    comps = {k: v * mult for k, v in comps.items()}
    base = {k: v * mult for k, v in _full_components(cfg, frames).items()}
    total, base_total = sum(comps.values()), sum(base.values())
    per_frame_tokens = cfg.tokens_per_frame + (5 * cfg.K if mode == "povt" else 0)
    fwd = total // mult
    return FlopReport(
        mode=mode,
        frames=frames,
        components=comps,
        total=total,
        baseline_total=base_total,
        ratio=base_total / total if total else math.inf,
        train_multiplier=mult,
        generation_naive=fwd * per_frame_tokens,
        generation_cached=fwd,
    )


# image metrics


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for values in [0, 1]; identical inputs give +inf."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    return math.inf if mse == 0 else 10.0 * math.log10(1.0 / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def _filter_valid(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    views = np.lib.stride_tricks.sliding_window_view(img, win.shape, axis=(-2, -1))
    return np.einsum("...ijkl,kl->...ij", views, win)


def ssim(a: np.ndarray, b: np.ndarray, size: int = 11, sigma: float = 1.5) -> float:
    """Mean local SSIM over valid windows and channels; inputs [..., H, W] in [0, 1]."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim < 2 or min(a.shape[-2:]) < size:
        raise ValueError(f"frames smaller than the {size}x{size} window")
    c1, c2 = 0.01**2, 0.03**2
    w = gaussian_window(size, sigma)
    mu_a, mu_b = _filter_valid(a, w), _filter_valid(b, w)
    var_a = _filter_valid(a * a, w) - mu_a**2
    var_b = _filter_valid(b * b, w) - mu_b**2
    cov = _filter_valid(a * b, w) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


# best-of-S evaluation


@dataclass
class EvalReport:
    psnr: float
    ssim: float
    nll: float
    samples: int
    videos: int
    best_psnr_index: list[int] = field(default_factory=list)
    best_ssim_index: list[int] = field(default_factory=list)
    per_video: list[dict] = field(default_factory=list)
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        d = asdict(self)
        return _json_safe(d)


def _json_safe(x):
    if isinstance(x, float) and math.isinf(x):
        return "inf" if x > 0 else "-inf"
    if isinstance(x, dict):
        return {k: _json_safe(v) for k, v in x.items()}
    if isinstance(x, list):
        return [_json_safe(v) for v in x]
    return x


def evaluate_best_of_S(
    model: POVT,
    codec: Codec,
    videos: list[VideoSample],
    S: int = 10,
    cond_frames: int = 1,
    seed: int = 0,
    temperature: float = 1.0,
    top_k: int | None = None,
) -> EvalReport:
    """For each video, S seeded rollouts from its first frames; keep the best per metric.

    Rollout s of every video uses seed (seed, video index, s), so a larger S
    only adds rollouts.  NLL is the teacher-forced likelihood of the real
    video and does not depend on the rollouts.
    """
    if S < 1:
        raise EvalError("S must be >= 1")
    if not videos:
        raise EvalError("empty test set")
    rows = []
    for vi, v in enumerate(videos):
        horizon = v.length - cond_frames
        if horizon < 1:
            raise EvalError(f"video {vi} has no frames after the conditioning")
        truth = v.frames[cond_frames:]
        scores = []
        for s in range(S):
            rs = int(np.random.SeedSequence([seed, vi, s]).generate_state(1)[0])
            r = generate(model, codec, v.frames[:cond_frames], v.tracks[:cond_frames], horizon, rs, temperature, top_k)
            gen = r.video.frames[cond_frames:]
            scores.append((psnr(gen, truth), ssim(gen, truth)))
        p = [sc[0] for sc in scores]
        q = [sc[1] for sc in scores]
        nll = evaluate_nll(model, [prepare_video(v, codec, model.cfg)], first=cond_frames)
        rows.append(
            {
                "psnr": max(p),
                "ssim": max(q),
                "nll": nll,
                "best_psnr_index": int(np.argmax(p)),
                "best_ssim_index": int(np.argmax(q)),
            }
        )
    return EvalReport(
        psnr=float(np.mean([r["psnr"] for r in rows])),
        ssim=float(np.mean([r["ssim"] for r in rows])),
        nll=float(np.mean([r["nll"] for r in rows])),
        samples=S,
        videos=len(videos),
        best_psnr_index=[r["best_psnr_index"] for r in rows],
        best_ssim_index=[r["best_ssim_index"] for r in rows],
        per_video=rows,
    )

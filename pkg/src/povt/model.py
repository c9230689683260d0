"""Two-stream object-centric transformer over box tokens and VQ latents.

Object stream: ``[T, K, L, D]`` with L = P patch slots followed by the five
box slots (pres, x, y, w, h).  Patch slots at stream time t encode frame
t-1; at t = 0 they hold a learned pad token.  Box slots hold the embedded
box token values, zeroed when the object is absent.  The box logits for
token j of object k at time t are read from the slot just before it (the
last patch slot predicts pres, the pres slot predicts x, ...), so with
non-strict causal masks each prediction only sees earlier tokens.

Base stream: the latent grids of the last ``n_b`` object timesteps in
timestep-major raster order, right-shifted behind a learned start token.
Base position (j, i) cross-attends only to the object tokens of the
aligned object timestep.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import boxes as bx
from . import numerics as nx
from .numerics import Tensor

ATTN_TERMS = ("base_base", "base_obj", "obj_time", "obj_per_t")
BOX_KINDS = ("pres", "x", "y", "w", "h")


class ModelConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    W_b: int = 1  # base-stream (full-frame) timesteps
    W_o: int = 8  # object-stream timesteps
    K: int = 4
    obj_rep: int = 1  # patch tokens per object = obj_rep ** 2
    patch_res: int = 8
    channels: int = 3
    frame_size: int = 32
    latent_h: int = 8
    latent_w: int = 8
    V_z: int = 128
    layers: int = 4
    heads: int = 4
    D: int = 128
    mlp: int = 512
    D_obj: int = 128
    dropout: float = 0.2
    attn_dropout: float = 0.3
    shared_attention: bool = True
    no_patch_encoding: bool = False
    fixed_grid_patches: bool = False
    drop_base_base: bool = False
    drop_base_obj: bool = False
    drop_obj_time: bool = False
    drop_obj_per_t: bool = False
    init_std: float = 0.02

    def __post_init__(self):
        if not (self.W_o >= self.W_b >= 1):
            raise ModelConfigError("need W_o >= W_b >= 1")
        if self.D % self.heads:
            raise ModelConfigError("embedding size must divide into heads")
        if self.patch_res % self.obj_rep:
            raise ModelConfigError("patch_res must be a multiple of obj_rep")
        if self.K < 0:
            raise ModelConfigError("K must be >= 0")

    @property
    def P(self) -> int:
        return self.obj_rep**2

    @property
    def L(self) -> int:
        return self.P + bx.TOKENS_PER_BOX

    @property
    def tokens_per_frame(self) -> int:
        return self.latent_h * self.latent_w

    def active_terms(self) -> dict[str, bool]:
        return {
            "base_base": not self.drop_base_base,
            "base_obj": not self.drop_base_obj and self.K > 0,
            "obj_time": not self.drop_obj_time and self.K > 0,
            "obj_per_t": not self.drop_obj_per_t and self.K > 0,
        }

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ModelConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def paper_scale(cls, **overrides) -> ModelConfig:
        base = dict(
            W_b=1, W_o=8, K=10, frame_size=64, latent_h=16, latent_w=16, V_z=1024,
            layers=8, heads=4, D=512, mlp=2048, D_obj=128,
        )
        base.update(overrides)
        return cls(**base)


@dataclass
class AttnMasks:
    """Boolean allow-matrices (query rows, key columns) for one window shape."""

    base_base: np.ndarray  # [S_b, S_b]
    base_obj: np.ndarray  # [S_b, T*K*L]
    obj_time: np.ndarray  # [T*L, T*L], shared by every object
    obj_per_t: np.ndarray  # [K*L, K*L], shared by every timestep
    T: int = 0
    n_b: int = 0


def build_masks(cfg: ModelConfig, T: int | None = None, n_b: int | None = None) -> AttnMasks:
    T = cfg.W_o if T is None else T
    n_b = cfg.W_b if n_b is None else n_b
    if not 1 <= n_b <= T:
        raise ModelConfigError(f"window needs 1 <= n_b <= T, got n_b={n_b}, T={T}")
    hw = cfg.tokens_per_frame
    S_b = n_b * hw
    K, L = cfg.K, cfg.L
    base_time = np.repeat(np.arange(n_b), hw)
    obj_time = np.repeat(np.arange(T), K * L)
    return AttnMasks(
        base_base=np.tril(np.ones((S_b, S_b), dtype=bool)),
        base_obj=(obj_time[None, :] == (T - n_b + base_time)[:, None]),
        obj_time=np.tril(np.ones((T * L, T * L), dtype=bool)),
        obj_per_t=np.tril(np.ones((K * L, K * L), dtype=bool)),
        T=T,
        n_b=n_b,
    )


@dataclass
class PriorInputs:
    """One tokenized window (leading batch axis B)."""

    box_tokens: np.ndarray  # [B, T, K, 5] int, NULL for absent coordinates
    patches: np.ndarray  # [B, T, K, C, r, r]; stream time t holds frame t-1 crops
    patch_mask: np.ndarray  # [B, T, K] bool; False -> zero patch token
    z_tokens: np.ndarray  # [B, n_b, h, w] int

    @property
    def T(self) -> int:
        return self.box_tokens.shape[1]

    @property
    def n_b(self) -> int:
        return self.z_tokens.shape[1]


@dataclass
class PriorOutputs:
    pres_logits: Tensor  # [B, T, K, 2]
    coord_logits: Tensor  # [B, T, K, 4, 65]
    z_logits: Tensor | None  # [B, n_b, h, w, V_z]


@dataclass
class ObjectCache:
    """Per-layer key/value projections of the object stream, reused by base passes."""

    kv: list = field(default_factory=list)
    obj_out: Tensor | None = None
    T: int = 0


def frame_crops(cfg: ModelConfig, frames: np.ndarray, boxes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Crops of each frame at its own boxes: [T,C,H,W], [T,K,5] -> ([T,K,C,r,r], mask [T,K])."""
    T, K, r = boxes.shape[0], cfg.K, cfg.patch_res
    if cfg.no_patch_encoding or K == 0:
        return np.zeros((T, K, cfg.channels, r, r)), np.zeros((T, K), dtype=bool)
    if cfg.fixed_grid_patches:
        boxes = np.broadcast_to(bx.grid_boxes(K), (T, K, 5))
    return bx.extract_patches(frames, boxes, r)


def shift_crops(crops: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Move per-frame crops one step later so stream time t sees frame t-1; time 0 gets the pad."""
    patches = np.zeros_like(crops)
    keep = np.zeros_like(mask)
    patches[1:], keep[1:] = crops[:-1], mask[:-1]
    return patches, keep


def window_patches(cfg: ModelConfig, prev_frames: np.ndarray, prev_boxes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Patch crops for one window.

    prev_frames [T, C, H, W] and prev_boxes [T, K, 5] hold frame t-1 and its
    boxes for stream time t (entry 0 is ignored).  Returns ([T,K,C,r,r], mask [T,K]).
    """
    T = prev_boxes.shape[0]
    patches = np.zeros((T, cfg.K, cfg.channels, cfg.patch_res, cfg.patch_res))
    mask = np.zeros((T, cfg.K), dtype=bool)
    if T > 1:
        patches[1:], mask[1:] = frame_crops(cfg, prev_frames[1:], prev_boxes[1:])
    return patches, mask


class POVT:
    def __init__(self, cfg: ModelConfig | None = None, params: dict[str, Tensor] | None = None, seed: int = 0):
        self.cfg = cfg or ModelConfig()
        self.params = params if params is not None else init_params(self.cfg, seed)

    # embedding

    def embed_objects(self, box_tokens: np.ndarray, patches: np.ndarray, patch_mask: np.ndarray) -> Tensor:
        """[B,T,K,5] tokens + patches -> object stream input [B,T,K,L,D] (no positions)."""
        cfg, p = self.cfg, self.params
        box_tokens = np.asarray(box_tokens, dtype=np.int64)
        B, T, K, _ = box_tokens.shape
        if K != cfg.K:
            raise ModelConfigError(f"got {K} object slots, model has K={cfg.K}")
        if T > cfg.W_o:
            raise ModelConfigError(f"object window {T} exceeds W_o={cfg.W_o}")
        pres = box_tokens[..., 0]
        if np.any((pres < 0) | (pres > 1)):
            raise IndexError("pres token outside {0, 1}")
        coords = box_tokens[..., 1:]
        if np.any((coords < 0) | (coords > bx.NULL)):
            raise IndexError(f"coordinate token outside [0, {bx.NULL}]")
        present = (pres == 1).astype(np.float64)[..., None, None]  # [B,T,K,1,1]
        toks = [nx.embedding(p["embed.pres"], pres)]
        for j, kind in enumerate(BOX_KINDS[1:]):
            toks.append(nx.embedding(p[f"embed.{kind}"], coords[..., j]))
        box = nx.stack(toks, axis=3) * present  # [B,T,K,5,D]
        patch_tok = self._patch_tokens(patches, patch_mask, B, T, K)
        return nx.concat([patch_tok, box], axis=3)

    def _patch_tokens(self, patches, patch_mask, B, T, K) -> Tensor:
        cfg, p = self.cfg, self.params
        P, D = cfg.P, cfg.D
        if cfg.no_patch_encoding:
            return Tensor(np.zeros((B, T, K, P, D)))
        pad = nx.reshape(p["patch.pad"], (1, 1, 1, P, D)) * np.ones((B, 1, K, 1, 1))
        if T == 1 or K == 0:
            return pad if T == 1 else nx.concat([pad, Tensor(np.zeros((B, T - 1, K, P, D)))], axis=1)
        crops = np.asarray(patches)[:, 1:].reshape((-1, cfg.channels, cfg.patch_res, cfg.patch_res))
        stride = cfg.patch_res // cfg.obj_rep
        tok = bx.encode_patch(Tensor(crops), p["patch.w"], p["patch.b"], stride)  # [N,P,D_obj]
        tok = tok @ p["patch.proj"] + p["patch.proj_b"]
        keep = np.asarray(patch_mask)[:, 1:].astype(np.float64).reshape(-1, 1, 1)
        tok = (tok * keep).reshape(B, T - 1, K, P, D)
        return nx.concat([pad, tok], axis=1)

    def embed_latents(self, z_tokens: np.ndarray) -> Tensor:
        """[B,n_b,h,w] -> right-shifted base input [B,S_b,D] (no positions)."""
        p = self.params
        z = np.asarray(z_tokens, dtype=np.int64)
        B = z.shape[0]
        flat = z.reshape(B, -1)
        if np.any((flat < 0) | (flat >= self.cfg.V_z)):
            raise IndexError(f"latent token outside [0, {self.cfg.V_z})")
        start = nx.reshape(p["embed.start"], (1, 1, -1)) * np.ones((B, 1, 1))
        if flat.shape[1] == 1:
            return start
        return nx.concat([start, nx.embedding(p["embed.z"], flat[:, :-1])], axis=1)

    # positional embeddings

    def _obj_positions(self, T: int) -> Tensor:
        p = self.params
        t = nx.reshape(p["pos.obj_time"][:T], (T, 1, 1, self.cfg.D))
        s = nx.reshape(p["pos.obj_slot"], (1, 1, self.cfg.L, self.cfg.D))
        return t + s

    def _base_positions(self, n_b: int) -> Tensor:
        p, c = self.params, self.cfg
        t = nx.reshape(p["pos.base_time"][:n_b], (n_b, 1, 1, c.D))
        r = nx.reshape(p["pos.base_row"], (1, c.latent_h, 1, c.D))
        w = nx.reshape(p["pos.base_col"], (1, 1, c.latent_w, c.D))
        return nx.reshape(t + r + w, (n_b * c.tokens_per_frame, c.D))

    # attention helpers

    def _attn_prefix(self, layer: int, term: str) -> str:
        return f"blk{layer}.attn" if self.cfg.shared_attention else f"blk{layer}.attn_{term}"

    def _project(self, h: Tensor, prefix: str, which: str) -> Tensor:
        """Linear projection to heads: [..., S, D] -> [..., S, H, dh]."""
        p, c = self.params, self.cfg
        out = h @ p[f"{prefix}.w{which}"] + p[f"{prefix}.b{which}"]
        return out.reshape(h.shape[:-1] + (c.heads, c.D // c.heads))

    def _attend(self, q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray, training: bool, rng) -> Tensor:
        """q [..., H, Sq, dh], k/v [..., H, Sk, dh] -> [..., H, Sq, dh]."""
        dh = q.shape[-1]
        scores = (q @ nx.transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))) * (1.0 / math.sqrt(dh))
        probs = nx.softmax(scores, axis=-1, mask=mask)
        probs = nx.dropout(probs, self.cfg.attn_dropout, rng, training)
        return probs @ v

    def _merge(self, heads_out: Tensor, prefix: str) -> Tensor:
        """[..., S, H, dh] -> output projection [..., S, D]."""
        p = self.params
        flat = heads_out.reshape(heads_out.shape[:-2] + (self.cfg.D,))
        return flat @ p[f"{prefix}.wo"] + p[f"{prefix}.bo"]

    def _mlp(self, x: Tensor, prefix: str, training: bool, rng) -> Tensor:
        p = self.params
        h = nx.gelu(x @ p[f"{prefix}.w1"] + p[f"{prefix}.b1"])
        return nx.dropout(h @ p[f"{prefix}.w2"] + p[f"{prefix}.b2"], self.cfg.dropout, rng, training)

    def _ln(self, x: Tensor, name: str) -> Tensor:
        return nx.layer_norm(x, self.params[f"{name}.g"], self.params[f"{name}.b"])

    # streams

    def object_pass(self, obj_in: Tensor, training: bool = False, rng=None) -> ObjectCache:
        """Run the object stream through every block. obj_in [B,T,K,L,D] (no positions)."""
        cfg = self.cfg
        B, T, K, L, D = obj_in.shape
        H, dh = cfg.heads, D // cfg.heads
        masks = build_masks(cfg, T, 1)
        active = cfg.active_terms()
        x = obj_in + self._obj_positions(T)
        cache = ObjectCache(T=T)
        for i in range(cfg.layers):
            h = self._ln(x, f"blk{i}.ln_o1")
            terms = []
            kv = None
            if active["base_obj"]:
                pre = self._attn_prefix(i, "base_obj")
                k6 = self._project(h, pre, "k")  # [B,T,K,L,H,dh]
                v6 = self._project(h, pre, "v")
                kv = tuple(nx.transpose(t6, (0, 4, 1, 2, 3, 5)).reshape(B, H, T * K * L, dh) for t6 in (k6, v6))
            cache.kv.append(kv)
            if active["obj_time"]:
                pre = self._attn_prefix(i, "obj_time")
                q, k, v = (
                    nx.transpose(self._project(h, pre, w), (0, 2, 4, 1, 3, 5)).reshape(B, K, H, T * L, dh)
                    for w in "qkv"
                )
                a = self._attend(q, k, v, masks.obj_time, training, rng)  # [B,K,H,T*L,dh]
                a = nx.transpose(a.reshape(B, K, H, T, L, dh), (0, 3, 1, 4, 2, 5))
                terms.append(self._merge(a, pre))
            if active["obj_per_t"]:
                pre = self._attn_prefix(i, "obj_per_t")
                q, k, v = (
                    nx.transpose(self._project(h, pre, w), (0, 1, 4, 2, 3, 5)).reshape(B, T, H, K * L, dh)
                    for w in "qkv"
                )
                a = self._attend(q, k, v, masks.obj_per_t, training, rng)  # [B,T,H,K*L,dh]
                a = nx.transpose(a.reshape(B, T, H, K, L, dh), (0, 1, 3, 4, 2, 5))
                terms.append(self._merge(a, pre))
            if terms:
                mix = terms[0] if len(terms) == 1 else (terms[0] + terms[1]) * 0.5
                x = x + nx.dropout(mix, cfg.dropout, rng, training)
            x = x + self._mlp(self._ln(x, f"blk{i}.ln_o2"), f"blk{i}.mlp_o", training, rng)
        cache.obj_out = self._ln(x, "final.ln_o")
        return cache

    def base_pass(self, base_in: Tensor, cache: ObjectCache, n_b: int, training: bool = False, rng=None) -> Tensor:
        """Run the base stream given the object cache. base_in [B,S_b,D] -> final hidden [B,S_b,D]."""
        cfg = self.cfg
        B, S_b, D = base_in.shape
        hw = cfg.tokens_per_frame
        if S_b != n_b * hw:
            raise nx.DimensionError(f"base stream of {S_b} tokens is not {n_b} frames")
        masks = build_masks(cfg, cache.T, n_b)
        active = cfg.active_terms()
        x = base_in + self._base_positions(n_b)
        for i in range(cfg.layers):
            h = self._ln(x, f"blk{i}.ln_b1")
            terms = []
            if active["base_base"]:
                pre = self._attn_prefix(i, "base_base")
                q, k, v = (nx.transpose(self._project(h, pre, w), (0, 2, 1, 3)) for w in "qkv")
                a = self._attend(q, k, v, masks.base_base, training, rng)
                terms.append(self._merge(nx.transpose(a, (0, 2, 1, 3)), pre))
            if active["base_obj"]:
                pre = self._attn_prefix(i, "base_obj")
                q = nx.transpose(self._project(h, pre, "q"), (0, 2, 1, 3))
                k, v = cache.kv[i]
                a = self._attend(q, k, v, masks.base_obj, training, rng)
                terms.append(self._merge(nx.transpose(a, (0, 2, 1, 3)), pre))
            if terms:
                mix = terms[0] if len(terms) == 1 else (terms[0] + terms[1]) * 0.5
                x = x + nx.dropout(mix, cfg.dropout, rng, training)
            x = x + self._mlp(self._ln(x, f"blk{i}.ln_b2"), f"blk{i}.mlp_b", training, rng)
        return self._ln(x, "final.ln_b")

    # heads

    def box_logits(self, cache: ObjectCache) -> tuple[Tensor, Tensor]:
        p, P = self.params, self.cfg.P
        out = cache.obj_out  # [B,T,K,L,D]
        pres = out[:, :, :, P - 1] @ p["head.pres.w"] + p["head.pres.b"]
        coords = [out[:, :, :, P + j] @ p[f"head.{kind}.w"] + p[f"head.{kind}.b"] for j, kind in enumerate(BOX_KINDS[1:])]
        return pres, nx.stack(coords, axis=3)

    def z_logits(self, base_out: Tensor, n_b: int) -> Tensor:
        p, c = self.params, self.cfg
        logits = base_out @ p["head.z.w"] + p["head.z.b"]
        return logits.reshape(base_out.shape[0], n_b, c.latent_h, c.latent_w, c.V_z)

    # full passes

    def forward_embedded(self, obj_in: Tensor, base_in: Tensor | None, n_b: int, training: bool = False, rng=None) -> PriorOutputs:
        cache = self.object_pass(obj_in, training, rng)
        pres, coords = self.box_logits(cache)
        z = None
        if base_in is not None:
            z = self.z_logits(self.base_pass(base_in, cache, n_b, training, rng), n_b)
        return PriorOutputs(pres, coords, z)

    def embed(self, inputs: PriorInputs) -> tuple[Tensor, Tensor]:
        return (
            self.embed_objects(inputs.box_tokens, inputs.patches, inputs.patch_mask),
            self.embed_latents(inputs.z_tokens),
        )

    def forward(self, inputs: PriorInputs, training: bool = False, rng=None) -> PriorOutputs:
        obj_in, base_in = self.embed(inputs)
        return self.forward_embedded(obj_in, base_in, inputs.n_b, training, rng)

    def num_parameters(self) -> int:
        return parameter_count(self.cfg)


def _param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    D, P, L = cfg.D, cfg.P, cfg.L
    s: dict[str, tuple[int, ...]] = {
        "embed.z": (cfg.V_z, D),
        "embed.start": (D,),
        "embed.pres": (2, D),
        "patch.pad": (P, D),
        "pos.obj_time": (cfg.W_o, D),
        "pos.obj_slot": (L, D),
        "pos.base_time": (cfg.W_b, D),
        "pos.base_row": (cfg.latent_h, D),
        "pos.base_col": (cfg.latent_w, D),
    }
    for kind in BOX_KINDS[1:]:
        s[f"embed.{kind}"] = (bx.COORD_VOCAB, D)
    if not cfg.no_patch_encoding:
        stride = cfg.patch_res // cfg.obj_rep
        s["patch.w"] = (cfg.D_obj, cfg.channels, stride, stride)
        s["patch.b"] = (cfg.D_obj,)
        s["patch.proj"] = (cfg.D_obj, D)
        s["patch.proj_b"] = (D,)
    for i in range(cfg.layers):
        prefixes = [f"blk{i}.attn"] if cfg.shared_attention else [f"blk{i}.attn_{t}" for t in ATTN_TERMS]
        for pre in prefixes:
            for w in "qkvo":
                s[f"{pre}.w{w}"] = (D, D)
                s[f"{pre}.b{w}"] = (D,)
        for ln in ("ln_b1", "ln_b2", "ln_o1", "ln_o2"):
            s[f"blk{i}.{ln}.g"] = (D,)
            s[f"blk{i}.{ln}.b"] = (D,)
        for m in ("mlp_b", "mlp_o"):
            s[f"blk{i}.{m}.w1"] = (D, cfg.mlp)
            s[f"blk{i}.{m}.b1"] = (cfg.mlp,)
            s[f"blk{i}.{m}.w2"] = (cfg.mlp, D)
            s[f"blk{i}.{m}.b2"] = (D,)
    for ln in ("final.ln_b", "final.ln_o"):
        s[f"{ln}.g"] = (D,)
        s[f"{ln}.b"] = (D,)
    s["head.pres.w"], s["head.pres.b"] = (D, 2), (2,)
    for kind in BOX_KINDS[1:]:
        s[f"head.{kind}.w"], s[f"head.{kind}.b"] = (D, bx.COORD_VOCAB), (bx.COORD_VOCAB,)
    s["head.z.w"], s["head.z.b"] = (D, cfg.V_z), (cfg.V_z,)
    return s


def parameter_count(cfg: ModelConfig) -> int:
    return int(sum(np.prod(v) for v in _param_shapes(cfg).values()))


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    out = {}
    for name, shape in _param_shapes(cfg).items():
        if name.endswith(".g"):
            arr = np.ones(shape)
        elif len(shape) == 1 and name != "embed.start":
            arr = np.zeros(shape)
        elif name == "patch.w":
            arr = rng.standard_normal(shape) * math.sqrt(1.0 / np.prod(shape[1:]))
        else:
            arr = rng.standard_normal(shape) * cfg.init_std
        out[name] = nx.parameter(arr, name=name)
    return out


def load_params(cfg: ModelConfig, tensors: dict[str, np.ndarray], prefix: str = "prior.") -> dict[str, Tensor]:
    params = {}
    for name, shape in _param_shapes(cfg).items():
        arr = tensors.get(prefix + name)
        if arr is None or tuple(arr.shape) != shape:
            raise ModelConfigError(f"checkpoint tensor {prefix + name} missing or mis-shaped")
        params[name] = nx.parameter(arr, name=name)
    return params

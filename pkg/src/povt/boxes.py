"""Bounding boxes: 64-bin quantization, tokens, and patch extraction.

Boxes are (pres, x, y, w, h) with (x, y) the box center and (w, h) its
extent, all normalized to [0, 1].  A track array has shape [T, K, 5]; its
token form has the same shape with integer bins and ``NULL`` for the
coordinates of absent objects.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx

NUM_BINS = 64
NULL = NUM_BINS  # reserved 65th slot of each coordinate vocabulary
COORD_VOCAB = NUM_BINS + 1
TOKENS_PER_BOX = 5


class BoxError(ValueError):
    pass


@dataclass(frozen=True)
class BBox:
    pres: int
    x: float = 0.0
    y: float = 0.0
    w: float = 0.0
    h: float = 0.0

    def __post_init__(self):
        if self.pres not in (0, 1):
            raise BoxError(f"pres must be 0 or 1, got {self.pres}")
        if self.pres == 0:
            # absent boxes carry no geometry
            for f in ("x", "y", "w", "h"):
                object.__setattr__(self, f, 0.0)
        else:
            for f in ("x", "y", "w", "h"):
                v = getattr(self, f)
                if not 0.0 <= v <= 1.0:
                    raise BoxError(f"{f}={v} outside [0, 1]")

    def as_array(self) -> np.ndarray:
        return np.array([self.pres, self.x, self.y, self.w, self.h], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> BBox:
        return cls(int(a[0]), *(float(v) for v in a[1:5]))


def quantize_coord(v):
    v = np.asarray(v, dtype=np.float64)
    if np.any(~np.isfinite(v)) or np.any((v < 0.0) | (v > 1.0)):
        raise BoxError("coordinate outside [0, 1]")
    return np.minimum(np.floor(v * NUM_BINS), NUM_BINS - 1).astype(np.int64)


def dequantize_coord(b):
    return (np.asarray(b, dtype=np.float64) + 0.5) / NUM_BINS


def quantize_box(b: BBox) -> tuple[int, int, int, int, int]:
    if b.pres == 0:
        return (0, NULL, NULL, NULL, NULL)
    return (1, *(int(q) for q in quantize_coord([b.x, b.y, b.w, b.h])))


def dequantize_box(q) -> BBox:
    pres = int(q[0])
    coords = [int(c) for c in q[1:5]]
    if pres == 0:
        return BBox(0)
    if pres != 1:
        raise BoxError(f"pres token must be 0 or 1, got {pres}")
    if any(c == NULL for c in coords):
        raise BoxError("present box with NULL coordinate token")
    if any(not 0 <= c < NUM_BINS for c in coords):
        raise BoxError(f"coordinate token outside [0, {NUM_BINS})")
    return BBox(1, *(float(v) for v in dequantize_coord(coords)))


def quantize_tracks(tracks: np.ndarray) -> np.ndarray:
    """[..., 5] float boxes -> [..., 5] int tokens."""
    tracks = np.asarray(tracks, dtype=np.float64)
    pres = tracks[..., 0]
    if np.any((pres != 0) & (pres != 1)):
        raise BoxError("pres must be 0 or 1")
    present = pres == 1
    coords = np.where(present[..., None], tracks[..., 1:], 0.0)
    q = quantize_coord(coords)
    q = np.where(present[..., None], q, NULL)
    return np.concatenate([pres.astype(np.int64)[..., None], q], axis=-1)


def dequantize_tracks(tokens: np.ndarray) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    present = tokens[..., 0] == 1
    coords = tokens[..., 1:]
    if np.any(present[..., None] & (coords == NULL)):
        raise BoxError("present box with NULL coordinate token")
    out = np.where(present[..., None], dequantize_coord(np.where(coords == NULL, 0, coords)), 0.0)
    return np.concatenate([present.astype(np.float64)[..., None], out], axis=-1)


def is_degenerate(box) -> bool:
    """True when the box is absent or an extent falls in bin 0 (< 1/64)."""
    box = np.asarray(box, dtype=np.float64)
    return bool(box[0] != 1 or box[3] < 1.0 / NUM_BINS or box[4] < 1.0 / NUM_BINS)


def _bilinear(img: np.ndarray, py: np.ndarray, px: np.ndarray) -> np.ndarray:
    """Sample img [C,H,W] at pixel-space coords (centers at integers), zero outside."""
    C, H, W = img.shape
    y0 = np.floor(py).astype(np.int64)
    x0 = np.floor(px).astype(np.int64)
    fy, fx = py - y0, px - x0
    out = np.zeros((C,) + py.shape)
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            yy, xx = y0 + dy, x0 + dx
            inside = (yy >= 0) & (yy < H) & (xx >= 0) & (xx < W)
            vals = img[:, np.clip(yy, 0, H - 1), np.clip(xx, 0, W - 1)]
            out += vals * (wy * wx * inside)
    return out


def sampling_grid(box, out_res: int, H: int, W: int) -> tuple[np.ndarray, np.ndarray]:
    """Pixel-space sample positions for an out_res x out_res crop of ``box``."""
    _, x, y, w, h = (float(v) for v in box)
    u = (np.arange(out_res) + 0.5) / out_res
    px = (x - w / 2 + u * w) * W - 0.5
    py = (y - h / 2 + u * h) * H - 0.5
    return np.meshgrid(py, px, indexing="ij")


def extract_patch(frame: np.ndarray, box, out_res: int = 8) -> np.ndarray:
    """Bilinear crop-resample of ``box`` from frame [C,H,W] to [C,out_res,out_res].

    Absent and degenerate boxes give an all-zero patch.
    """
    if out_res < 1:
        raise BoxError("out_res must be >= 1")
    frame = np.asarray(frame, dtype=np.float64)
    C, H, W = frame.shape
    box = box.as_array() if isinstance(box, BBox) else np.asarray(box, dtype=np.float64)
    if is_degenerate(box):
        return np.zeros((C, out_res, out_res))
    py, px = sampling_grid(box, out_res, H, W)
    return _bilinear(frame, py, px)


def extract_patches(frames: np.ndarray, boxes: np.ndarray, out_res: int = 8) -> tuple[np.ndarray, np.ndarray]:
    """Patches for every (t, k): frames [T,C,H,W], boxes [T,K,5] -> ([T,K,C,r,r], valid [T,K])."""
    T, C, _, _ = frames.shape
    K = boxes.shape[1]
    out = np.zeros((T, K, C, out_res, out_res))
    valid = np.zeros((T, K), dtype=bool)
    for t in range(T):
        for k in range(K):
            if not is_degenerate(boxes[t, k]):
                valid[t, k] = True
                out[t, k] = extract_patch(frames[t], boxes[t, k], out_res)
    return out, valid


def grid_boxes(K: int) -> np.ndarray:
    """K boxes tiling a static uniform grid (row-major), used by the fixed-grid ablation."""
    g = int(np.ceil(np.sqrt(max(K, 1))))
    boxes = np.zeros((K, 5))
    for k in range(K):
        r, c = divmod(k, g)
        boxes[k] = (1.0, (c + 0.5) / g, (r + 0.5) / g, 1.0 / g, 1.0 / g)
    return boxes


def encode_patch(patches: nx.Tensor, weight: nx.Tensor, bias: nx.Tensor, stride: int) -> nx.Tensor:
    """Strided conv tokenizer: [N,C,r,r] -> [N,P,D_obj] with P = (r/stride)^2."""
    feat = nx.conv2d(patches, weight, bias, stride=stride, pad=0)
    N, D, gh, gw = feat.shape
    return nx.transpose(feat, (0, 2, 3, 1)).reshape(N, gh * gw, D)

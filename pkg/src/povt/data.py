"""Synthetic bouncing-object videos with box tracks, and their file format."""

from __future__ import annotations

import io
import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

AREA_THRESHOLD = 5
FORMAT_VERSION = 1
MAGIC = b"POVTDATA"

PALETTE = np.array(
    [
        [230, 60, 50],
        [60, 200, 80],
        [70, 110, 240],
        [240, 210, 60],
        [200, 80, 220],
        [60, 220, 220],
        [250, 150, 40],
        [240, 240, 240],
    ],
    dtype=np.uint8,
)
BACKGROUND = np.array([24, 24, 32], dtype=np.uint8)


class ConfigError(ValueError):
    pass


class DatasetError(IOError):
    def __init__(self, msg: str, offset: int | None = None):
        super().__init__(msg if offset is None else f"{msg} (at byte offset {offset})")
        self.offset = offset


@dataclass
class ObjectSpec:
    shape: str  # "square" | "disc"
    radius: float  # half extent in pixels
    color: tuple[int, int, int]
    pos: tuple[float, float]  # (row, col) center in pixels
    vel: tuple[float, float]  # pixels per frame


@dataclass
class BounceOptions:
    size: int = 32
    channels: int = 3
    k_max: int = 4
    min_radius: float = 3.0
    max_radius: float = 6.0
    min_speed: float = 0.5
    max_speed: float = 2.0
    # walls sit this many pixels beyond each frame edge; > 2*radius lets objects leave
    exit_margin: float = 0.0
    bg_drift: bool = False
    drift_speed: float = 1.0
    objects: list[ObjectSpec] | None = None


@dataclass
class VideoSample:
    frames: np.ndarray  # [T, C, H, W] in [0, 1]
    tracks: np.ndarray  # [T, K, 5] rows (pres, x, y, w, h)
    meta: dict = field(default_factory=dict)

    @property
    def length(self) -> int:
        return self.frames.shape[0]

    @property
    def num_objects(self) -> int:
        return self.tracks.shape[1]


def _random_objects(rng: np.random.Generator, K: int, opts: BounceOptions) -> list[ObjectSpec]:
    colors = rng.permutation(len(PALETTE))[:K]
    specs = []
    for k in range(K):
        r = float(rng.uniform(opts.min_radius, opts.max_radius))
        pos = tuple(float(v) for v in rng.uniform(r, opts.size - r, size=2))
        speed = float(rng.uniform(opts.min_speed, opts.max_speed))
        ang = float(rng.uniform(0, 2 * np.pi))
        specs.append(
            ObjectSpec(
                shape="square" if rng.random() < 0.5 else "disc",
                radius=r,
                color=tuple(int(c) for c in PALETTE[colors[k]]),
                pos=pos,
                vel=(speed * np.sin(ang), speed * np.cos(ang)),
            )
        )
    return specs


def _reflect(p: float, v: float, lo: float, hi: float) -> tuple[float, float]:
    if hi <= lo:
        return (lo + hi) / 2, 0.0
    while p < lo or p > hi:
        if p < lo:
            p, v = 2 * lo - p, -v
        else:
            p, v = 2 * hi - p, -v
    return p, v


def object_mask(spec_shape: str, radius: float, center: tuple[float, float], size: int) -> np.ndarray:
    """Full (unoccluded) pixel mask of one object, clipped to the frame."""
    cy, cx = center
    rows = np.arange(size)[:, None] + 0.5
    cols = np.arange(size)[None, :] + 0.5
    if spec_shape == "disc":
        return (rows - cy) ** 2 + (cols - cx) ** 2 <= radius**2
    return (np.abs(rows - cy) <= radius) & (np.abs(cols - cx) <= radius)


def mask_box(mask: np.ndarray) -> np.ndarray:
    """(pres, x, y, w, h) of the mask's bounding box; pres=0 below the area threshold."""
    H, W = mask.shape
    rr = np.flatnonzero(mask.any(axis=1))
    cc = np.flatnonzero(mask.any(axis=0))
    if rr.size == 0:
        return np.zeros(5)
    r0, r1, c0, c1 = rr[0], rr[-1], cc[0], cc[-1]
    bh, bw = r1 - r0 + 1, c1 - c0 + 1
    if bh * bw < AREA_THRESHOLD:
        return np.zeros(5)
    return np.array([1.0, (c0 + c1 + 1) / 2 / W, (r0 + r1 + 1) / 2 / H, bw / W, bh / H])


def _background(t: int, opts: BounceOptions) -> np.ndarray:
    S = opts.size
    bg = np.broadcast_to(BACKGROUND[:, None, None], (3, S, S)).astype(np.float64)
    if opts.bg_drift:
        cols = np.arange(S)[None, None, :]
        stripe = 14.0 * np.sin(2 * np.pi * (cols + opts.drift_speed * t) / 8.0)
        bg = bg + stripe
    return bg


def gen_bounce_video(seed: int, T: int, K: int, opts: BounceOptions | None = None) -> VideoSample:
    """Render K objects moving with constant velocity and elastic wall bounces.

    Objects are painted in index order, so higher indices occlude lower ones.
    Boxes bound each object's full rasterized mask (occluded parts included).
    """
    opts = opts or BounceOptions()
    if T < 2:
        raise ConfigError("need at least 2 frames")
    if K < 0 or K > opts.k_max:
        raise ConfigError(f"K={K} outside [0, {opts.k_max}]")
    if opts.size < 4 or opts.channels not in (1, 3):
        raise ConfigError("invalid frame dimensions")
    rng = np.random.default_rng(seed)
    specs = opts.objects if opts.objects is not None else _random_objects(rng, K, opts)
    if len(specs) != K:
        raise ConfigError(f"{len(specs)} object specs for K={K}")
    S = opts.size
    frames = np.zeros((T, 3, S, S), dtype=np.uint8)
    tracks = np.zeros((T, K, 5))
    pos = [list(s.pos) for s in specs]
    vel = [list(s.vel) for s in specs]
    history = []
    for t in range(T):
        img = _background(t, opts)
        for k, s in enumerate(specs):
            mask = object_mask(s.shape, s.radius, (pos[k][0], pos[k][1]), S)
            img[:, mask] = np.asarray(s.color, dtype=np.float64)[:, None]
            tracks[t, k] = mask_box(mask)
        frames[t] = np.clip(np.rint(img), 0, 255).astype(np.uint8)
        history.append([list(p) + list(v) for p, v in zip(pos, vel)])
        for k, s in enumerate(specs):
            lo = s.radius - opts.exit_margin
            hi = S - s.radius + opts.exit_margin
            for ax in range(2):
                pos[k][ax], vel[k][ax] = _reflect(pos[k][ax] + vel[k][ax], vel[k][ax], lo, hi)
    if opts.channels == 1:
        frames = np.rint(frames.mean(axis=1, keepdims=True)).astype(np.uint8)
    meta = {
        "seed": int(seed),
        "objects": [asdict(s) for s in specs],
        "states": history,
        "bg_drift": bool(opts.bg_drift),
    }
    return VideoSample(frames.astype(np.float64) / 255.0, tracks, meta)


def pad_tracks(tracks: np.ndarray, k_max: int) -> np.ndarray:
    T, K, _ = tracks.shape
    if K > k_max:
        raise ConfigError(f"{K} tracks exceed K_max={k_max}")
    out = np.zeros((T, k_max, 5))
    out[:, :K] = tracks
    return out


def make_dataset(n: int, T: int, K: int, seed: int, opts: BounceOptions | None = None) -> list[VideoSample]:
    """n videos with seeds derived from ``seed``; tracks padded to K_max."""
    opts = opts or BounceOptions()
    seeds = np.random.SeedSequence(seed).generate_state(n)
    out = []
    for s in seeds:
        v = gen_bounce_video(int(s), T, K, opts)
        v.tracks = pad_tracks(v.tracks, opts.k_max)
        out.append(v)
    return out


# file format: MAGIC | u32 header length | JSON header | per sample:
#   u32 meta length | meta JSON | u8 frames [T,C,H,W] | f64 tracks [T,K,5] | u32 crc32


def write_dataset(path: str | Path, samples: list[VideoSample]) -> None:
    if not samples:
        raise DatasetError("refusing to write an empty dataset")
    T, C, H, W = samples[0].frames.shape
    K = samples[0].tracks.shape[1]
    for i, s in enumerate(samples):
        if s.frames.shape != (T, C, H, W) or s.tracks.shape != (T, K, 5):
            raise DatasetError(f"sample {i} shape differs from sample 0")
    header = {
        "format_version": FORMAT_VERSION,
        "count": len(samples),
        "T": T,
        "C": C,
        "H": H,
        "W": W,
        "K_max": K,
    }
    buf = io.BytesIO()
    hb = json.dumps(header, sort_keys=True).encode()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", len(hb)))
    buf.write(hb)
    for s in samples:
        u8 = np.rint(s.frames * 255.0)
        if np.any(np.abs(u8 / 255.0 - s.frames) > 1e-12) or u8.min() < 0 or u8.max() > 255:
            raise DatasetError("frames are not representable as u8/255")
        mb = json.dumps(s.meta, sort_keys=True).encode()
        body = struct.pack("<I", len(mb)) + mb + u8.astype(np.uint8).tobytes() + s.tracks.astype("<f8").tobytes()
        buf.write(body)
        buf.write(struct.pack("<I", zlib.crc32(body)))
    Path(path).write_bytes(buf.getvalue())


def read_dataset(path: str | Path) -> list[VideoSample]:
    raw = Path(path).read_bytes()
    off = 0

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(raw):
            raise DatasetError(f"truncated file: wanted {n} bytes, {len(raw) - off} left", off)
        chunk = raw[off : off + n]
        off += n
        return chunk

    if take(len(MAGIC)) != MAGIC:
        raise DatasetError("bad magic", 0)
    (hlen,) = struct.unpack("<I", take(4))
    try:
        header = json.loads(take(hlen))
    except json.JSONDecodeError as e:
        raise DatasetError(f"corrupt header: {e}", off) from e
    if header.get("format_version") != FORMAT_VERSION:
        raise DatasetError(f"unsupported format version {header.get('format_version')}", len(MAGIC) + 4)
    T, C, H, W, K = (header[k] for k in ("T", "C", "H", "W", "K_max"))
    if header["count"] < 1 or K < 1:
        raise DatasetError("header declares an empty dataset", len(MAGIC) + 4)
    nf, nt = T * C * H * W, T * K * 5 * 8
    samples = []
    for _ in range(header["count"]):
        start = off
        (mlen,) = struct.unpack("<I", take(4))
        meta = json.loads(take(mlen))
        frames = np.frombuffer(take(nf), dtype=np.uint8).reshape(T, C, H, W).astype(np.float64) / 255.0
        tracks = np.frombuffer(take(nt), dtype="<f8").reshape(T, K, 5).astype(np.float64)
        end = off
        (crc,) = struct.unpack("<I", take(4))
        if crc != zlib.crc32(raw[start:end]):
            raise DatasetError("sample checksum mismatch", start)
        samples.append(VideoSample(frames, tracks, meta))
    if off != len(raw):
        raise DatasetError("trailing bytes after last sample", off)
    return samples

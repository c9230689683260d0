"""Command-line front door: data generation, training, sampling, editing, FLOPs, evaluation."""

from __future__ import annotations

import argparse
import contextlib
import json
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import boxes as bx
from . import checkpoint as ckpt
from . import codec as cd
from . import data
from . import harness
from . import model as md
from . import sample as sp
from . import train as tr


class CLIError(Exception):
    pass


def _names(cls) -> set[str]:
    return {f.name for f in fields(cls)}


def read_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        conf = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise CLIError(f"cannot read config {path}: {e}") from e
    if not isinstance(conf, dict):
        raise CLIError("config file must hold a JSON object")
    return conf


def split_config(conf: dict, *classes) -> list[dict]:
    """Route flat keys to every dataclass that declares them; unknown keys are an error."""
    known = set().union(*(_names(c) for c in classes))
    unknown = set(conf) - known
    if unknown:
        raise CLIError(f"unknown config keys: {sorted(unknown)}")
    return [{k: v for k, v in conf.items() if k in _names(c)} for c in classes]


def write_ppm(path: Path, frame: np.ndarray) -> None:
    """Binary PPM (P6) from a [C,H,W] frame in [0, 1]."""
    frame = np.asarray(frame)
    if frame.shape[0] == 1:
        frame = np.repeat(frame, 3, axis=0)
    u8 = np.clip(np.rint(frame * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    H, W, _ = u8.shape
    path.write_bytes(f"P6\n{W} {H}\n255\n".encode() + u8.tobytes())


def write_json(path: str | Path | None, obj: dict) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if path is None or str(path) == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


# subcommands


def cmd_gen_data(args, conf: dict) -> None:
    (opts_kw,) = split_config(conf, data.BounceOptions)
    opts = data.BounceOptions(**opts_kw)
    if args.k_max is not None:
        opts.k_max = args.k_max
    if args.bg_drift:
        opts.bg_drift = True
    if args.exit_margin is not None:
        opts.exit_margin = args.exit_margin
    samples = data.make_dataset(args.n, args.T, args.K, args.seed, opts)
    data.write_dataset(args.out, samples)
    print(f"wrote {len(samples)} videos to {args.out}")


def _frames_of(samples: list[data.VideoSample]) -> np.ndarray:
    return np.concatenate([s.frames for s in samples])


def train_codec(frames: np.ndarray, cfg: cd.CodecConfig, steps: int, seed: int, batch_size: int = 16,
                warmup: int = 0, log=None, target_psnr: float | None = None, check_every: int = 100):
    """Fit a codec on ``frames``; stops early once ``target_psnr`` is reached."""
    codec = cd.Codec(cfg, seed=seed)
    rng = np.random.default_rng([seed, 4])
    codec.init_codebook_from(frames[rng.permutation(len(frames))[: max(batch_size, 1)]], seed=seed)
    trainer = cd.CodecTrainer(codec, warmup=warmup, seed=seed)
    t0 = time.perf_counter()
    quality = None
    for i in range(1, steps + 1):
        idx = rng.permutation(len(frames))[:batch_size] if batch_size < len(frames) else np.arange(len(frames))
        parts = trainer.step(frames[idx])
        if log is not None and (i % 10 == 0 or i == 1):
            log.writerow([i, f"{parts['recon']:.6f}", f"{parts['codebook']:.6f}", f"{parts['commit']:.6f}", f"{time.perf_counter() - t0:.3f}"])
        if target_psnr is not None and i % check_every == 0:
            quality = cd.psnr_of(codec, frames)
            if quality >= target_psnr:
                return codec, i, quality
    return codec, steps, cd.psnr_of(codec, frames) if quality is None else quality


def cmd_train_codec(args, conf: dict) -> None:
    extra = {k: conf.pop(k) for k in ("batch_size", "warmup", "target_psnr") if k in conf}
    (ckw,) = split_config(conf, cd.CodecConfig)
    cfg = cd.CodecConfig(**ckw)
    frames = _frames_of(data.read_dataset(args.data))
    log_ctx = open(args.log, "w", newline="") if args.log else contextlib.nullcontext()
    with log_ctx as fh:
        log = None
        if fh is not None:
            import csv

            log = csv.writer(fh)
            log.writerow(["step", "loss_recon", "loss_codebook", "loss_commit", "wallclock"])
        codec, steps, quality = train_codec(
            frames, cfg, args.steps, args.seed, extra.get("batch_size", 16), extra.get("warmup", 0), log, extra.get("target_psnr")
        )
    conf_out, tensors = cd.codec_state(codec)
    ckpt.save(args.out, {"kind": "codec", "codec": conf_out, "steps": steps, "seed": args.seed}, tensors)
    print(f"codec trained for {steps} steps, PSNR {quality:.2f} dB -> {args.out}")


def load_codec(path: str) -> cd.Codec:
    conf, tensors = ckpt.load(path)
    if conf.get("kind") not in ("codec", "prior"):
        raise CLIError(f"{path} holds no codec")
    return cd.codec_from_state(conf["codec"], tensors)


def cmd_train_prior(args, conf: dict) -> None:
    mkw, tkw = split_config(conf, md.ModelConfig, tr.TrainConfig)
    samples = data.read_dataset(args.data)
    mkw.setdefault("K", samples[0].tracks.shape[1])
    mkw.setdefault("frame_size", samples[0].frames.shape[-1])
    mkw.setdefault("channels", samples[0].frames.shape[1])
    codec = load_codec(args.codec)
    mkw.setdefault("latent_h", codec.cfg.latent_size)
    mkw.setdefault("latent_w", codec.cfg.latent_size)
    mkw.setdefault("V_z", codec.cfg.codebook_size)
    # short clips shrink the object window unless it was set explicitly
    mkw.setdefault("W_o", min(md.ModelConfig().W_o, samples[0].length))
    mcfg = md.ModelConfig(**mkw)
    tkw.update(W_b=mcfg.W_b, W_o=mcfg.W_o, seed=args.seed, steps=args.steps)
    tkw.setdefault("T", samples[0].length)
    tcfg = tr.TrainConfig(**tkw)
    model = md.POVT(mcfg, seed=args.seed)
    videos = [tr.prepare_video(v, codec, mcfg) for v in samples]
    trainer = tr.PriorTrainer(model, tcfg, videos, codec)
    try:
        trainer.run(args.steps, log_path=args.log)
    except tr.TrainingDiverged:
        good = str(args.out) + ".lastgood"
        tr.save_prior_checkpoint(good, model, codec, tcfg, {"steps": trainer.last_good_step})
        print(f"training diverged; last good weights written to {good}", file=sys.stderr)
        raise
    tr.save_prior_checkpoint(args.out, model, codec, tcfg, {"steps": trainer.step_count})
    nll = tr.evaluate_nll(model, videos)
    print(f"prior trained for {trainer.step_count} steps, eval NLL {nll:.4f} nats/token -> {args.out}")


def parse_box(text: str) -> bx.BBox:
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError as e:
        raise CLIError(f"bad box {text!r}: {e}") from e
    if len(vals) != 4:
        raise CLIError("box needs x,y,w,h (or 'none' to remove the object)")
    return bx.BBox(1, *vals)


def _edits(args) -> list:
    if args.at is None and args.object is None and args.box is None:
        return []
    if args.at is None or args.object is None or args.box is None:
        raise CLIError("an edit needs --at, --object and --box together")
    box = bx.BBox(0) if args.box.lower() == "none" else parse_box(args.box)
    return [(args.at, args.object, box)]


def cmd_sample(args, conf: dict) -> None:
    model, codec, _ = tr.load_prior_checkpoint(args.ckpt)
    samples = data.read_dataset(args.data)
    if not 0 <= args.index < len(samples):
        raise CLIError(f"index {args.index} outside dataset of {len(samples)}")
    v = samples[args.index]
    n = args.cond
    rollout = sp.generate(
        model, codec, v.frames[:n], v.tracks[:n], args.horizon, args.seed, args.temperature, args.topk, _edits(args)
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for t, (frame, over) in enumerate(zip(rollout.video.frames, rollout.overlays)):
        write_ppm(out / f"frame_{t:03d}.ppm", frame)
        write_ppm(out / f"boxes_{t:03d}.ppm", over)
    write_json(
        out / "tracks.json",
        {
            "schema_version": harness.SCHEMA_VERSION,
            "conditioning": n,
            "horizon": args.horizon,
            "seed": args.seed,
            "tracks": rollout.video.tracks.tolist(),
            "box_tokens": rollout.box_tokens.tolist(),
            "z_tokens": rollout.z_tokens.tolist(),
        },
    )
    print(f"wrote {len(rollout.video.frames)} frames to {out}")


def cmd_flops(args, conf: dict) -> None:
    (mkw,) = split_config(conf, md.ModelConfig)
    cfg = md.ModelConfig.paper_scale(**mkw) if args.paper_scale else md.ModelConfig(**mkw)
    report = harness.count_flops(cfg, args.mode, args.frames, train=args.train)
    write_json(args.out, report.to_dict())


def cmd_eval(args, conf: dict) -> None:
    model, codec, _ = tr.load_prior_checkpoint(args.ckpt)
    samples = data.read_dataset(args.data)
    if args.limit:
        samples = samples[: args.limit]
    report = harness.evaluate_best_of_S(model, codec, samples, args.S, args.cond, args.seed, args.temperature, args.topk)
    write_json(args.out, report.to_dict())


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--config", help="JSON file of key/value settings")
    common.add_argument("--threads", type=int, default=None, help="cap BLAS threads")

    p = argparse.ArgumentParser(prog="povt", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="render a synthetic bouncing-object dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, default=16)
    g.add_argument("--T", type=int, default=8)
    g.add_argument("--K", type=int, default=3)
    g.add_argument("--k-max", type=int, default=None)
    g.add_argument("--bg-drift", action="store_true")
    g.add_argument("--exit-margin", type=float, default=None)
    g.set_defaults(fn=cmd_gen_data)

    c = sub.add_parser("train-codec", parents=[common], help="fit the frame codec")
    c.add_argument("--data", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--steps", type=int, default=1000)
    c.add_argument("--log", help="CSV training log")
    c.set_defaults(fn=cmd_train_codec)

    t = sub.add_parser("train-prior", parents=[common], help="fit the prior on a frozen codec")
    t.add_argument("--data", required=True)
    t.add_argument("--codec", required=True, help="codec checkpoint")
    t.add_argument("--out", required=True)
    t.add_argument("--steps", type=int, default=1000)
    t.add_argument("--log", help="CSV training log")
    t.set_defaults(fn=cmd_train_prior)

    for name, needs_edit in (("sample", False), ("edit", True)):
        s = sub.add_parser(name, parents=[common], help="roll out a video" if not needs_edit else "roll out with a forced box")
        s.add_argument("--ckpt", required=True)
        s.add_argument("--data", required=True)
        s.add_argument("--index", type=int, default=0)
        s.add_argument("--cond", type=int, default=1, help="conditioning frames")
        s.add_argument("--horizon", type=int, default=7)
        s.add_argument("--temperature", type=float, default=1.0)
        s.add_argument("--topk", type=int, default=None)
        s.add_argument("--out", required=True)
        s.add_argument("--at", type=int, required=needs_edit, help="frame index of the edit")
        s.add_argument("--object", type=int, required=needs_edit, help="track slot to edit")
        s.add_argument("--box", required=needs_edit, help="x,y,w,h in [0,1], or 'none'")
        s.set_defaults(fn=cmd_sample)

    f = sub.add_parser("flops", parents=[common], help="analytic FLOP report")
    f.add_argument("--mode", choices=("povt", "full"), default="povt")
    f.add_argument("--frames", type=int, default=None)
    f.add_argument("--train", action="store_true", help="x3 forward+backward estimate")
    f.add_argument("--paper-scale", action="store_true", help="start from the large configuration")
    f.add_argument("--out", default="-")
    f.set_defaults(fn=cmd_flops)

    e = sub.add_parser("eval", parents=[common], help="best-of-S evaluation")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--S", type=int, default=10)
    e.add_argument("--cond", type=int, default=1)
    e.add_argument("--limit", type=int, default=None)
    e.add_argument("--temperature", type=float, default=1.0)
    e.add_argument("--topk", type=int, default=None)
    e.add_argument("--out", default="-")
    e.set_defaults(fn=cmd_eval)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    limiter = contextlib.nullcontext()
    if args.threads:
        from threadpoolctl import threadpool_limits

        limiter = threadpool_limits(limits=args.threads)
    try:
        with limiter:
            args.fn(args, read_config(args.config))
    except (CLIError, OSError, ckpt.CheckpointError, sp.GenerationError, bx.BoxError, md.ModelConfigError,
            tr.TrainConfigError, cd.CodecConfigError, data.ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

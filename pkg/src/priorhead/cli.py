"""Command-line entry point: ``priorhead <command> [options]``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
All artifacts are written under ``--out``.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
from PIL import Image

log = logging.getLogger("priorhead")


class UsageError(Exception):
    pass


def _config(args):
    from .config import Config, load_config

    return load_config(args.config) if args.config else Config()


def _save_frames(out_dir: Path, frames):
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, fr in enumerate(frames):
        Image.fromarray(fr).save(out_dir / f"frame_{i:04d}.png")


def _load_frame_dir(d: Path) -> np.ndarray:
    paths = sorted(Path(d).glob("frame_*.png"))
    if not paths:
        raise FileNotFoundError(f"no frame_*.png files in {d}")
    return np.stack([np.asarray(Image.open(p).convert("RGB")) for p in paths])


def _grid(text: str):
    pts = []
    for tok in text.split(","):
        k, e = tok.split(":")
        pts.append((int(k), int(e)))
    return pts


# ---------------------------------------------------------------- commands

def cmd_make_synthetic(args):
    from .data import make_synthetic_dataset

    lay = make_synthetic_dataset(args.out, args.videos, args.frames, seed=args.seed, resolution=args.resolution,
                                 test_fraction=args.test_fraction)
    print(f"wrote {len(lay.video_ids())} videos to {lay.root}")


def cmd_preprocess(args):
    from .data import preprocess, synthetic_face_detector

    src = Path(args.input)
    frames = np.load(src) if src.suffix == ".npy" else _load_frame_dir(src)
    clips = preprocess(frames, synthetic_face_detector, out_size=args.size, min_size=args.min_size)
    out = Path(args.out)
    for n, clip in enumerate(clips):
        _save_frames(out / f"clip{n:03d}", clip.frames)
        print(f"clip{n:03d}: frames {clip.start}-{clip.end - 1} crop {clip.crop}")
    if not clips:
        print("no clip passed the minimum resolution")


def cmd_cache_priors(args):
    from .data import DatasetLayout, cache_priors
    from .prior import make_prior

    cfg = _config(args)
    lay = DatasetLayout(args.data)
    res = lay.meta.get("resolution", cfg.prior.resolution)
    backend = make_prior(args.backend or cfg.prior.backend, seed=lay.meta.get("model_seed", cfg.prior.seed),
                         resolution=res, cache_file=args.cache_file or cfg.prior.cache_file)
    rep = cache_priors(lay, backend)
    print(f"computed {len(rep.computed)}, up to date {len(rep.skipped)}, failed {len(rep.failed)}")
    return 1 if rep.failed else 0


def cmd_train(args):
    import dataclasses

    from .data import DatasetLayout
    from .training import Trainer, train

    cfg = _config(args)
    tcfg, ncfg = cfg.train, cfg.net
    over = {k: v for k, v in dict(epochs=args.epochs, max_steps=args.steps, seed=args.seed).items()
            if v is not None}
    if over:
        tcfg = dataclasses.replace(tcfg, **over)
    if args.keypoints is not None:
        ncfg = dataclasses.replace(ncfg, num_keypoints=args.keypoints)
    lay = DatasetLayout(args.data)
    trainer = Trainer.resume(args.resume) if args.resume else None
    if trainer is not None and over:
        trainer.cfg = dataclasses.replace(trainer.cfg, **over)
    seed = lay.meta.get("model_seed", cfg.prior.seed)
    path = train(lay, trainer.cfg if trainer else tcfg, trainer.net_cfg if trainer else ncfg, args.out,
                 prior_seed=seed, trainer=trainer)
    print(f"checkpoint written to {path}")


def cmd_reconstruct(args):
    from .data import DatasetLayout
    from .metrics import hard_subset
    from .pipeline import Synthesizer, reconstruct
    from .prior import SyntheticMorphableModel, render_synthetic_frame

    if not args.oracle and not args.checkpoint:
        raise UsageError("reconstruct needs --checkpoint (or --oracle)")
    lay = DatasetLayout(args.data)
    ids = lay.video_ids(None if args.split == "all" else args.split)
    sources = {v: 0 for v in ids}
    if args.hard:
        hs = hard_subset({v: lay.load_params(v) for v in ids})
        ids, sources = hs.video_ids, hs.source_frames
    out = Path(args.out)
    syn = None if args.oracle else Synthesizer.from_checkpoint(args.checkpoint)
    model = SyntheticMorphableModel(lay.meta.get("model_seed", 0))
    for vid in ids:
        frames, params = lay.load_frames(vid), lay.load_params(vid)
        if args.oracle:
            gen = np.stack([render_synthetic_frame(model, p, frames.shape[1]) for p in params])
        else:
            gen = reconstruct(syn, frames, params, sources[vid], args.expr_dims)
        _save_frames(out / vid, gen)
    (out / "sources.json").write_text(json.dumps(sources))
    print(f"reconstructed {len(ids)} videos into {out}")


def cmd_reenact(args):
    from .data import DatasetLayout
    from .pipeline import Synthesizer, reenact

    lay = DatasetLayout(args.data)
    syn = Synthesizer.from_checkpoint(args.checkpoint)
    src_frames, src_params = lay.load_frames(args.source), lay.load_params(args.source)
    i = args.source_frame
    gen = reenact(syn, src_frames[i], src_params[i], lay.load_params(args.driving),
                  relative=not args.absolute, E=args.expr_dims)
    _save_frames(Path(args.out), gen)
    print(f"wrote {len(gen)} frames to {args.out}")


def cmd_edit(args):
    from .data import DatasetLayout
    from .manipulation import get_translator, render_edited
    from .pipeline import Synthesizer

    translator = get_translator(args.translator)
    translator.check(args.target)
    lay = DatasetLayout(args.data)
    syn = Synthesizer.from_checkpoint(args.checkpoint)
    frames, params = lay.load_frames(args.video), lay.load_params(args.video)
    driving = lay.load_params(args.driving) if args.driving else params
    i = args.source_frame
    res = render_edited(syn, frames[i], params[i], driving, translator, args.target)
    _save_frames(Path(args.out), res.frames)
    print(f"wrote {len(res.frames)} edited frames to {args.out}")


def cmd_encode(args):
    from .codec import StreamHeader, bitrate, write_stream
    from .data import DatasetLayout
    from .keypoints import driving_keypoints, select_keypoints
    from .prior import SyntheticMorphableModel

    lay = DatasetLayout(args.data)
    params = lay.load_params(args.video)
    plan = select_keypoints(args.keypoints)
    model = SyntheticMorphableModel(lay.meta.get("model_seed", 0))
    src = params[args.source_frame]
    frames = [(driving_keypoints(src, p, plan, model), p) for p in params]
    header = StreamHeader(plan.budget, args.expr_dims, plan.indices, args.fps, 1)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    n = write_stream(out, header, frames)
    per, total = bitrate(header, len(frames))
    print(f"{len(frames)} frames, {per} bytes/frame, {n} bytes total (expected {total})")


def cmd_decode(args):
    from .codec import read_stream
    from .data import DatasetLayout
    from .pipeline import Synthesizer

    header, frames = read_stream(args.stream)
    syn = Synthesizer.from_checkpoint(args.checkpoint)
    syn.check_plan(header.plan_indices)
    lay = DatasetLayout(args.data)
    src_frames, src_params = lay.load_frames(args.source), lay.load_params(args.source)
    i = args.source_frame
    gen = syn.render(src_frames[i], syn.keypoints(src_params[i]), [f[0] for f in frames], [f[1] for f in frames])
    _save_frames(Path(args.out), gen)
    print(f"decoded {len(gen)} frames (K={header.K}, E={header.E}) into {args.out}")


def _registry(lay):
    from .metrics import synthetic_registry
    from .prior import SyntheticMorphableModel

    return synthetic_registry(SyntheticMorphableModel(lay.meta.get("model_seed", 0)),
                              lay.meta.get("resolution", 64))


def cmd_evaluate(args):
    from .data import DatasetLayout
    from .metrics import evaluation_report, write_report

    lay = DatasetLayout(args.data)
    recon = Path(args.recon)
    ids = sorted(p.name for p in recon.iterdir() if p.is_dir())
    if not ids:
        raise FileNotFoundError(f"no reconstructed videos under {recon}")
    videos = {}
    for vid in ids:
        ref = lay.load_frames(vid)
        gen = _load_frame_dir(recon / vid)
        if len(gen) != len(ref):
            raise ValueError(f"{vid}: {len(gen)} generated frames vs {len(ref)} reference frames")
        videos[vid] = (gen, ref, ref)
    rows = evaluation_report(videos, _registry(lay), args.mode)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_report(out / "report.tsv", rows)
    agg = rows[-1]
    print("  ".join(f"{c}={agg[c]:.4g}" for c in ("PSNR", "SSIM", "FID", "AKD", "AKD-M", "AED", "AEMOD")))


def cmd_rate_sweep(args):
    from .codec import rate_sweep, write_sweep
    from .data import DatasetLayout

    lay = DatasetLayout(args.data)
    ckpts = {}
    for tok in args.checkpoint:
        if "=" not in tok:
            raise UsageError(f"--checkpoint expects K=PATH, got {tok!r}")
        k, p = tok.split("=", 1)
        ckpts[int(k)] = p
    rows = rate_sweep(lay, ckpts, _grid(args.grid), _registry(lay), max_frames=args.max_frames)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_sweep(out / "rate_sweep.tsv", rows)
    for r in rows:
        print(f"K={r.K:2d} E={r.E:2d} {r.bytes_per_frame:4d} B/frame  AKD={r.AKD:.4f}  "
              f"AKD-M={r.AKD_M:.4f}  AEMOD={r.AEMOD:.4f}")


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file with [train]/[net]/[prior] sections")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", required=True, help="output location; all artifacts go here")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="priorhead", description="One-shot face video synthesis driven by a 3D face "
                                "prior: data, training, synthesis, keypoint coding and evaluation.")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, fn, help_):
        sp = sub.add_parser(name, parents=[common], help=help_)
        sp.set_defaults(fn=fn)
        return sp

    sp = add("make-synthetic", cmd_make_synthetic, "render a synthetic dataset")
    sp.add_argument("--videos", type=int, default=20)
    sp.add_argument("--frames", type=int, default=32)
    sp.add_argument("--resolution", type=int, default=64)
    sp.add_argument("--test-fraction", type=float, default=0.2)

    sp = add("preprocess", cmd_preprocess, "track, crop and resize a raw video")
    sp.add_argument("--input", required=True, help=".npy array (T,H,W,3) or a directory of frame_*.png")
    sp.add_argument("--size", type=int, default=256)
    sp.add_argument("--min-size", type=int, default=64)

    sp = add("cache-priors", cmd_cache_priors, "extract prior parameters into sidecars")
    sp.add_argument("--data", required=True)
    sp.add_argument("--backend", choices=("synthetic", "external"))
    sp.add_argument("--cache-file")

    sp = add("train", cmd_train, "train a model")
    sp.add_argument("--data", required=True)
    sp.add_argument("--keypoints", type=int)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--steps", type=int, help="stop after this many steps")
    sp.add_argument("--resume", help="checkpoint to continue from")

    sp = add("reconstruct", cmd_reconstruct, "same-identity reconstruction")
    sp.add_argument("--data", required=True)
    sp.add_argument("--checkpoint")
    sp.add_argument("--split", default="test", help="train, test or all")
    sp.add_argument("--hard", action="store_true", help="hard subset with largest-pose source frames")
    sp.add_argument("--oracle", action="store_true", help="re-render ground truth instead of the network")
    sp.add_argument("--expr-dims", type=int, default=50)

    sp = add("reenact", cmd_reenact, "drive one video's identity with another's motion")
    sp.add_argument("--data", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--source", required=True, help="source video id")
    sp.add_argument("--source-frame", type=int, default=0)
    sp.add_argument("--driving", required=True, help="driving video id")
    sp.add_argument("--absolute", action="store_true", help="absolute instead of relative motion")
    sp.add_argument("--expr-dims", type=int, default=50)

    sp = add("edit", cmd_edit, "expression editing at inference time")
    sp.add_argument("--data", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--video", required=True)
    sp.add_argument("--driving", help="driving video id (default: the video itself)")
    sp.add_argument("--source-frame", type=int, default=0)
    sp.add_argument("--translator", required=True)
    sp.add_argument("--target", required=True)

    sp = add("encode", cmd_encode, "encode a video's keypoints and expression into a .kpx stream")
    sp.add_argument("--data", required=True)
    sp.add_argument("--video", required=True)
    sp.add_argument("--keypoints", type=int, default=16)
    sp.add_argument("--expr-dims", type=int, default=50)
    sp.add_argument("--source-frame", type=int, default=0)
    sp.add_argument("--fps", type=int, default=25)

    sp = add("decode", cmd_decode, "decode a .kpx stream into frames")
    sp.add_argument("--stream", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--source", required=True, help="video id holding the source frame")
    sp.add_argument("--source-frame", type=int, default=0)

    sp = add("evaluate", cmd_evaluate, "score reconstructions against the dataset")
    sp.add_argument("--data", required=True)
    sp.add_argument("--recon", required=True)
    sp.add_argument("--mode", choices=("reconstruction", "reenactment"), default="reconstruction")

    sp = add("rate-sweep", cmd_rate_sweep, "accuracy versus bitrate over a (K, E) grid")
    sp.add_argument("--data", required=True)
    sp.add_argument("--checkpoint", action="append", required=True, help="K=PATH, repeatable")
    sp.add_argument("--grid", default="5:0,16:0,16:50", help="comma-separated K:E points")
    sp.add_argument("--max-frames", type=int)
    return p


def run(argv: Optional[List[str]] = None) -> int:
    from .config import ConfigError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.seed is None:
        args.seed = 0 if args.command == "make-synthetic" else None
    try:
        code = args.fn(args)
    except (UsageError, ConfigError) as exc:
        print(f"priorhead {args.command}: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        log.debug("failure", exc_info=True)
        print(f"priorhead {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return int(code or 0)


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()

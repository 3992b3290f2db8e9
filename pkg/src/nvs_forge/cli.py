"""Command-line interface.

Subcommands: gen-scene, gen-pairs, train, finetune, render-nvs, eval,
pipeline, ablate. Exit codes: 0 success, 2 validation error, 3 stage
failure. The environment variable NVS_FORGE_THREADS caps the BLAS thread
pool (and with it every numeric stage), keeping runs reproducible on
shared machines.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from nvs_forge import __version__
from nvs_forge.diffusion import build_schedule, clip_to_latent, finetune, sample, top_k_select, train
from nvs_forge.io_formats import FRAME_PATTERN, SceneFormatError, read_poses, read_scene, write_mask, write_rgb
from nvs_forge.metrics import evaluate_clip
from nvs_forge.diffusion import init_train_state
from nvs_forge.pipeline import (
    ABLATION_AXES,
    PipelineConfig,
    StageError,
    ValidationError,
    generate_pairs,
    load_state,
    novel_conditioning,
    read_pairs,
    run_ablation,
    run_pipeline,
    save_state,
    write_benchmark_scenes,
    write_generated_scene,
    write_pairs,
)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_STAGE = 3


def _limit_threads():
    cap = os.environ.get("NVS_FORGE_THREADS")
    if not cap:
        return None
    try:
        n = max(1, int(cap))
    except ValueError:
        raise ValidationError(f"NVS_FORGE_THREADS must be an integer, got {cap!r}")
    try:
        import threadpoolctl
        threadpoolctl.threadpool_limits(limits=n)
    except ImportError:
        pass
    return n


def _add_model_args(p: argparse.ArgumentParser):
    p.add_argument("--k", type=int, default=250, help="diffusion steps in the schedule")
    p.add_argument("--kind", default="cosine", choices=("cosine", "linear"))
    p.add_argument("--hidden", type=int, default=40)
    p.add_argument("--blocks", type=int, default=3)
    p.add_argument("--window", type=int, default=49,
                   help="max frames per training sample (longer clips are cropped)")
    p.add_argument("--batch-size", type=int, default=2)


def _add_region_args(p: argparse.ArgumentParser):
    p.add_argument("--n", type=int, default=2, help="trajectories per video")
    p.add_argument("--elev", type=float, default=15.0, help="elevation bound (degrees)")
    p.add_argument("--azim", type=float, default=30.0, help="azimuth bound (degrees)")
    p.add_argument("--rad", type=float, default=0.15, help="relative radius deviation")
    p.add_argument("--strategy", default="structured",
                   choices=("structured", "random", "tube"))
    p.add_argument("--mask-ratio", type=float, default=0.5)
    p.add_argument("--patch-size", type=int, default=16)
    p.add_argument("--noise", action="store_true", help="inject depth noise on dynamic points")


def _pipeline_config_from(args, **overrides) -> PipelineConfig:
    cfg = PipelineConfig(
        scene=getattr(args, "scene", ""),
        out_dir=getattr(args, "out", ""),
        elevation_deg=getattr(args, "elev", 15.0),
        azimuth_deg=getattr(args, "azim", 30.0),
        radius_deviation=getattr(args, "rad", 0.15),
        n_pairs=getattr(args, "n", 5),
        mask_strategy=getattr(args, "strategy", "structured"),
        mask_ratio=getattr(args, "mask_ratio", 0.5),
        patch_size=getattr(args, "patch_size", 16),
        noise_injection=getattr(args, "noise", False),
        stack_background=getattr(args, "stack_background", False),
        schedule_steps=getattr(args, "k", 250),
        schedule_kind=getattr(args, "kind", "cosine"),
        hidden=getattr(args, "hidden", 40),
        blocks=getattr(args, "blocks", 3),
        window=getattr(args, "window", 49),
        train_steps=getattr(args, "steps", 800),
        train_lr=getattr(args, "lr", 2e-4),
        batch_size=getattr(args, "batch_size", 2),
        finetune_steps=getattr(args, "m", 200),
        finetune_lr=getattr(args, "eta", 1e-4),
        guidance_scale=getattr(args, "guidance", 6.0),
        sample_steps=getattr(args, "sample_steps", 50),
        top_k=getattr(args, "topk", 1),
        seed=getattr(args, "seed", 0),
        skip_finetune=getattr(args, "skip_finetune", False),
        checkpoint=getattr(args, "ckpt", None),
    )
    for key, val in overrides.items():
        setattr(cfg, key, val)
    return cfg


# ---------------------------------------------------------------------------
# Subcommand handlers
# ---------------------------------------------------------------------------

def cmd_gen_scene(args) -> int:
    if args.benchmark:
        paths = write_benchmark_scenes(args.out, args.seed, count=args.benchmark,
                                       width=args.width, height=args.height,
                                       frame_count=args.frames)
        for p in paths:
            print(p)
    else:
        print(write_generated_scene(args.out, args.seed, width=args.width,
                                    height=args.height, frame_count=args.frames))
    return EXIT_OK


def cmd_gen_pairs(args) -> int:
    bundle = read_scene(args.scene)
    cfg = _pipeline_config_from(args, scene=args.scene, out_dir=args.out,
                                n_pairs=args.n)
    pairs = generate_pairs(bundle, cfg, args.seed)
    manifest = write_pairs(pairs, args.out, args.seed, args.strategy)
    print(manifest)
    return EXIT_OK


def cmd_train(args) -> int:
    pairs = read_pairs(args.pairs)
    sched = build_schedule(args.k, args.kind)
    from nvs_forge.denoiser import DenoiserConfig
    state = init_train_state(DenoiserConfig(hidden=args.hidden, blocks=args.blocks),
                             args.seed)
    state, losses = train(state, pairs, sched, args.steps, args.lr, args.seed + 1,
                          batch_size=args.batch_size, window=args.window,
                          log_every=max(1, args.steps // 10))
    save_state(args.out, state, extra={"schedule": {"k": args.k, "kind": args.kind}})
    print(f"{args.out} (loss {losses[0]:.4f} -> {losses[-1]:.4f})")
    return EXIT_OK


def cmd_finetune(args) -> int:
    state = load_state(args.ckpt)
    bundle = read_scene(args.scene)
    cfg = _pipeline_config_from(args, scene=args.scene)
    pairs = generate_pairs(bundle, cfg, args.seed)
    sched = build_schedule(args.k, args.kind)
    state = finetune(state, pairs, sched, args.m, args.eta, args.seed + 1,
                     batch_size=args.batch_size, window=args.window)
    save_state(args.out, state)
    print(args.out)
    return EXIT_OK


def cmd_render_nvs(args) -> int:
    state = load_state(args.ckpt)
    bundle = read_scene(args.scene)
    if args.traj:
        novel_traj, _ = read_poses(args.traj)
    elif bundle.novel_traj is not None:
        novel_traj = bundle.novel_traj
    else:
        raise ValidationError("no trajectory: pass --traj or provide novel_poses.txt")
    sched = build_schedule(args.k, args.kind)
    conditioning = novel_conditioning(bundle, novel_traj,
                                      stack_background=args.stack_background)
    z_cond = clip_to_latent(conditioning)
    if args.topk > 1:
        if bundle.novel_frames is None:
            raise ValidationError("top-k selection needs ground-truth novel views")
        pred, scores = top_k_select(state, z_cond, args.topk, bundle.novel_frames,
                                    sched, guidance_scale=args.guidance,
                                    num_steps=args.steps, base_seed=args.seed)
        print("scores: " + ", ".join(f"{s:.2f}" for s in scores))
    else:
        pred = sample(state, z_cond, sched, args.guidance, args.steps,
                      rng_seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for t in range(pred.frame_count):
        write_rgb(out / (FRAME_PATTERN % t), pred.frames[t])
        write_rgb(out / ("cond_" + FRAME_PATTERN % t), conditioning.frames[t])
        write_mask(out / ("valid_" + FRAME_PATTERN % t),
                   conditioning.validity_mask()[t])
    print(out)
    return EXIT_OK


def cmd_eval(args) -> int:
    from nvs_forge.clips import VideoClip
    from nvs_forge.io_formats import read_mask, read_rgb

    def load_dir(path):
        files = sorted(Path(path).glob("frame_*.png"))
        if not files:
            raise ValidationError(f"{path}: no frame_*.png files")
        return VideoClip(np.stack([read_rgb(f) for f in files]))

    pred = load_dir(args.pred)
    gt = load_dir(args.gt)
    mask = None
    if args.mask:
        files = sorted(Path(args.mask).glob("*.png"))
        if not files:
            raise ValidationError(f"{args.mask}: no mask PNGs")
        mask = np.stack([read_mask(f) for f in files])
    report = evaluate_clip(pred, gt, mask)
    Path(args.out).write_text(report.to_json(indent=2))
    print(f"PSNR {report.psnr:.2f} dB  SSIM {report.ssim:.4f}"
          + (f"  mPSNR {report.m_psnr:.2f}" if report.m_psnr is not None else ""))
    return EXIT_OK


def cmd_pipeline(args) -> int:
    cfg = _pipeline_config_from(args)
    summary = run_pipeline(cfg)
    print(json.dumps({k: v for k, v in summary.items() if k != "out_dir"},
                     sort_keys=True, indent=2))
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _pipeline_config_from(args)
    rows = run_ablation(cfg, args.axis)
    for row in rows:
        psnr_s = "n/a" if row["psnr"] is None else f"{row['psnr']:.2f}"
        print(f"{args.axis}={row['variant']}: PSNR {psnr_s}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nvs-forge",
                                description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("gen-scene", help="generate synthetic scenes")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--benchmark", type=int, default=0, metavar="N",
                    help="generate an N-scene benchmark suite with held-out views")
    sp.add_argument("--width", type=int, default=32)
    sp.add_argument("--height", type=int, default=32)
    sp.add_argument("--frames", type=int, default=8)
    sp.set_defaults(fn=cmd_gen_scene)

    sp = sub.add_parser("gen-pairs", help="self-supervised pairs from a scene")
    sp.add_argument("--scene", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0)
    _add_region_args(sp)
    sp.set_defaults(fn=cmd_gen_pairs)

    sp = sub.add_parser("train", help="train the denoiser on a pair manifest")
    sp.add_argument("--pairs", required=True, help="pairs.jsonl manifest")
    sp.add_argument("--out", required=True, help="checkpoint path")
    sp.add_argument("--steps", type=int, required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--lr", type=float, default=2e-4)
    _add_model_args(sp)
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("finetune", help="test-time finetune on a scene")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--scene", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--m", type=int, default=200, help="gradient steps")
    sp.add_argument("--eta", type=float, default=1e-4, help="step size")
    sp.add_argument("--seed", type=int, default=0)
    _add_region_args(sp)
    _add_model_args(sp)
    sp.set_defaults(fn=cmd_finetune)

    sp = sub.add_parser("render-nvs", help="render a novel view with the model")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--scene", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--traj", help="pose file of the novel trajectory")
    sp.add_argument("--guidance", type=float, default=6.0)
    sp.add_argument("--steps", type=int, default=50)
    sp.add_argument("--topk", type=int, default=1)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--stack-background", action="store_true")
    sp.add_argument("--k", type=int, default=250)
    sp.add_argument("--kind", default="cosine", choices=("cosine", "linear"))
    sp.set_defaults(fn=cmd_render_nvs)

    sp = sub.add_parser("eval", help="PSNR/SSIM report for rendered frames")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--mask")
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("pipeline", help="gen-pairs, finetune, render, eval")
    sp.add_argument("--scene", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--ckpt", help="pretrained checkpoint (otherwise trains on the scene)")
    sp.add_argument("--steps", type=int, default=800, help="pretraining steps")
    sp.add_argument("--lr", type=float, default=2e-4)
    sp.add_argument("--m", type=int, default=200)
    sp.add_argument("--eta", type=float, default=1e-4)
    sp.add_argument("--guidance", type=float, default=6.0)
    sp.add_argument("--sample-steps", type=int, default=50)
    sp.add_argument("--topk", type=int, default=1)
    sp.add_argument("--skip-finetune", action="store_true")
    sp.add_argument("--stack-background", action="store_true")
    _add_region_args(sp)
    _add_model_args(sp)
    sp.set_defaults(fn=cmd_pipeline)

    sp = sub.add_parser("ablate", help="sweep one design axis")
    sp.add_argument("--scene", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--axis", required=True, choices=ABLATION_AXES)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--ckpt")
    sp.add_argument("--steps", type=int, default=800)
    sp.add_argument("--lr", type=float, default=2e-4)
    sp.add_argument("--m", type=int, default=200)
    sp.add_argument("--eta", type=float, default=1e-4)
    sp.add_argument("--guidance", type=float, default=6.0)
    sp.add_argument("--sample-steps", type=int, default=50)
    sp.add_argument("--topk", type=int, default=1)
    sp.add_argument("--skip-finetune", action="store_true")
    sp.add_argument("--stack-background", action="store_true")
    _add_region_args(sp)
    _add_model_args(sp)
    sp.set_defaults(fn=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _limit_threads()
        return args.fn(args)
    except (ValidationError, SceneFormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except StageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())

"""End-to-end orchestration: gen-pairs -> train/finetune -> render -> eval.

Stages communicate only through declared files; every run writes its
resolved configuration next to its outputs and an artifact manifest with
per-file SHA-256 hashes, so identical configs and seeds produce
bit-identical artifact trees. Stage failures surface as StageError with the
stage name; bad inputs surface as ValidationError before any compute.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from nvs_forge.camera import Trajectory
from nvs_forge.clips import VideoClip
from nvs_forge.denoiser import DenoiserConfig
from nvs_forge.diffusion import (
    TrainState,
    build_schedule,
    clip_to_latent,
    finetune,
    init_train_state,
    sample,
    top_k_select,
    train,
)
from nvs_forge.geometry import (
    CovisibilityMask,
    DynamicPointCloud,
    reconstruct_from_rgbd,
    render_clip,
    stack_static_background,
)
from nvs_forge.io_formats import (
    FRAME_PATTERN,
    SceneBundle,
    load_checkpoint,
    read_mask,
    read_pair_manifest,
    read_poses,
    read_rgb,
    read_scene,
    save_checkpoint,
    write_mask,
    write_pair_manifest,
    write_poses,
    write_rgb,
    write_scene,
)
from nvs_forge.metrics import evaluate_clip, psnr
from nvs_forge.pairs import (
    MaskStrategy,
    NoiseSpec,
    SamplingRegion,
    TrainingPair,
    inject_depth_noise,
    make_training_pair,
    masked_pair_from_clip,
    sample_trajectory,
    scene_center,
)
from nvs_forge.scenes import generate_benchmark, generate_scene, random_scene_spec


class ValidationError(ValueError):
    """Bad configuration or inputs, detected before any compute."""


class StageError(RuntimeError):
    """A pipeline stage failed; partial outputs are retained."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class PipelineConfig:
    """Resolved knobs of the full pipeline.

    Defaults mirror the reference setup where one exists (49-frame window,
    guidance scale 6, 50 sampling steps, M = 200 finetuning steps, sampling
    region of +-15 deg elevation, +-30 deg azimuth, +-0.15 radius); model
    and step counts are desk-scale.
    """

    scene: str = ""
    out_dir: str = ""
    # pair generation
    elevation_deg: float = 15.0
    azimuth_deg: float = 30.0
    radius_deviation: float = 0.15
    n_pairs: int = 5
    mask_strategy: str = "structured"
    mask_ratio: float = 0.5
    patch_size: int = 16
    noise_injection: bool = False
    noise_sigma_scale: float = 0.5
    stack_background: bool = False
    # diffusion model / schedule
    schedule_steps: int = 250
    schedule_kind: str = "cosine"
    hidden: int = 40
    blocks: int = 3
    emb_dim: int = 8
    window: int = 49
    # optimization
    train_steps: int = 800
    train_lr: float = 2e-4
    batch_size: int = 2
    finetune_steps: int = 200
    finetune_lr: float = 1e-4
    # sampling / evaluation
    guidance_scale: float = 6.0
    sample_steps: int = 50
    top_k: int = 1
    seed: int = 0
    skip_finetune: bool = False
    checkpoint: str | None = None

    def denoiser_config(self) -> DenoiserConfig:
        return DenoiserConfig(hidden=self.hidden, blocks=self.blocks,
                              emb_dim=self.emb_dim)

    def region(self, center) -> SamplingRegion:
        return SamplingRegion.from_degrees(center, self.elevation_deg,
                                           self.azimuth_deg, self.radius_deviation)

    def strategy(self) -> MaskStrategy:
        return MaskStrategy(kind=self.mask_strategy, mask_ratio=self.mask_ratio,
                            patch_size=self.patch_size)

    def validate(self):
        if not self.scene or not Path(self.scene).is_dir():
            raise ValidationError(f"scene directory not found: {self.scene!r}")
        if not self.out_dir:
            raise ValidationError("out_dir must be set")
        if self.n_pairs < 1:
            raise ValidationError(f"n_pairs must be >= 1, got {self.n_pairs}")
        if self.mask_strategy not in ("structured", "random", "tube"):
            raise ValidationError(f"unknown mask strategy {self.mask_strategy!r}")
        if self.schedule_steps < 2:
            raise ValidationError("schedule needs at least 2 steps")
        if not (1 <= self.sample_steps <= self.schedule_steps):
            raise ValidationError(
                f"sample_steps must lie in [1, {self.schedule_steps}]")
        if self.top_k < 1:
            raise ValidationError("top_k must be >= 1")
        for name in ("train_steps", "finetune_steps"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0")
        if self.checkpoint is not None and not Path(self.checkpoint).is_file():
            raise ValidationError(f"checkpoint not found: {self.checkpoint!r}")


# ---------------------------------------------------------------------------
# Scene helpers
# ---------------------------------------------------------------------------

def scene_cloud(bundle: SceneBundle, stack_background: bool = False) -> DynamicPointCloud:
    cloud = reconstruct_from_rgbd(bundle.frames, bundle.depths, bundle.traj,
                                  bundle.intrinsics, bundle.dyn_masks)
    if stack_background:
        cloud = stack_static_background(cloud)
    return cloud


def build_noise_model(bundle: SceneBundle, sigma_scale: float) -> NoiseSpec:
    """Empirical residual resampling when reference depth exists, otherwise
    the edge-weighted Gaussian fallback."""
    if bundle.ref_depths is not None:
        from nvs_forge.pairs import estimate_depth_residuals
        return NoiseSpec.empirical(
            estimate_depth_residuals(bundle.depths, bundle.ref_depths))
    return NoiseSpec.edge_gaussian(bundle.depths, sigma_scale)


def generate_pairs(bundle: SceneBundle, config: PipelineConfig, seed: int) -> list:
    """Self-supervised pairs from one scene (its frames, depths, poses only)."""
    cloud = scene_cloud(bundle)
    k = bundle.intrinsics
    center = scene_center(bundle.depths[0], bundle.traj[0], k)
    region = config.region(center)
    strategy = config.strategy()
    rng = np.random.default_rng(seed)
    noise = build_noise_model(bundle, config.noise_sigma_scale) \
        if config.noise_injection else None

    pairs = []
    source_clip = None
    for n in range(1, config.n_pairs + 1):
        traj_seed = int(rng.integers(0, 2**31 - 1))
        aux_seed = int(rng.integers(0, 2**31 - 1))
        novel = sample_trajectory(region, bundle.traj, traj_seed)
        if strategy.kind == "structured":
            pair = make_training_pair(cloud, bundle.traj, novel, k, trajectory_id=n)
            if noise is not None:
                pair = inject_depth_noise(pair, cloud, noise, aux_seed)
        else:
            if source_clip is None:
                source_clip, _ = render_clip(cloud, bundle.traj, k, splat_radius=0)
            pair = masked_pair_from_clip(source_clip, strategy, aux_seed,
                                         trajectory_id=n)
        pairs.append(pair)
    return pairs


def novel_conditioning(bundle: SceneBundle, novel_traj: Trajectory,
                       stack_background: bool = False, splat_radius: int = 1):
    """Render the reconstruction from the novel trajectory: the test-time
    conditioning clip (coverage becomes the validity mask)."""
    cloud = scene_cloud(bundle, stack_background=stack_background)
    clip, _ = render_clip(cloud, novel_traj, bundle.intrinsics,
                          splat_radius=splat_radius)
    return clip


def baseline_fill(conditioning: VideoClip) -> VideoClip:
    """Copy-covisible baseline: holes filled with the frame mean of the
    visible pixels (0.5 when a frame has none)."""
    frames = conditioning.frames.copy()
    valid = conditioning.validity_mask()
    for t in range(conditioning.frame_count):
        m = valid[t]
        fill = frames[t][m].mean(axis=0) if m.any() else np.float32(0.5)
        frames[t][~m] = fill
    return VideoClip(frames)


# ---------------------------------------------------------------------------
# Pair serialization
# ---------------------------------------------------------------------------

def write_pairs(pairs: list, out_dir, seed: int, strategy: str) -> Path:
    """Write pairs and return the manifest path (JSON-lines, one per pair)."""
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    records = []
    for i, pair in enumerate(pairs):
        pdir = root / f"pair_{i:03d}"
        for sub in ("cond", "target", "mask"):
            (pdir / sub).mkdir(parents=True, exist_ok=True)
        for t in range(pair.target.frame_count):
            write_rgb(pdir / "cond" / (FRAME_PATTERN % t), pair.conditioning.frames[t])
            write_rgb(pdir / "target" / (FRAME_PATTERN % t), pair.target.frames[t])
            write_mask(pdir / "mask" / (FRAME_PATTERN % t), pair.covis.mask[t])
        rec = {"id": i, "conditioning": f"pair_{i:03d}/cond",
               "target": f"pair_{i:03d}/target", "mask": f"pair_{i:03d}/mask",
               "seed": seed, "strategy": strategy,
               "trajectory_id": pair.trajectory_id, "trajectory": None}
        if pair.novel_traj is not None:
            write_poses(pdir / "novel_poses.txt", pair.novel_traj)
            rec["trajectory"] = f"pair_{i:03d}/novel_poses.txt"
        records.append(rec)
    manifest = root / "pairs.jsonl"
    write_pair_manifest(manifest, records)
    return manifest


def _read_clip_dir(path: Path) -> np.ndarray:
    files = sorted(path.glob("frame_*.png"))
    return np.stack([read_rgb(f) for f in files])


def read_pairs(manifest_path) -> list:
    """Load pairs back from a manifest written by write_pairs."""
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    pairs = []
    for rec in read_pair_manifest(manifest_path):
        cond = _read_clip_dir(root / rec["conditioning"])
        target = _read_clip_dir(root / rec["target"])
        mask_files = sorted((root / rec["mask"]).glob("frame_*.png"))
        mask = np.stack([read_mask(f) for f in mask_files])
        pairs.append(TrainingPair(
            conditioning=VideoClip(cond, mask),
            target=VideoClip(target),
            covis=CovisibilityMask(mask),
            trajectory_id=rec.get("trajectory_id", 0)))
    return pairs


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_state(path, state: TrainState, extra: dict | None = None):
    config = {"denoiser": state.config.to_dict(), "step": state.step}
    if extra:
        config.update(extra)
    order = [name for name, _ in state.config.param_shapes()]
    save_checkpoint(path, config, state.params, order)


def load_state(path) -> TrainState:
    config, params = load_checkpoint(path)
    dcfg = DenoiserConfig.from_dict(config["denoiser"])
    params = {k: v.astype(dcfg.np_dtype) for k, v in params.items()}
    zeros = {k: np.zeros_like(v) for k, v in params.items()}
    return TrainState(config=dcfg, params=params, adam_m=zeros,
                      adam_v={k: np.zeros_like(v) for k, v in params.items()},
                      step=int(config.get("step", 0)))


# ---------------------------------------------------------------------------
# Artifact hashing
# ---------------------------------------------------------------------------

def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


HASH_EXCLUDE = ("artifacts.json", "summary.json")


def tree_hash(root) -> dict:
    """Per-file SHA-256 of a directory tree plus a combined digest.

    The hash reports themselves (artifacts.json, summary.json) are excluded
    so re-running a pipeline into the same directory reproduces the digest.
    """
    root = Path(root)
    files = sorted(p for p in root.rglob("*")
                   if p.is_file() and p.name not in HASH_EXCLUDE)
    per_file = {str(p.relative_to(root)): file_sha256(p) for p in files}
    combined = hashlib.sha256()
    for rel, digest in per_file.items():
        combined.update(rel.encode())
        combined.update(bytes.fromhex(digest))
    return {"files": per_file, "combined": combined.hexdigest()}


# ---------------------------------------------------------------------------
# Full pipeline
# ---------------------------------------------------------------------------

def _stage(name: str):
    class _Ctx:
        def __enter__(self):
            return self

        def __exit__(self, exc_type, exc, tb):
            if exc is not None and not isinstance(exc, (StageError, ValidationError)):
                raise StageError(name, exc) from exc
            return False
    return _Ctx()


def run_pipeline(config: PipelineConfig, log_fn=print) -> dict:
    """gen-pairs -> (train) -> finetune -> render-nvs -> eval, in order.

    The scene must carry a held-out novel trajectory (novel_poses.txt);
    evaluation additionally needs its ground-truth renders (novel_rgb/).
    Returns a summary dict; all artifacts land under config.out_dir.
    """
    config.validate()
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.json").write_text(
        json.dumps(asdict(config), sort_keys=True, indent=2))

    bundle = read_scene(config.scene)
    if bundle.novel_traj is None:
        raise ValidationError(f"{config.scene}: missing novel_poses.txt "
                              "(pipeline needs a target trajectory)")
    sched = build_schedule(config.schedule_steps, config.schedule_kind)

    with _stage("gen-pairs"):
        pairs = generate_pairs(bundle, config, config.seed)
        manifest = write_pairs(pairs, out / "pairs", config.seed, config.mask_strategy)
        log_fn(f"[gen-pairs] {len(pairs)} pairs -> {manifest}")

    with _stage("train"):
        if config.checkpoint is not None:
            state = load_state(config.checkpoint)
            log_fn(f"[train] loaded checkpoint {config.checkpoint} (step {state.step})")
        else:
            state = init_train_state(config.denoiser_config(), config.seed)
            if config.train_steps > 0:
                state, losses = train(state, pairs, sched, config.train_steps,
                                      config.train_lr, config.seed + 1,
                                      batch_size=config.batch_size,
                                      window=config.window)
                log_fn(f"[train] {config.train_steps} steps, "
                       f"loss {losses[0]:.4f} -> {losses[-1]:.4f}")
        save_state(out / "model_pretrained.ckpt", state)

    with _stage("finetune"):
        if config.skip_finetune or config.finetune_steps == 0:
            log_fn("[finetune] skipped")
        else:
            state = finetune(state, pairs, sched, config.finetune_steps,
                             config.finetune_lr, config.seed + 2,
                             batch_size=config.batch_size, window=config.window)
            log_fn(f"[finetune] {config.finetune_steps} steps at "
                   f"eta {config.finetune_lr}")
        save_state(out / "model_final.ckpt", state)

    with _stage("render-nvs"):
        conditioning = novel_conditioning(bundle, bundle.novel_traj,
                                          stack_background=config.stack_background)
        z_cond = clip_to_latent(conditioning)
        if config.top_k > 1:
            if bundle.novel_frames is None:
                raise ValidationError("top-k selection needs ground-truth "
                                      "novel views (novel_rgb/)")
            pred, scores = top_k_select(state, z_cond, config.top_k,
                                        bundle.novel_frames, sched,
                                        guidance_scale=config.guidance_scale,
                                        num_steps=config.sample_steps,
                                        base_seed=config.seed + 3)
            log_fn(f"[render-nvs] top-{config.top_k} scores: "
                   + ", ".join(f"{s:.2f}" for s in scores))
        else:
            pred = sample(state, z_cond, sched, config.guidance_scale,
                          config.sample_steps, rng_seed=config.seed + 3)
        pred_dir = out / "pred"
        cond_dir = out / "conditioning"
        pred_dir.mkdir(exist_ok=True)
        cond_dir.mkdir(exist_ok=True)
        for t in range(pred.frame_count):
            write_rgb(pred_dir / (FRAME_PATTERN % t), pred.frames[t])
            write_rgb(cond_dir / (FRAME_PATTERN % t), conditioning.frames[t])
            write_mask(cond_dir / ("valid_" + FRAME_PATTERN % t),
                       conditioning.validity_mask()[t])
        log_fn(f"[render-nvs] wrote {pred.frame_count} frames")

    summary = {"out_dir": str(out)}
    with _stage("eval"):
        if bundle.novel_frames is not None:
            report = evaluate_clip(pred, bundle.novel_frames,
                                   conditioning.validity_mask())
            (out / "report.json").write_text(report.to_json(indent=2))
            base = baseline_fill(conditioning)
            summary.update({
                "psnr": report.psnr, "ssim": report.ssim,
                "m_psnr": report.m_psnr, "m_ssim": report.m_ssim,
                "baseline_psnr": psnr(base, bundle.novel_frames),
                "covered_fraction": float(conditioning.validity_mask().mean()),
            })
            log_fn(f"[eval] PSNR {report.psnr:.2f} dB (baseline "
                   f"{summary['baseline_psnr']:.2f} dB), SSIM {report.ssim:.4f}")
        else:
            log_fn("[eval] no ground-truth novel views; skipping metrics")

    hashes = tree_hash(out)
    (out / "artifacts.json").write_text(json.dumps(hashes, sort_keys=True, indent=2))
    summary["artifact_hash"] = hashes["combined"]
    (out / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=2))
    return summary


# ---------------------------------------------------------------------------
# Ablation sweeps
# ---------------------------------------------------------------------------

ABLATION_AXES = ("masking", "epochs", "topk", "noise", "background")


def run_ablation(config: PipelineConfig, axis: str, log_fn=print) -> list:
    """Sweep one axis; returns rows of {axis value, metrics} and writes
    ablation_<axis>.csv / .json under config.out_dir."""
    if axis not in ABLATION_AXES:
        raise ValidationError(f"unknown ablation axis {axis!r}; "
                              f"choose from {ABLATION_AXES}")
    config.validate()
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    if axis == "masking":
        variants = [("structured", {"mask_strategy": "structured"}),
                    ("tube", {"mask_strategy": "tube"}),
                    ("random", {"mask_strategy": "random"})]
    elif axis == "epochs":
        variants = [(str(m), {"finetune_steps": m}) for m in (0, 50, 100, 200)]
    elif axis == "topk":
        variants = [(str(k), {"top_k": k}) for k in (1, 2, 4, 8)]
    elif axis == "noise":
        variants = [("off", {"noise_injection": False}),
                    ("on", {"noise_injection": True})]
    else:  # background
        variants = [("unstacked", {"stack_background": False}),
                    ("stacked", {"stack_background": True})]

    rows = []
    for name, overrides in variants:
        sub = replace(config, out_dir=str(out / f"{axis}_{name}"), **overrides)
        log_fn(f"[ablate:{axis}] variant {name}")
        summary = run_pipeline(sub, log_fn=log_fn)
        rows.append({"axis": axis, "variant": name,
                     "psnr": summary.get("psnr"), "ssim": summary.get("ssim"),
                     "m_psnr": summary.get("m_psnr"),
                     "baseline_psnr": summary.get("baseline_psnr"),
                     "covered_fraction": summary.get("covered_fraction")})

    with open(out / f"ablation_{axis}.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    (out / f"ablation_{axis}.json").write_text(json.dumps(rows, indent=2))
    return rows


# ---------------------------------------------------------------------------
# Scene generation entry points (used by the CLI)
# ---------------------------------------------------------------------------

def scene_bundle_from_arrays(frames, depths, traj, k, dyn_masks=None,
                             novel_traj=None, novel_frames=None,
                             novel_depths=None, meta=None) -> SceneBundle:
    return SceneBundle(frames=frames, depths=depths, traj=traj, intrinsics=k,
                       dyn_masks=dyn_masks, novel_traj=novel_traj,
                       novel_frames=novel_frames, novel_depths=novel_depths,
                       meta=meta)


def write_generated_scene(out_dir, seed: int, width: int = 32, height: int = 32,
                          frame_count: int = 8) -> Path:
    """Generate one random scene (no held-out views) and write it."""
    spec = random_scene_spec(seed, width=width, height=height,
                             frame_count=frame_count)
    frames, depths, traj, k, dyn = generate_scene(spec, seed)
    bundle = scene_bundle_from_arrays(frames, depths, traj, k, dyn,
                                      meta={"seed": seed, "kind": "random"})
    write_scene(bundle, out_dir)
    return Path(out_dir)


def write_benchmark_scenes(out_dir, suite_seed: int, count: int = 5,
                           width: int = 32, height: int = 32,
                           frame_count: int = 8) -> list:
    """Generate the benchmark suite (held-out novel views included)."""
    cases = generate_benchmark(suite_seed, count=count, width=width,
                               height=height, frame_count=frame_count)
    paths = []
    for case in cases:
        path = Path(out_dir) / case.name
        bundle = scene_bundle_from_arrays(
            case.frames, case.depths, case.traj, case.intrinsics,
            case.dyn_masks, novel_traj=case.novel_traj,
            novel_frames=case.novel_frames, novel_depths=case.novel_depths,
            meta={"suite_seed": suite_seed, "scene_seed": case.scene_seed,
                  "kind": "benchmark"})
        write_scene(bundle, path)
        paths.append(path)
    return paths

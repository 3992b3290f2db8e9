"""nvs-forge: dynamic novel-view synthesis as structured video inpainting.

The package reconstructs per-frame point clouds from posed RGB-D video,
renders them from sampled novel camera trajectories to derive co-visibility
masks, manufactures self-supervised training pairs, and trains/finetunes a
small conditional diffusion denoiser that inpaints the hidden regions.

Subpackages of interest:

* :mod:`nvs_forge.camera` -- SE(3) poses, pinhole projection, trajectory
  interpolation and spherical camera placement.
* :mod:`nvs_forge.geometry` -- point-cloud reconstruction, z-buffered point
  splatting, co-visibility masks and static-background stacking.
* :mod:`nvs_forge.scenes` -- procedural dynamic scenes with analytic
  ground-truth depth, used as the evaluation benchmark.
* :mod:`nvs_forge.pairs` -- self-supervised training-pair generation.
* :mod:`nvs_forge.diffusion` -- toy pixel-space conditional diffusion model
  (training, test-time finetuning, guided ancestral sampling).
* :mod:`nvs_forge.metrics` -- PSNR / SSIM and their masked variants.
* :mod:`nvs_forge.pipeline` -- end-to-end orchestration used by the CLI.
"""

from nvs_forge.camera import (
    BehindCameraError,
    CameraPose,
    PinholeIntrinsics,
    SphericalCoord,
    Trajectory,
    backproject,
    interpolate_trajectory,
    pose_compose,
    pose_inverse,
    project,
    spherical_to_pose,
)
from nvs_forge.clips import VideoClip
from nvs_forge.geometry import (
    CovisibilityMask,
    DynamicPointCloud,
    FramePoints,
    RenderedFrame,
    align_scale,
    covisibility_mask,
    reconstruct_from_rgbd,
    render,
    render_clip,
    stack_static_background,
)
from nvs_forge.pairs import (
    MaskStrategy,
    NoiseSpec,
    SamplingRegion,
    TrainingPair,
    apply_mask_strategy,
    inject_depth_noise,
    make_training_pair,
    sample_trajectory,
    scene_center,
)
from nvs_forge.diffusion import (
    DiffusionSchedule,
    TrainState,
    build_schedule,
    denoiser_predict,
    finetune,
    forward_noise,
    init_train_state,
    sample,
    top_k_select,
    train_step,
)
from nvs_forge.metrics import MetricReport, evaluate_clip, psnr, ssim
from nvs_forge.scenes import SceneSpec, generate_benchmark, generate_scene

__version__ = "0.1.0"

__all__ = [
    "BehindCameraError",
    "CameraPose",
    "CovisibilityMask",
    "DiffusionSchedule",
    "DynamicPointCloud",
    "FramePoints",
    "MaskStrategy",
    "MetricReport",
    "NoiseSpec",
    "PinholeIntrinsics",
    "RenderedFrame",
    "SamplingRegion",
    "SceneSpec",
    "SphericalCoord",
    "Trajectory",
    "TrainState",
    "TrainingPair",
    "VideoClip",
    "align_scale",
    "apply_mask_strategy",
    "backproject",
    "build_schedule",
    "covisibility_mask",
    "denoiser_predict",
    "evaluate_clip",
    "finetune",
    "forward_noise",
    "generate_benchmark",
    "generate_scene",
    "init_train_state",
    "inject_depth_noise",
    "interpolate_trajectory",
    "make_training_pair",
    "pose_compose",
    "pose_inverse",
    "project",
    "psnr",
    "reconstruct_from_rgbd",
    "render",
    "render_clip",
    "sample",
    "sample_trajectory",
    "scene_center",
    "spherical_to_pose",
    "ssim",
    "stack_static_background",
    "top_k_select",
    "train_step",
]

"""Bit-exact readers and writers for every on-disk artifact.

Scene directory layout:

    rgb/frame_%05d.png        8-bit RGB
    depth/frame_%05d.png      16-bit grayscale, millimeters, 0 = invalid
    poses.txt                 one line per frame: t tx ty tz qx qy qz qw
                              (camera-to-world, unit quaternion, TUM order)
    intrinsics.txt            fx fy cx cy width height (single line)
    dyn_mask/frame_%05d.png   optional 8-bit 0/255 dynamic-object masks
    ref_depth/frame_%05d.png  optional reference depth for noise estimation
    spec.json                 optional generator metadata

Benchmark scenes additionally carry `novel_poses.txt`, `novel_rgb/` and
`novel_depth/` holding the held-out trajectory and its exact ground truth.

Floats are written with %.17g so write-read round trips are lossless, and a
file that was read back and re-written is byte-identical. Quaternions are
re-normalized on read with a warning when their norm is off by more than
1e-6. Depth values clamp at the 16-bit limit (65.535 m) with a warning.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from nvs_forge.camera import (
    CameraPose,
    PinholeIntrinsics,
    Trajectory,
    quat_to_rotmat,
    rotmat_to_quat,
)
from nvs_forge.clips import VideoClip

FRAME_PATTERN = "frame_%05d.png"
DEPTH_UNIT = 1000.0  # millimeters per meter
CHECKPOINT_MAGIC = b"NVSF"
CHECKPOINT_VERSION = 1


class SceneFormatError(ValueError):
    """Malformed or inconsistent on-disk scene data."""


# ---------------------------------------------------------------------------
# Images
# ---------------------------------------------------------------------------

def write_rgb(path, frame: np.ndarray):
    """Write one RGB frame ([0, 1] float or uint8) as 8-bit PNG."""
    f = np.asarray(frame)
    if f.dtype != np.uint8:
        f = np.clip(np.rint(f * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(f, mode="RGB").save(path)


def read_rgb(path) -> np.ndarray:
    """Read an 8-bit RGB PNG to float32 in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"))
    return arr.astype(np.float32) / 255.0


def write_depth(path, depth_m: np.ndarray):
    """Write a depth map (meters) as 16-bit millimeter PNG; 0 = invalid."""
    mm = np.rint(np.asarray(depth_m, dtype=np.float64) * DEPTH_UNIT)
    if np.any(mm > 65535):
        warnings.warn(f"{path}: depth exceeds 65.535 m, clamping", stacklevel=2)
    mm = np.clip(mm, 0, 65535).astype(np.uint16)
    Image.fromarray(mm).save(path)


def read_depth(path) -> np.ndarray:
    """Read a 16-bit millimeter depth PNG to meters (float64); 0 stays invalid."""
    with Image.open(path) as im:
        if im.mode not in ("I;16", "I"):
            raise SceneFormatError(f"{path}: depth PNG must be 16-bit, got mode {im.mode!r}")
        arr = np.asarray(im, dtype=np.uint32)
    return arr.astype(np.float64) / DEPTH_UNIT


def write_mask(path, mask: np.ndarray):
    Image.fromarray(np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)).save(path)


def read_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return arr >= 128


# ---------------------------------------------------------------------------
# Poses and intrinsics
# ---------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return "%.17g" % float(x)


def write_poses(path, traj: Trajectory, timestamps=None, quats=None):
    """Write a trajectory as `t tx ty tz qx qy qz qw` lines (camera-to-world).

    `quats` (N x 4, x y z w) overrides the matrix-to-quaternion conversion;
    passing the quaternions a file was parsed from makes the rewrite
    byte-identical (the conversion cycle wobbles by an ulp otherwise).
    """
    lines = []
    for i, pose in enumerate(traj.poses):
        t = float(timestamps[i]) if timestamps is not None else float(i)
        q = quats[i] if quats is not None else rotmat_to_quat(pose.rotation)
        vals = [t, *pose.translation, *q]
        lines.append(" ".join(_fmt(v) for v in vals))
    Path(path).write_text("\n".join(lines) + "\n")


def read_poses(path, return_quats: bool = False):
    """Parse a pose file; returns (Trajectory, timestamps[, quats])."""
    poses, stamps, quats = [], [], []
    text = Path(path).read_text()
    for ln, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        if len(fields) != 8:
            raise SceneFormatError(
                f"{path}:{ln}: expected 8 fields (t tx ty tz qx qy qz qw), "
                f"got {len(fields)}")
        try:
            vals = [float(f) for f in fields]
        except ValueError as e:
            raise SceneFormatError(f"{path}:{ln}: {e}") from None
        q = np.asarray(vals[4:8])
        norm = float(np.linalg.norm(q))
        if norm <= 0:
            raise SceneFormatError(f"{path}:{ln}: zero-norm quaternion")
        if abs(norm - 1.0) > 1e-6:
            warnings.warn(f"{path}:{ln}: quaternion norm {norm:.8f}, renormalizing",
                          stacklevel=2)
        q = q / norm
        poses.append(CameraPose(quat_to_rotmat(q), np.asarray(vals[1:4])))
        stamps.append(vals[0])
        quats.append(q)
    if not poses:
        raise SceneFormatError(f"{path}: no poses found")
    if return_quats:
        return Trajectory(tuple(poses)), np.asarray(stamps), np.asarray(quats)
    return Trajectory(tuple(poses)), np.asarray(stamps)


def write_intrinsics(path, k: PinholeIntrinsics):
    vals = [_fmt(k.fx), _fmt(k.fy), _fmt(k.cx), _fmt(k.cy), str(k.width), str(k.height)]
    Path(path).write_text(" ".join(vals) + "\n")


def read_intrinsics(path) -> PinholeIntrinsics:
    fields = Path(path).read_text().split()
    if len(fields) != 6:
        raise SceneFormatError(f"{path}: expected 6 fields (fx fy cx cy width height), "
                               f"got {len(fields)}")
    fx, fy, cx, cy = (float(f) for f in fields[:4])
    return PinholeIntrinsics(fx=fx, fy=fy, cx=cx, cy=cy,
                             width=int(fields[4]), height=int(fields[5]))


# ---------------------------------------------------------------------------
# Scene bundles
# ---------------------------------------------------------------------------

@dataclass
class SceneBundle:
    """In-memory contents of a scene directory."""

    frames: VideoClip
    depths: np.ndarray
    traj: Trajectory
    intrinsics: PinholeIntrinsics
    dyn_masks: np.ndarray | None = None
    ref_depths: np.ndarray | None = None
    novel_traj: Trajectory | None = None
    novel_frames: VideoClip | None = None
    novel_depths: np.ndarray | None = None
    timestamps: np.ndarray | None = None
    meta: dict | None = None


def _read_frame_dir(dirpath: Path, reader, what: str):
    files = sorted(dirpath.glob("frame_*.png"))
    if not files:
        raise SceneFormatError(f"{dirpath}: no {what} frames found")
    return np.stack([reader(f) for f in files]), len(files)


def write_scene(bundle: SceneBundle, path):
    """Write a bundle to a scene directory (layout in the module docstring)."""
    root = Path(path)
    (root / "rgb").mkdir(parents=True, exist_ok=True)
    (root / "depth").mkdir(exist_ok=True)
    t_count = bundle.frames.frame_count
    for t in range(t_count):
        write_rgb(root / "rgb" / (FRAME_PATTERN % t), bundle.frames.frames[t])
        write_depth(root / "depth" / (FRAME_PATTERN % t), bundle.depths[t])
    write_poses(root / "poses.txt", bundle.traj, bundle.timestamps)
    write_intrinsics(root / "intrinsics.txt", bundle.intrinsics)
    if bundle.dyn_masks is not None:
        (root / "dyn_mask").mkdir(exist_ok=True)
        for t in range(t_count):
            write_mask(root / "dyn_mask" / (FRAME_PATTERN % t), bundle.dyn_masks[t])
    if bundle.ref_depths is not None:
        (root / "ref_depth").mkdir(exist_ok=True)
        for t in range(t_count):
            write_depth(root / "ref_depth" / (FRAME_PATTERN % t), bundle.ref_depths[t])
    if bundle.novel_traj is not None:
        write_poses(root / "novel_poses.txt", bundle.novel_traj)
    if bundle.novel_frames is not None:
        (root / "novel_rgb").mkdir(exist_ok=True)
        for t in range(bundle.novel_frames.frame_count):
            write_rgb(root / "novel_rgb" / (FRAME_PATTERN % t), bundle.novel_frames.frames[t])
    if bundle.novel_depths is not None:
        (root / "novel_depth").mkdir(exist_ok=True)
        for t in range(len(bundle.novel_depths)):
            write_depth(root / "novel_depth" / (FRAME_PATTERN % t), bundle.novel_depths[t])
    if bundle.meta is not None:
        (root / "spec.json").write_text(json.dumps(bundle.meta, sort_keys=True, indent=2))


def read_scene(path) -> SceneBundle:
    """Read a scene directory, validating counts and formats."""
    root = Path(path)
    if not root.is_dir():
        raise SceneFormatError(f"{root}: not a directory")
    frames, n_rgb = _read_frame_dir(root / "rgb", read_rgb, "rgb")
    depths, n_d = _read_frame_dir(root / "depth", read_depth, "depth")
    if n_rgb != n_d:
        raise SceneFormatError(f"{root}: {n_rgb} rgb frames but {n_d} depth frames")
    traj, stamps = read_poses(root / "poses.txt")
    if traj.frame_count != n_rgb:
        raise SceneFormatError(f"{root}: {traj.frame_count} poses for {n_rgb} frames")
    k = read_intrinsics(root / "intrinsics.txt")
    if (k.height, k.width) != frames.shape[1:3]:
        raise SceneFormatError(
            f"{root}: intrinsics size {(k.height, k.width)} does not match "
            f"frames {frames.shape[1:3]}")

    bundle = SceneBundle(frames=VideoClip(frames), depths=depths, traj=traj,
                         intrinsics=k, timestamps=stamps)
    if (root / "dyn_mask").is_dir():
        masks, n_m = _read_frame_dir(root / "dyn_mask", read_mask, "dynamic-mask")
        if n_m != n_rgb:
            raise SceneFormatError(f"{root}: {n_m} dynamic masks for {n_rgb} frames")
        bundle.dyn_masks = masks
    if (root / "ref_depth").is_dir():
        ref, n_r = _read_frame_dir(root / "ref_depth", read_depth, "reference-depth")
        if n_r != n_rgb:
            raise SceneFormatError(f"{root}: {n_r} reference depths for {n_rgb} frames")
        bundle.ref_depths = ref
    if (root / "novel_poses.txt").exists():
        bundle.novel_traj, _ = read_poses(root / "novel_poses.txt")
    if (root / "novel_rgb").is_dir():
        nf, _ = _read_frame_dir(root / "novel_rgb", read_rgb, "novel rgb")
        bundle.novel_frames = VideoClip(nf)
    if (root / "novel_depth").is_dir():
        nd, _ = _read_frame_dir(root / "novel_depth", read_depth, "novel depth")
        bundle.novel_depths = nd
    if (root / "spec.json").exists():
        bundle.meta = json.loads((root / "spec.json").read_text())
    return bundle


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, config: dict, params: dict, order: list):
    """Versioned binary checkpoint.

    Header: magic, u32 version, u32 JSON length, JSON block (config plus the
    array manifest), then raw little-endian float32 blobs in declared order.
    """
    manifest = [{"name": n, "shape": list(params[n].shape)} for n in order]
    blob = json.dumps({"config": config, "arrays": manifest}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for n in order:
            fh.write(np.ascontiguousarray(params[n], dtype="<f4").tobytes())


def load_checkpoint(path):
    """Returns (config dict, params dict of float32 arrays)."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise SceneFormatError(f"{path}: bad checkpoint magic {magic!r}")
        version, jlen = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise SceneFormatError(f"{path}: unsupported checkpoint version {version}")
        head = json.loads(fh.read(jlen).decode())
        params = {}
        for entry in head["arrays"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            data = fh.read(4 * count)
            if len(data) != 4 * count:
                raise SceneFormatError(f"{path}: truncated blob for {entry['name']}")
            params[entry["name"]] = np.frombuffer(data, dtype="<f4").reshape(shape).copy()
        if fh.read(1):
            raise SceneFormatError(f"{path}: trailing bytes after declared blobs")
    return head["config"], params


# ---------------------------------------------------------------------------
# Pair manifests
# ---------------------------------------------------------------------------

def write_pair_manifest(path, records: list):
    """JSON-lines manifest, one record per training pair."""
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_pair_manifest(path) -> list:
    records = []
    with open(path) as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise SceneFormatError(f"{path}:{ln}: {e}") from None
    return records

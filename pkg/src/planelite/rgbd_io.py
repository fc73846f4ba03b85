"""RGB-D keyframe sequences: loading, blur scoring, projection, visibility.

Sequence layout (written by the synthetic generator and accepted for real
data): color PNG/JPG, 16-bit depth PNG, a trajectory file, and a plain-text
intrinsics file "fx fy cx cy width height". Trajectories store camera-to-world
and are inverted on load; poses held in FrameData are world-to-camera.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import uniform_filter1d

from planelite.config import PipelineConfig
from planelite.transforms import invert_pose, make_pose, orthonormalize, quat_to_rot

log = logging.getLogger(__name__)

DEPTH_SCALE_DEFAULTS = {"tum": 5000.0, "icl": 5000.0, "bundlefusion": 1000.0}
ASSOC_MAX_DT = 0.02  # seconds


@dataclass
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    depth_scale: float = 5000.0

    def __post_init__(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def to_text(self) -> str:
        return (
            f"{self.fx:.17g} {self.fy:.17g} {self.cx:.17g} {self.cy:.17g} "
            f"{self.width} {self.height}\n"
        )

    @classmethod
    def from_text(cls, text: str, depth_scale: float = 5000.0) -> "Intrinsics":
        vals = text.split()
        if len(vals) < 6:
            raise ValueError("intrinsics file needs 'fx fy cx cy width height'")
        return cls(
            fx=float(vals[0]), fy=float(vals[1]), cx=float(vals[2]), cy=float(vals[3]),
            width=int(vals[4]), height=int(vals[5]), depth_scale=depth_scale,
        )


@dataclass
class FrameData:
    """One keyframe: color in [0,1], depth in meters (0 = invalid), pose
    world-to-camera, and the correction grid owned by the optimizer."""

    index: int
    color: np.ndarray
    depth: np.ndarray
    pose: np.ndarray
    blur: float = 0.0
    grid: np.ndarray | None = None
    timestamp: float = 0.0
    color_path: str | None = None
    depth_path: str | None = None

    def __post_init__(self) -> None:
        R = self.pose[:3, :3]
        if abs(np.linalg.det(R) - 1.0) > 1e-6 or np.abs(R @ R.T - np.eye(3)).max() > 1e-6:
            raise ValueError(f"frame {self.index}: rotation not in SO(3)")
        if self.depth is not None and (self.depth < 0).any():
            raise ValueError(f"frame {self.index}: negative depth")


def luminance(image: np.ndarray) -> np.ndarray:
    """Rec.601 grayscale of an (H, W[, 3]) image in [0, 1]."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        return img
    return img[..., 0] * 0.299 + img[..., 1] * 0.587 + img[..., 2] * 0.114


def blurriness(image: np.ndarray) -> float:
    """Perceptual blur score in [0, 1]; higher = blurrier.

    Re-blurs the image with a strong 1-D box filter per axis and measures how
    much neighboring-pixel variation survives: an already-blurry image loses
    almost nothing. A constant image scores 0 by convention.
    """
    gray = luminance(image)
    blur_h = uniform_filter1d(gray, size=9, axis=1, mode="nearest")
    blur_v = uniform_filter1d(gray, size=9, axis=0, mode="nearest")

    d_f_h = np.abs(np.diff(gray, axis=1))
    d_f_v = np.abs(np.diff(gray, axis=0))
    d_b_h = np.abs(np.diff(blur_h, axis=1))
    d_b_v = np.abs(np.diff(blur_v, axis=0))

    v_h = np.maximum(0.0, d_f_h - d_b_h)
    v_v = np.maximum(0.0, d_f_v - d_b_v)

    s_f_h = float(d_f_h.sum())
    s_f_v = float(d_f_v.sum())
    b_h = (s_f_h - float(v_h.sum())) / s_f_h if s_f_h > 0 else 0.0
    b_v = (s_f_v - float(v_v.sum())) / s_f_v if s_f_v > 0 else 0.0
    return float(np.clip(max(b_h, b_v), 0.0, 1.0))


def select_keyframes(frames, interval: int) -> list[int]:
    """Sharpest frame per consecutive window of `interval` frames.

    Accepts FrameData objects or raw blur scores; ties go to the lower index.
    """
    if interval < 1:
        raise ValueError("interval must be >= 1")
    scores = [f.blur if isinstance(f, FrameData) else float(f) for f in frames]
    picks = []
    for start in range(0, len(scores), interval):
        window = scores[start : start + interval]
        best = min(range(len(window)), key=lambda i: (window[i], i))
        picks.append(start + best)
    return picks


# ---------------------------------------------------------------------------
# projection
# ---------------------------------------------------------------------------


def project(intr: Intrinsics, v: np.ndarray) -> np.ndarray:
    """Perspective projection of one homogeneous camera-space point to pixels.

    Raises for points at or behind the camera (v2 <= 1e-9).
    """
    v = np.asarray(v, dtype=np.float64)
    if v[2] <= 1e-9:
        raise ValueError("point behind camera")
    return np.array([v[0] * intr.fx / v[2] + intr.cx, v[1] * intr.fy / v[2] + intr.cy])


def project_batch(intr: Intrinsics, pts_cam: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vector projection: returns (pixels (N,2), in-front mask)."""
    p = np.asarray(pts_cam, dtype=np.float64)
    z = p[:, 2]
    ok = z > 1e-9
    zsafe = np.where(ok, z, 1.0)
    uv = np.stack(
        [p[:, 0] * intr.fx / zsafe + intr.cx, p[:, 1] * intr.fy / zsafe + intr.cy],
        axis=1,
    )
    return uv, ok


def unproject(intr: Intrinsics, pixel: np.ndarray, depth: float) -> np.ndarray:
    """Camera-space point of a pixel at the given depth."""
    x = (pixel[0] - intr.cx) / intr.fx * depth
    y = (pixel[1] - intr.cy) / intr.fy * depth
    return np.array([x, y, depth])


def visibility_mask(
    points_world: np.ndarray,
    normals_world: np.ndarray,
    frame: FrameData,
    intr: Intrinsics,
    cfg: PipelineConfig,
) -> np.ndarray:
    """Visibility of world points in a frame.

    A point is visible when its projection lands inside the image with a 1 px
    margin, the depth map agrees with its camera depth within vis_depth_tol,
    the depth sample is valid, and the angle between the point-to-camera ray
    and the surface normal stays under vis_max_angle_deg.
    """
    pts = np.asarray(points_world, dtype=np.float64)
    cam = pts @ frame.pose[:3, :3].T + frame.pose[:3, 3]
    uv, ok = project_batch(intr, cam)
    h, w = frame.depth.shape
    ok &= (
        (uv[:, 0] >= 1.0) & (uv[:, 0] <= w - 2.0)
        & (uv[:, 1] >= 1.0) & (uv[:, 1] <= h - 2.0)
    )
    px = np.clip(np.round(uv[:, 0]).astype(np.int64), 0, w - 1)
    py = np.clip(np.round(uv[:, 1]).astype(np.int64), 0, h - 1)
    dsample = frame.depth[py, px]
    ok &= dsample > 0
    ok &= np.abs(cam[:, 2] - dsample) < cfg.vis_depth_tol

    cam_center = -frame.pose[:3, :3].T @ frame.pose[:3, 3]
    to_cam = cam_center[None, :] - pts
    norms = np.linalg.norm(to_cam, axis=1)
    norms = np.where(norms > 1e-12, norms, 1.0)
    cosang = np.einsum("ij,ij->i", to_cam / norms[:, None], normals_world)
    ok &= cosang > np.cos(np.radians(cfg.vis_max_angle_deg))
    return ok


def visible(
    point_world: np.ndarray,
    normal_world: np.ndarray,
    frame: FrameData,
    intr: Intrinsics,
    cfg: PipelineConfig,
) -> bool:
    """Scalar form of visibility_mask."""
    return bool(
        visibility_mask(
            np.asarray(point_world)[None, :], np.asarray(normal_world)[None, :],
            frame, intr, cfg,
        )[0]
    )


# ---------------------------------------------------------------------------
# sequence loading
# ---------------------------------------------------------------------------


def read_color(path: Path) -> np.ndarray:
    img = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64)
    return img / 255.0


def read_depth(path: Path, depth_scale: float) -> np.ndarray:
    raw = np.asarray(Image.open(path), dtype=np.float64)
    return raw / depth_scale


def _read_listing(path: Path) -> list[tuple[float, str]]:
    out = []
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        t, name = line.split()[:2]
        out.append((float(t), name))
    return out


def _read_trajectory_tum(path: Path) -> list[tuple[float, np.ndarray]]:
    """TUM lines 't tx ty tz qx qy qz qw', camera-to-world."""
    out = []
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        vals = [float(x) for x in line.split()]
        if len(vals) != 8:
            raise ValueError(f"{path}: bad trajectory line with {len(vals)} fields")
        t, tx, ty, tz, qx, qy, qz, qw = vals
        R = quat_to_rot(qx, qy, qz, qw)
        out.append((t, make_pose(R, (tx, ty, tz))))
    return out


def _read_pose_matrix(path: Path) -> np.ndarray:
    vals = [float(x) for x in path.read_text().split()]
    if len(vals) != 16:
        raise ValueError(f"{path}: expected 16 values for a 4x4 pose")
    return np.array(vals, dtype=np.float64).reshape(4, 4)


def _associate(times_a, times_b, max_dt: float):
    """Nearest-timestamp pairing of sorted lists; one-to-one greedy by order."""
    pairs = []
    j = 0
    for i, ta in enumerate(times_a):
        while j + 1 < len(times_b) and abs(times_b[j + 1] - ta) <= abs(times_b[j] - ta):
            j += 1
        if abs(times_b[j] - ta) <= max_dt:
            pairs.append((i, j))
    return pairs


def load_intrinsics(dirpath: Path, depth_scale: float) -> Intrinsics:
    intr_path = dirpath / "intrinsics.txt"
    if not intr_path.is_file():
        raise FileNotFoundError(f"missing {intr_path}")
    return Intrinsics.from_text(intr_path.read_text(), depth_scale=depth_scale)


def load_sequence(
    dirpath: str | Path,
    fmt: str = "tum",
    cfg: PipelineConfig | None = None,
    with_images: bool = True,
) -> tuple[list[FrameData], Intrinsics]:
    """Load an RGB-D sequence with time-associated poses.

    fmt: 'tum' | 'icl' (TUM layout) | 'bundlefusion' (frame-XXXXXX.pose.txt).
    with_images=False skips pixel data (used when streaming blur scores).
    """
    cfg = cfg or PipelineConfig()
    dirpath = Path(dirpath)
    if fmt not in DEPTH_SCALE_DEFAULTS:
        raise ValueError(f"unknown sequence format {fmt!r}")
    depth_scale = cfg.depth_scale or DEPTH_SCALE_DEFAULTS[fmt]
    intr = load_intrinsics(dirpath, depth_scale)

    frames: list[FrameData] = []
    if fmt in ("tum", "icl"):
        rgb_list = _read_listing(dirpath / "rgb.txt")
        depth_list = _read_listing(dirpath / "depth.txt")
        traj_path = dirpath / "groundtruth.txt"
        if not traj_path.is_file():
            traj_path = dirpath / "trajectory.txt"
        if not traj_path.is_file():
            raise FileNotFoundError(f"missing trajectory in {dirpath}")
        traj = _read_trajectory_tum(traj_path)
        rgb_times = [t for t, _ in rgb_list]
        pairs_d = dict(_associate(rgb_times, [t for t, _ in depth_list], ASSOC_MAX_DT))
        pairs_p = dict(_associate(rgb_times, [t for t, _ in traj], ASSOC_MAX_DT))
        idx = 0
        for i, (t, rgb_name) in enumerate(rgb_list):
            if i not in pairs_d or i not in pairs_p:
                continue
            pose_c2w = traj[pairs_p[i]][1]
            pose = invert_pose(pose_c2w)
            pose[:3, :3] = orthonormalize(pose[:3, :3])
            cpath = dirpath / rgb_name
            dpath = dirpath / depth_list[pairs_d[i]][1]
            color = read_color(cpath) if with_images else None
            depth = read_depth(dpath, depth_scale) if with_images else None
            frames.append(
                FrameData(
                    index=idx, color=color, depth=depth, pose=pose, timestamp=t,
                    color_path=str(cpath), depth_path=str(dpath),
                )
            )
            idx += 1
    else:  # bundlefusion
        color_files = sorted(dirpath.glob("frame-*.color.*"))
        if not color_files:
            raise FileNotFoundError(f"no frame-XXXXXX.color.* files in {dirpath}")
        for idx, cpath in enumerate(color_files):
            stem = cpath.name.split(".")[0]
            dpath = dirpath / f"{stem}.depth.png"
            ppath = dirpath / f"{stem}.pose.txt"
            if not ppath.is_file():
                raise FileNotFoundError(f"missing pose file {ppath}")
            pose = invert_pose(_read_pose_matrix(ppath))  # stored camera-to-world
            pose[:3, :3] = orthonormalize(pose[:3, :3])
            color = read_color(cpath) if with_images else None
            depth = read_depth(dpath, depth_scale) if (with_images and dpath.is_file()) else None
            frames.append(
                FrameData(
                    index=idx, color=color, depth=depth, pose=pose, timestamp=float(idx),
                    color_path=str(cpath), depth_path=str(dpath) if dpath.is_file() else None,
                )
            )
    if not frames:
        raise ValueError(f"no associable frames found in {dirpath}")
    log.info("loaded %d frames from %s (%s)", len(frames), dirpath, fmt)
    return frames, intr

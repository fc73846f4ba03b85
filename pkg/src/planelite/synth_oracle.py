"""Synthetic planar scenes with exact ground truth.

Builds finely triangulated rooms and boxes whose vertices lie exactly on
known planes, renders RGB-D frames with a z-buffer rasterizer, and writes
sequences in the standard on-disk layout so the loader round-trips. All
randomness is seeded; noise-off renders are bit-reproducible.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from planelite.kernels import rasterize
from planelite.mesh_core import IndexedMesh
from planelite.partition import PlaneProxy
from planelite.rgbd_io import FrameData, Intrinsics
from planelite.transforms import (
    apply_pose,
    invert_pose,
    look_at_pose,
    make_pose,
    rot_to_quat,
    so3_exp,
)

log = logging.getLogger(__name__)


@dataclass
class Rect:
    """One rectangular surface: origin corner plus two edge vectors."""

    origin: np.ndarray
    edge_u: np.ndarray
    edge_v: np.ndarray

    def normal(self) -> np.ndarray:
        n = np.cross(self.edge_u, self.edge_v)
        return n / np.linalg.norm(n)


@dataclass
class Box:
    """Axis-aligned box resting on the floor; bottom face omitted."""

    center_xy: tuple[float, float]
    size: tuple[float, float, float]


@dataclass
class SceneSpec:
    room: tuple[float, float, float] | None = (4.0, 3.0, 2.5)
    boxes: list[Box] = field(default_factory=list)
    edge: float = 0.02                  # target mesh edge length
    pattern: str = "sine"               # sine | checker | flat
    pattern_seed: int = 7
    extra_rects: list[Rect] = field(default_factory=list)

    def validate(self) -> None:
        if self.edge <= 0:
            raise ValueError("edge length must be positive")
        if self.room is not None and min(self.room) <= 0:
            raise ValueError("room dimensions must be positive")
        for b in self.boxes:
            if min(b.size) <= 0:
                raise ValueError("box dimensions must be positive")


@dataclass
class SynthScene:
    mesh: IndexedMesh
    proxies: list[PlaneProxy]           # exact ground-truth planes
    face_plane: np.ndarray              # (m,) plane id per face
    pattern: str
    pattern_params: list[dict]
    room: tuple[float, float, float] | None

    def color_at(self, plane_ids: np.ndarray, points: np.ndarray) -> np.ndarray:
        """Albedo of world points on the given planes, in [0, 1]^3."""
        out = np.zeros((len(points), 3), dtype=np.float64)
        for pid in np.unique(plane_ids):
            sel = plane_ids == pid
            out[sel] = _eval_pattern(self.pattern_params[int(pid)], points[sel])
        return out

    def camera_inside(self, eye: np.ndarray, margin: float = 0.05) -> bool:
        if self.room is None:
            return True
        w, d, h = self.room
        return (
            margin <= eye[0] <= w - margin
            and margin <= eye[1] <= d - margin
            and margin <= eye[2] <= h - margin
        )


def _eval_pattern(params: dict, pts: np.ndarray) -> np.ndarray:
    u = pts @ params["axis_u"]
    v = pts @ params["axis_v"]
    kind = params["kind"]
    if kind == "flat":
        return np.tile(params["base"], (len(pts), 1))
    if kind == "checker":
        size = params["period"][0]
        par = (np.floor(u / size) + np.floor(v / size)) % 2
        return np.where(par[:, None] > 0.5, params["base"], 1.0 - params["base"])
    # smooth two-frequency sine plaid: gradient-rich everywhere
    out = np.empty((len(pts), 3))
    for c in range(3):
        pu, pv = params["period"][c], params["period"][(c + 1) % 3]
        ph_u, ph_v = params["phase"][c], params["phase"][(c + 1) % 3]
        out[:, c] = 0.5 + 0.22 * np.sin(2 * np.pi * (u / pu + ph_u)) + 0.22 * np.sin(
            2 * np.pi * (v / pv + ph_v)
        )
    return np.clip(out, 0.0, 1.0)


def _pattern_params(kind: str, plane_id: int, normal: np.ndarray, seed: int) -> dict:
    rng = np.random.default_rng(seed + 1013 * plane_id)
    k = int(np.argmin(np.abs(normal)))
    a = np.zeros(3)
    a[k] = 1.0
    axis_u = np.cross(a, normal)
    axis_u /= np.linalg.norm(axis_u)
    axis_v = np.cross(normal, axis_u)
    return {
        "kind": kind,
        "axis_u": axis_u,
        "axis_v": axis_v,
        "period": rng.uniform(0.13, 0.31, size=3),
        "phase": rng.uniform(0.0, 1.0, size=3),
        "base": rng.uniform(0.25, 0.75, size=3),
    }


def _rect_grid(rect: Rect, edge: float) -> tuple[np.ndarray, np.ndarray]:
    lu = np.linalg.norm(rect.edge_u)
    lv = np.linalg.norm(rect.edge_v)
    nu = max(int(np.ceil(lu / edge)), 1)
    nv = max(int(np.ceil(lv / edge)), 1)
    si = np.arange(nu + 1) / nu
    ti = np.arange(nv + 1) / nv
    grid = (
        rect.origin[None, None, :]
        + si[:, None, None] * rect.edge_u[None, None, :]
        + ti[None, :, None] * rect.edge_v[None, None, :]
    )
    verts = grid.reshape(-1, 3)

    def vid(i, j):
        return i * (nv + 1) + j

    faces = []
    for i in range(nu):
        for j in range(nv):
            a, b, c, d = vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)
            faces.append((a, b, c))
            faces.append((a, c, d))
    return verts, np.array(faces, dtype=np.int64)


def _room_rects(w: float, d: float, h: float) -> list[Rect]:
    o = np.array
    return [
        Rect(o([0.0, 0.0, 0.0]), o([w, 0, 0.0]), o([0, d, 0.0])),        # floor, n=+z
        Rect(o([0.0, 0.0, h]), o([0, d, 0.0]), o([w, 0, 0.0])),          # ceiling, n=-z
        Rect(o([0.0, 0.0, 0.0]), o([0, 0, h]), o([w, 0, 0])),            # wall y=0, n=+y
        Rect(o([0.0, d, 0.0]), o([w, 0, 0]), o([0, 0, h])),              # wall y=d, n=-y
        Rect(o([0.0, 0.0, 0.0]), o([0, d, 0]), o([0, 0, h])),            # wall x=0, n=+x
        Rect(o([w, 0.0, 0.0]), o([0, 0, h]), o([0, d, 0])),              # wall x=w, n=-x
    ]


def _box_rects(box: Box) -> list[Rect]:
    cx, cy = box.center_xy
    sx, sy, sz = box.size
    x0, x1 = cx - sx / 2, cx + sx / 2
    y0, y1 = cy - sy / 2, cy + sy / 2
    o = np.array
    return [
        Rect(o([x0, y0, sz]), o([x1 - x0, 0, 0]), o([0, y1 - y0, 0])),   # top, n=+z
        Rect(o([x0, y0, 0.0]), o([0, 0, sz]), o([x1 - x0, 0, 0])),       # side y0, n=-y
        Rect(o([x0, y1, 0.0]), o([x1 - x0, 0, 0]), o([0, 0, sz])),       # side y1, n=+y
        Rect(o([x0, y0, 0.0]), o([0, y1 - y0, 0]), o([0, 0, sz])),       # side x0, n=-x
        Rect(o([x1, y0, 0.0]), o([0, 0, sz]), o([0, y1 - y0, 0])),       # side x1, n=+x
    ]


def build_scene(spec: SceneSpec) -> SynthScene:
    """Triangulate the spec into a welded mesh with exact plane ground truth."""
    spec.validate()
    rects: list[Rect] = []
    if spec.room is not None:
        rects += _room_rects(*spec.room)
    for box in spec.boxes:
        rects += _box_rects(box)
    rects += spec.extra_rects
    if not rects:
        raise ValueError("scene has no surfaces")

    all_verts = []
    all_faces = []
    face_plane = []
    proxies = []
    params = []
    offset = 0
    for pid, rect in enumerate(rects):
        v, f = _rect_grid(rect, spec.edge)
        all_verts.append(v)
        all_faces.append(f + offset)
        face_plane.append(np.full(len(f), pid, dtype=np.int64))
        offset += len(v)
        n = rect.normal()
        proxies.append(
            PlaneProxy(normal=n, offset=float(-n @ rect.origin),
                       centroid=rect.origin + 0.5 * rect.edge_u + 0.5 * rect.edge_v)
        )
        params.append(_pattern_params(spec.pattern, pid, n, spec.pattern_seed))

    verts = np.concatenate(all_verts)
    faces = np.concatenate(all_faces)
    # weld exactly-coincident vertices (shared room edges/corners)
    key = np.round(verts / 1e-9).astype(np.int64)
    _, first, inverse = np.unique(key, axis=0, return_index=True, return_inverse=True)
    welded = verts[np.sort(first)]
    order = np.argsort(first, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    faces = rank[inverse][faces]

    mesh = IndexedMesh(welded, faces)
    scene = SynthScene(
        mesh=mesh,
        proxies=proxies,
        face_plane=np.concatenate(face_plane),
        pattern=spec.pattern,
        pattern_params=params,
        room=spec.room,
    )
    log.info("synthetic scene: %d planes, %d faces", len(proxies), mesh.n_faces)
    return scene


def render_frame(
    scene: SynthScene,
    pose: np.ndarray,
    intr: Intrinsics,
    index: int = 0,
    depth_sigma: float = 0.0,
    blur_sigma: float = 0.0,
    rng: np.random.Generator | None = None,
) -> FrameData:
    """Rasterize one frame: pattern albedo color plus z-buffer depth.

    Optional Gaussian depth noise and image blur are seeded via rng.
    """
    cam = apply_pose(pose, scene.mesh.vertices)
    depth, face_id, bary = rasterize(
        cam, scene.mesh.faces, intr.fx, intr.fy, intr.cx, intr.cy,
        intr.width, intr.height,
    )
    color = np.zeros((intr.height, intr.width, 3), dtype=np.float64)
    hit = face_id >= 0
    if hit.any():
        fids = face_id[hit]
        tri = scene.mesh.vertices[scene.mesh.faces[fids]]
        pts = np.einsum("nk,nkj->nj", bary[hit], tri)
        color[hit] = scene.color_at(scene.face_plane[fids], pts)
    depth = np.where(hit, depth, 0.0)

    if depth_sigma > 0 or blur_sigma > 0:
        if rng is None:
            rng = np.random.default_rng(0)
        if depth_sigma > 0:
            noise = rng.normal(0.0, depth_sigma, size=depth.shape)
            depth = np.where(hit, np.maximum(depth + noise, 0.0), 0.0)
        if blur_sigma > 0:
            color = np.stack(
                [gaussian_filter(color[..., c], blur_sigma) for c in range(3)], axis=-1
            )
            color = np.clip(color, 0.0, 1.0)
    return FrameData(index=index, color=color, depth=depth, pose=pose.copy())


def exact_visibility(
    scene: SynthScene,
    points: np.ndarray,
    pose: np.ndarray,
    intr: Intrinsics,
    tol: float = 1e-6,
) -> np.ndarray:
    """Ray-cast visibility oracle, independent of the rasterizer.

    A point is visible when it projects inside the image, and no triangle
    intersects the camera ray strictly closer than the point.
    """
    pts = np.asarray(points, dtype=np.float64)
    cam_center = -pose[:3, :3].T @ pose[:3, 3]
    cam_pts = apply_pose(pose, pts)
    ok = cam_pts[:, 2] > 1e-9
    zsafe = np.where(ok, cam_pts[:, 2], 1.0)
    u = cam_pts[:, 0] * intr.fx / zsafe + intr.cx
    v = cam_pts[:, 1] * intr.fy / zsafe + intr.cy
    ok &= (u >= 0) & (u <= intr.width - 1) & (v >= 0) & (v <= intr.height - 1)

    tri = scene.mesh.vertices[scene.mesh.faces]  # (F,3,3)
    v0, v1, v2 = tri[:, 0], tri[:, 1], tri[:, 2]
    e1 = v1 - v0
    e2 = v2 - v0
    out = np.zeros(len(pts), dtype=bool)
    for i in np.flatnonzero(ok):
        d = pts[i] - cam_center
        dist = np.linalg.norm(d)
        d = d / dist
        pvec = np.cross(d, e2)
        det = np.einsum("ij,ij->i", e1, pvec)
        valid = np.abs(det) > 1e-12
        inv = np.where(valid, 1.0 / np.where(valid, det, 1.0), 0.0)
        tvec = cam_center - v0
        bu = np.einsum("ij,ij->i", tvec, pvec) * inv
        qvec = np.cross(tvec, e1)
        bv = np.einsum("ij->i", d * qvec) * inv
        t = np.einsum("ij,ij->i", e2, qvec) * inv
        hit = valid & (bu >= -1e-12) & (bv >= -1e-12) & (bu + bv <= 1 + 1e-12) & (t > 1e-9)
        out[i] = not (hit & (t < dist - tol)).any()
    return out


def perturb(
    poses: list[np.ndarray],
    rot_deg: float,
    trans_mm: float,
    seed: int = 0,
) -> list[np.ndarray]:
    """Seeded pose perturbation: rotation <= rot_deg, camera shift <= trans_mm."""
    if rot_deg < 0 or trans_mm < 0:
        raise ValueError("noise magnitudes must be >= 0")
    rng = np.random.default_rng(seed)
    out = []
    for T in poses:
        R = T[:3, :3]
        t = T[:3, 3]
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        ang = np.radians(rng.uniform(0.0, rot_deg))
        dR = so3_exp(axis * ang)
        center = -R.T @ t
        shift_dir = rng.normal(size=3)
        shift_dir /= np.linalg.norm(shift_dir)
        shift = shift_dir * rng.uniform(0.0, trans_mm) / 1000.0
        Rn = dR @ R
        cn = center + shift
        out.append(make_pose(Rn, -Rn @ cn))
    return out


def orbit_poses(
    target: np.ndarray,
    eye_center: np.ndarray,
    radius: float,
    n: int,
    swing: float = 0.35,
) -> list[np.ndarray]:
    """Deterministic camera ring around eye_center, all looking at target."""
    poses = []
    for k in range(n):
        a = 2 * np.pi * k / max(n, 1)
        eye = eye_center + radius * np.array(
            [np.cos(a), np.sin(a), swing * np.sin(2 * a)]
        )
        poses.append(look_at_pose(eye, target))
    return poses


def write_sequence(
    scene: SynthScene,
    poses: list[np.ndarray],
    intr: Intrinsics,
    outdir: str | Path,
    depth_scale: float = 5000.0,
    fps: float = 30.0,
    depth_sigma: float = 0.0,
    blur_sigmas: list[float] | None = None,
    seed: int = 0,
) -> Path:
    """Render and write a TUM-layout sequence consumable by the loader."""
    outdir = Path(outdir)
    (outdir / "rgb").mkdir(parents=True, exist_ok=True)
    (outdir / "depth").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    for p in poses:
        eye = -p[:3, :3].T @ p[:3, 3]
        if not scene.camera_inside(eye):
            raise ValueError("camera path leaves the room")
    rgb_lines = []
    depth_lines = []
    gt_lines = []
    for i, pose in enumerate(poses):
        blur = blur_sigmas[i] if blur_sigmas else 0.0
        frame = render_frame(
            scene, pose, intr, index=i, depth_sigma=depth_sigma,
            blur_sigma=blur, rng=rng,
        )
        t = i / fps
        rgb_name = f"rgb/{i:06d}.png"
        depth_name = f"depth/{i:06d}.png"
        Image.fromarray(
            (np.clip(frame.color, 0, 1) * 255.0 + 0.5).astype(np.uint8), mode="RGB"
        ).save(outdir / rgb_name)
        d16 = np.clip(frame.depth * depth_scale + 0.5, 0, 65535).astype(np.uint16)
        Image.fromarray(d16).save(outdir / depth_name)
        rgb_lines.append(f"{t:.6f} {rgb_name}")
        depth_lines.append(f"{t:.6f} {depth_name}")
        c2w = invert_pose(pose)
        q = rot_to_quat(c2w[:3, :3])
        tx, ty, tz = c2w[:3, 3]
        gt_lines.append(
            f"{t:.6f} {tx:.17g} {ty:.17g} {tz:.17g} "
            f"{q[0]:.17g} {q[1]:.17g} {q[2]:.17g} {q[3]:.17g}"
        )
    (outdir / "rgb.txt").write_text("\n".join(rgb_lines) + "\n")
    (outdir / "depth.txt").write_text("\n".join(depth_lines) + "\n")
    (outdir / "groundtruth.txt").write_text("\n".join(gt_lines) + "\n")
    (outdir / "intrinsics.txt").write_text(intr.to_text())
    return outdir

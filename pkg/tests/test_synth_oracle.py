import numpy as np
import pytest

from planelite.rgbd_io import Intrinsics, load_sequence, visibility_mask
from planelite.synth_oracle import (
    Box,
    Rect,
    SceneSpec,
    build_scene,
    exact_visibility,
    orbit_poses,
    perturb,
    render_frame,
    write_sequence,
)
from planelite.transforms import look_at_pose, rotation_angle_deg

INTR = Intrinsics(fx=200.0, fy=200.0, cx=159.5, cy=119.5, width=320, height=240)


def test_empty_room_plane_and_face_counts():
    spec = SceneSpec(room=(4.0, 3.0, 2.5), edge=0.1)
    scene = build_scene(spec)
    assert len(scene.proxies) == 6
    area = 2 * (4 * 3 + 4 * 2.5 + 3 * 2.5)
    expected = 2 * area / 0.1**2
    assert abs(scene.mesh.n_faces - expected) <= 0.05 * expected


def test_room_with_box_plane_count():
    spec = SceneSpec(room=(4.0, 3.0, 2.5), edge=0.25,
                     boxes=[Box(center_xy=(2.0, 1.5), size=(0.8, 0.6, 0.9))])
    scene = build_scene(spec)
    assert len(scene.proxies) == 11  # 6 room + 5 visible box planes


def test_all_vertices_lie_on_ground_truth_planes():
    spec = SceneSpec(room=(2.0, 2.0, 2.0), edge=0.23,
                     boxes=[Box(center_xy=(1.0, 1.0), size=(0.5, 0.5, 0.5))])
    scene = build_scene(spec)
    v = scene.mesh.vertices
    dmin = np.full(len(v), np.inf)
    for proxy in scene.proxies:
        dmin = np.minimum(dmin, np.abs(v @ proxy.normal + proxy.offset))
    assert dmin.max() < 1e-12


def test_render_flat_wall_fills_view():
    wall = Rect(np.array([0.0, -1.0, -1.0]), np.array([0, 2.0, 0]), np.array([0, 0, 2.0]))
    spec = SceneSpec(room=None, extra_rects=[wall], edge=0.1, pattern="flat",
                     pattern_seed=11)
    scene = build_scene(spec)
    pose = look_at_pose(np.array([-1.0, 0.0, 0.0]), np.array([0.0, 0.0, 0.0]))
    frame = render_frame(scene, pose, INTR)
    assert (frame.depth > 0).all()
    np.testing.assert_allclose(frame.depth, 1.0, atol=1e-9)
    base = scene.pattern_params[0]["base"]
    np.testing.assert_allclose(frame.color, np.broadcast_to(base, frame.color.shape))


def test_principal_pixel_depth_matches_ray_cast():
    spec = SceneSpec(room=(2.0, 2.0, 2.0), edge=0.1)
    scene = build_scene(spec)
    # principal pixel must be at integer coordinates for an exact comparison
    intr = Intrinsics(fx=200.0, fy=200.0, cx=160.0, cy=120.0, width=320, height=240)
    eye = np.array([0.7, 1.0, 1.0])
    pose = look_at_pose(eye, np.array([2.0, 1.0, 1.0]))
    frame = render_frame(scene, pose, intr)
    # camera looks down +x at the x=2 wall from x=0.7
    assert abs(frame.depth[120, 160] - 1.3) < 1e-6


def test_zbuffer_occlusion_matches_ray_cast_oracle():
    spec = SceneSpec(room=(3.0, 3.0, 2.5), edge=0.15,
                     boxes=[Box(center_xy=(2.0, 1.5), size=(0.7, 0.7, 1.2))])
    scene = build_scene(spec)
    pose = look_at_pose(np.array([0.5, 1.5, 1.2]), np.array([3.0, 1.5, 1.2]))
    frame = render_frame(scene, pose, INTR)

    # probe points on the far wall: some behind the box, some not
    ys = np.linspace(0.3, 2.7, 25)
    zs = np.linspace(0.3, 2.2, 21)
    gy, gz = np.meshgrid(ys, zs)
    pts = np.stack([np.full(gy.size, 2.999999), gy.ravel(), gz.ravel()], axis=1)
    oracle = exact_visibility(scene, pts, pose, INTR)

    cam = pts @ pose[:3, :3].T + pose[:3, 3]
    u = cam[:, 0] * INTR.fx / cam[:, 2] + INTR.cx
    v = cam[:, 1] * INTR.fy / cam[:, 2] + INTR.cy
    inb = (u >= 1) & (u <= INTR.width - 2) & (v >= 1) & (v <= INTR.height - 2)
    px = np.round(u[inb]).astype(int)
    py = np.round(v[inb]).astype(int)
    zbuf_vis = np.abs(frame.depth[py, px] - cam[inb, 2]) < 0.02
    agree = float(np.mean(zbuf_vis == oracle[inb]))
    assert agree >= 0.99


def test_render_deterministic():
    spec = SceneSpec(room=(2.0, 2.0, 2.0), edge=0.2)
    scene = build_scene(spec)
    pose = look_at_pose(np.array([1.0, 1.0, 1.0]), np.array([2.0, 1.0, 1.0]))
    f1 = render_frame(scene, pose, INTR)
    f2 = render_frame(scene, pose, INTR)
    assert np.array_equal(f1.color, f2.color)
    assert np.array_equal(f1.depth, f2.depth)


def test_perturb_zero_noise_identity():
    poses = orbit_poses(np.zeros(3), np.array([0, 0, 1.0]), 0.5, 4)
    out = perturb(poses, 0.0, 0.0, seed=1)
    for a, b in zip(poses, out):
        np.testing.assert_allclose(a, b, atol=1e-12)


def test_perturb_respects_bounds():
    poses = orbit_poses(np.zeros(3), np.array([0, 0, 1.0]), 0.5, 12)
    out = perturb(poses, 0.5, 5.0, seed=2)
    for T, Tp in zip(poses, out):
        dR = Tp[:3, :3] @ T[:3, :3].T
        assert rotation_angle_deg(dR) <= 0.5 + 1e-9
        c = -T[:3, :3].T @ T[:3, 3]
        cp = -Tp[:3, :3].T @ Tp[:3, 3]
        assert np.linalg.norm(cp - c) <= 0.005 + 1e-12


def test_perturb_seed_determinism():
    poses = orbit_poses(np.zeros(3), np.array([0, 0, 1.0]), 0.5, 6)
    a = perturb(poses, 0.5, 5.0, seed=7)
    b = perturb(poses, 0.5, 5.0, seed=7)
    for x, y in zip(a, b):
        assert np.array_equal(x, y)
    c = perturb(poses, 0.5, 5.0, seed=8)
    assert any(not np.array_equal(x, y) for x, y in zip(a, c))


def test_sequence_roundtrip_poses_and_visibility(tmp_path):
    spec = SceneSpec(room=(2.5, 2.5, 2.2), edge=0.12)
    scene = build_scene(spec)
    center = np.array([1.25, 1.25, 1.1])
    poses = orbit_poses(center + np.array([0.5, 0.2, 0.0]), center, 0.4, 5)
    outdir = write_sequence(scene, poses, INTR, tmp_path / "seq")
    frames, intr = load_sequence(outdir, "tum")
    assert len(frames) == 5
    assert intr.fx == INTR.fx and intr.width == INTR.width
    for frame, pose in zip(frames, poses):
        np.testing.assert_allclose(frame.pose, pose, atol=1e-9)
        assert frame.depth.max() > 0.1  # depth actually written

    # loader visibility against the analytic ray-cast oracle
    from planelite.config import PipelineConfig

    rng = np.random.default_rng(0)
    sel = rng.choice(scene.mesh.n_vertices, size=800, replace=False)
    pts = scene.mesh.vertices[sel]
    # vertex normals: normal of the plane each vertex lies on
    dmat = np.stack([np.abs(pts @ p.normal + p.offset) for p in scene.proxies])
    pid = dmat.argmin(axis=0)
    normals = np.stack([scene.proxies[i].normal for i in pid])
    cfg = PipelineConfig()
    frame = frames[0]
    got = visibility_mask(pts, normals, frame, intr, cfg)
    oracle = exact_visibility(scene, pts, frame.pose, intr)
    # the loader's rule adds a 1 px margin and a 75-degree grazing cutoff on
    # top of pure occlusion; compare where those extras are safely inactive
    cam = pts @ frame.pose[:3, :3].T + frame.pose[:3, 3]
    zsafe = np.where(cam[:, 2] > 1e-9, cam[:, 2], 1.0)
    u = cam[:, 0] * intr.fx / zsafe + intr.cx
    v = cam[:, 1] * intr.fy / zsafe + intr.cy
    center = -frame.pose[:3, :3].T @ frame.pose[:3, 3]
    ray = center[None, :] - pts
    ray = ray / np.linalg.norm(ray, axis=1, keepdims=True)
    cosang = np.einsum("ij,ij->i", ray, normals)
    clear = (
        (cam[:, 2] > 1e-9)
        & (u > 4) & (u < intr.width - 5) & (v > 4) & (v < intr.height - 5)
        & (cosang > np.cos(np.radians(65.0)))
    )
    agree = float(np.mean(got[clear] == oracle[clear]))
    assert clear.sum() > 50
    assert agree >= 0.99

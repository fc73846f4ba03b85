import numpy as np
import pytest
from scipy.ndimage import gaussian_filter

from planelite.config import PipelineConfig
from planelite.joint_opt import (
    TexOptState,
    _rebuild_plane_obs,
    bilinear_sample,
    energy_offset,
    energy_photo,
    energy_plane,
    frame_residuals,
    gn_update_planes,
    gn_update_poses_and_grids,
    grid_warp,
    make_state,
    optimize,
    plane_project,
    plane_residuals,
    update_colors,
)
from planelite.rgbd_io import FrameData, Intrinsics
from planelite.texel_atlas import TexelSet
from planelite.transforms import look_at_pose, rotation_angle_deg, so3_exp

INTR = Intrinsics(fx=100.0, fy=100.0, cx=31.5, cy=23.5, width=64, height=48)


def _smooth_image(seed, h=48, w=64):
    rng = np.random.default_rng(seed)
    img = np.stack(
        [gaussian_filter(rng.uniform(size=(h, w)), 3.0) for _ in range(3)], axis=-1
    )
    img = (img - img.min()) / (img.max() - img.min() + 1e-12)
    return 0.1 + 0.8 * img


def _texels_from_points(p, plane_ids, colors=None):
    n = len(p)
    return TexelSet(
        p=np.asarray(p, dtype=np.float64),
        face_id=np.zeros(n, dtype=np.int64),
        bary=np.full((n, 3), 1.0 / 3.0),
        plane_id=np.asarray(plane_ids, dtype=np.int64),
        pix=np.zeros((n, 2), dtype=np.int64),
        color=np.full((n, 3), 0.5) if colors is None else np.asarray(colors, float),
        flags=np.zeros(n, dtype=np.uint8),
    )


def _manual_state(texels, frames, normals, offsets, cfg=None, vis=None):
    cfg = cfg or PipelineConfig()
    state = TexOptState(
        texels=texels, frames=frames, intr=INTR,
        normals=np.asarray(normals, float).copy(),
        offsets=np.asarray(offsets, float).copy(),
        grids=np.zeros((len(frames), cfg.grid_height, cfg.grid_width, 2)),
        cfg=cfg, lambda1=1.0, lambda2=cfg.lambda2,
    )
    if vis is None:
        vis = [np.arange(len(texels), dtype=np.int64) for _ in frames]
    state.vis = [np.asarray(v, dtype=np.int64) for v in vis]
    _rebuild_plane_obs(state)
    return state


def _frame(i, image, pose):
    return FrameData(index=i, color=image, depth=np.ones(image.shape[:2]), pose=pose)


def _floor_state(seed=0, n_texels=40, n_frames=2, cfg=None):
    """Texels on z=0 viewed from above with smooth random wall images."""
    rng = np.random.default_rng(seed)
    pts = np.concatenate(
        [rng.uniform(-0.2, 0.2, size=(n_texels, 2)), np.zeros((n_texels, 1))], axis=1
    )
    texels = _texels_from_points(pts, np.zeros(n_texels, dtype=int))
    frames = []
    for i in range(n_frames):
        eye = np.array([0.05 * i - 0.03, 0.04 * i - 0.02, 1.0 + 0.1 * i])
        pose = look_at_pose(eye, np.array([0.0, 0.0, 0.0]))
        frames.append(_frame(i, _smooth_image(seed + 17 * i), pose))
    return _manual_state(
        texels, frames, np.array([[0.0, 0, 1.0]]), np.array([0.0]), cfg=cfg
    )


# -- plane projection ---------------------------------------------------------


def test_plane_project_on_plane_is_identity():
    p = np.array([0.3, 0.4, 0.0])
    np.testing.assert_allclose(plane_project(p, np.array([0, 0, 1.0]), 0.0), p)


def test_plane_project_example():
    q = plane_project(np.array([0, 0, 1.0]), np.array([0, 0, 1.0]), 0.0)
    np.testing.assert_allclose(q, [0, 0, 0])


def test_plane_project_lands_on_plane():
    rng = np.random.default_rng(2)
    p = rng.normal(size=(100, 3))
    n = rng.normal(size=3)
    n /= np.linalg.norm(n)
    w = float(rng.normal())
    q = plane_project(p, np.broadcast_to(n, (100, 3)), w)
    assert np.abs(q @ n + w).max() < 1e-12


# -- energies -----------------------------------------------------------------


def test_energy_photo_zero_when_colors_match():
    state = _floor_state()
    update_colors(state)
    # single-frame visibility makes the mean equal the sample exactly
    state2 = _floor_state(n_frames=1)
    update_colors(state2)
    assert energy_photo(state2) < 1e-24


def test_energy_photo_single_texel_arithmetic():
    img = np.full((48, 64, 3), 0.25)
    pose = look_at_pose(np.array([0.0, 0.0, 1.0]), np.zeros(3))
    texels = _texels_from_points(np.zeros((1, 3)), [0], colors=[[0.5, 0.5, 0.5]])
    state = _manual_state(
        texels, [_frame(0, img, pose)], np.array([[0, 0, 1.0]]), np.array([0.0])
    )
    assert abs(energy_photo(state) - 3 * 0.0625) < 1e-12


def test_energy_photo_matches_bruteforce():
    state = _floor_state(seed=5, n_texels=10, n_frames=3)
    total = 0.0
    for i, frame in enumerate(state.frames):
        for t in state.vis[i]:
            p = state.texels.p[t]
            n = state.normals[state.texels.plane_id[t]]
            w = state.offsets[state.texels.plane_id[t]]
            q = p - (p @ n + w) * n
            v = frame.pose[:3, :3] @ q + frame.pose[:3, 3]
            u = np.array([v[0] * INTR.fx / v[2] + INTR.cx, v[1] * INTR.fy / v[2] + INTR.cy])
            gh, gw = state.grids[i].shape[:2]
            sx, sy = INTR.width / (gw - 1), INTR.height / (gh - 1)
            cx = min(int(u[0] // sx), gw - 2)
            cy = min(int(u[1] // sy), gh - 2)
            ax, ay = u[0] / sx - cx, u[1] / sy - cy
            warp = u.copy()
            for (dx, dy, wgt) in [
                (0, 0, (1 - ax) * (1 - ay)), (1, 0, ax * (1 - ay)),
                (0, 1, (1 - ax) * ay), (1, 1, ax * ay),
            ]:
                warp = warp + wgt * state.grids[i][cy + dy, cx + dx]
            x, y = warp
            ix, iy = int(x), int(y)
            fx, fy = x - ix, y - iy
            img = frame.color
            s = (
                (1 - fy) * ((1 - fx) * img[iy, ix] + fx * img[iy, ix + 1])
                + fy * ((1 - fx) * img[iy + 1, ix] + fx * img[iy + 1, ix + 1])
            )
            total += float(np.sum((state.texels.color[t] - s) ** 2))
    assert abs(energy_photo(state) - total) < 1e-10


def test_energy_plane_examples_and_bruteforce():
    pts = np.array([[0, 0, 0.1], [0, 0, 0.0]])
    texels = _texels_from_points(pts, [0, 0])
    state = _manual_state(texels, [], np.array([[0, 0, 1.0]]), np.array([0.0]), vis=[])
    assert abs(energy_plane(state) - 0.01) < 1e-15
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(30, 3))
    texels = _texels_from_points(pts, np.zeros(30, int))
    n = np.array([0.2, -0.3, 0.5])
    n /= np.linalg.norm(n)
    state = _manual_state(texels, [], n[None, :], np.array([0.7]), vis=[])
    brute = sum((p @ n + 0.7) ** 2 for p in pts)
    assert abs(energy_plane(state) - brute) < 1e-12


def test_energy_offset_examples():
    state = _floor_state(n_frames=2)
    assert energy_offset(state) == 0.0
    state.grids[0, 3, 4] = (3.0, 4.0)
    assert abs(energy_offset(state) - 25.0) < 1e-12
    rng = np.random.default_rng(1)
    state.grids[:] = rng.normal(size=state.grids.shape)
    assert abs(energy_offset(state) - float(np.sum(state.grids**2))) < 1e-9


# -- color update -------------------------------------------------------------


def test_update_colors_single_and_mean():
    img1 = np.full((48, 64, 3), 0.2)
    img2 = np.full((48, 64, 3), 0.4)
    pose = look_at_pose(np.array([0.0, 0.0, 1.0]), np.zeros(3))
    texels = _texels_from_points(np.zeros((1, 3)), [0])
    state = _manual_state(
        texels, [_frame(0, img1, pose), _frame(1, img2, pose)],
        np.array([[0, 0, 1.0]]), np.array([0.0]),
    )
    update_colors(state)
    np.testing.assert_allclose(state.texels.color[0], [0.3, 0.3, 0.3], atol=1e-15)

    state_single = _manual_state(
        _texels_from_points(np.zeros((1, 3)), [0]), [_frame(0, img1, pose)],
        np.array([[0, 0, 1.0]]), np.array([0.0]),
    )
    update_colors(state_single)
    np.testing.assert_allclose(state_single.texels.color[0], [0.2, 0.2, 0.2], atol=0)


def test_update_colors_is_argmin_of_photo_energy():
    state = _floor_state(seed=8, n_texels=15, n_frames=3)
    update_colors(state)
    base = energy_photo(state)
    rng = np.random.default_rng(0)
    for _ in range(10):
        t = int(rng.integers(0, len(state.texels)))
        save = state.texels.color[t].copy()
        state.texels.color[t] = save + rng.normal(0, 0.01, size=3)
        assert energy_photo(state) >= base - 1e-12
        state.texels.color[t] = save


def test_update_colors_flags_unseen():
    pose = look_at_pose(np.array([0.0, 0.0, 1.0]), np.zeros(3))
    img = np.full((48, 64, 3), 0.2)
    texels = _texels_from_points(np.array([[0.0, 0, 0], [50.0, 0, 0]]), [0, 0])
    state = _manual_state(
        texels, [_frame(0, img, pose)], np.array([[0, 0, 1.0]]), np.array([0.0]),
        vis=[[0]],
    )
    before = texels.color[1].copy()
    update_colors(state)
    assert state.texels.flags[1] == 1
    np.testing.assert_array_equal(state.texels.color[1], before)


# -- Jacobians ----------------------------------------------------------------


def _margin_ok(state, i, pose=None, grid=None):
    from planelite.joint_opt import _photo_forward

    pack = _photo_forward(state, i, state.vis[i], pose=pose, grid=grid)
    if not pack["inb"].all():
        return False
    w = pack["warped"]
    frac = w - np.floor(w)
    if not ((frac > 0.05) & (frac < 0.95)).all():
        return False
    gh, gw = state.grids[i].shape[:2]
    sx, sy = INTR.width / (gw - 1), INTR.height / (gh - 1)
    gfrac_x = pack["uv"][:, 0] / sx
    gfrac_y = pack["uv"][:, 1] / sy
    gx = gfrac_x - np.floor(gfrac_x)
    gy = gfrac_y - np.floor(gfrac_y)
    return ((gx > 0.05) & (gx < 0.95) & (gy > 0.05) & (gy < 0.95)).all()


def _fd_check(analytic, residual_fn, params, h_scale, rel_tol=1e-4):
    """Central finite differences column by column against the analytic J."""
    J = analytic
    n_par = len(params)
    cols = []
    for k in range(n_par):
        hp = params.copy()
        hm = params.copy()
        hp[k] += h_scale[k]
        hm[k] -= h_scale[k]
        rp = residual_fn(hp)
        rm = residual_fn(hm)
        cols.append((rp - rm) / (2 * h_scale[k]))
    J_fd = np.stack(cols, axis=1)
    scale = max(np.abs(J_fd).max(), 1e-12)
    rel = np.abs(J - J_fd).max() / scale
    return rel


def test_plane_jacobian_matches_fd():
    worst = 0.0
    tested = 0
    seed = 0
    while tested < 20:
        seed += 1
        state = _floor_state(seed=seed, n_texels=12, n_frames=2)
        rng = np.random.default_rng(seed)
        n = np.array([0, 0, 1.0]) + rng.normal(0, 0.02, size=3)
        n /= np.linalg.norm(n)
        w = float(rng.normal(0, 0.01))
        state.normals[0] = n
        state.offsets[0] = w
        if not all(_margin_ok(state, i) for i in range(len(state.frames))):
            continue
        tested += 1
        _, J = plane_residuals(state, 0, n, w)

        def res(params):
            r, _ = plane_residuals(state, 0, params[:3], params[3])
            return r

        params = np.append(n, w)
        rel = _fd_check(J, res, params, np.full(4, 1e-7))
        worst = max(worst, rel)
    assert worst < 1e-4, f"plane Jacobian rel err {worst}"


def test_pose_and_grid_jacobian_matches_fd():
    worst_pose = 0.0
    worst_grid = 0.0
    tested = 0
    seed = 100
    while tested < 20:
        seed += 1
        cfg = PipelineConfig(grid_width=4, grid_height=3)  # small grid: full FD
        state = _floor_state(seed=seed, n_texels=10, n_frames=1, cfg=cfg)
        rng = np.random.default_rng(seed)
        state.grids[0] = rng.normal(0, 0.3, size=state.grids[0].shape)
        if not _margin_ok(state, 0):
            continue
        tested += 1
        pose = state.frames[0].pose
        grid = state.grids[0]
        r0, J = frame_residuals(state, 0, pose, grid)
        J = J.toarray()
        ngrid = grid.size

        def res(params):
            om = params[:3]
            dt = params[3:6]
            dR = so3_exp(om)
            pose_try = pose.copy()
            pose_try[:3, :3] = dR @ pose[:3, :3]
            pose_try[:3, 3] = dR @ pose[:3, 3] + dt
            grid_try = grid + params[6:].reshape(grid.shape)
            r, _ = frame_residuals(state, 0, pose_try, grid_try)
            return r

        params = np.zeros(6 + ngrid)
        h = np.concatenate([np.full(6, 1e-7), np.full(ngrid, 1e-6)])
        # split the relative error by block for a sharper diagnostic
        cols = []
        for k in range(len(params)):
            hp = params.copy(); hm = params.copy()
            hp[k] += h[k]; hm[k] -= h[k]
            cols.append((res(hp) - res(hm)) / (2 * h[k]))
        J_fd = np.stack(cols, axis=1)
        scale = max(np.abs(J_fd).max(), 1e-12)
        rel_pose = np.abs(J[:, :6] - J_fd[:, :6]).max() / scale
        rel_grid = np.abs(J[:, 6:] - J_fd[:, 6:]).max() / scale
        worst_pose = max(worst_pose, rel_pose)
        worst_grid = max(worst_grid, rel_grid)
    assert worst_pose < 1e-4, f"pose Jacobian rel err {worst_pose}"
    assert worst_grid < 1e-4, f"grid Jacobian rel err {worst_grid}"


# -- Gauss-Newton blocks ------------------------------------------------------


def test_plane_update_stationary_at_zero_residual():
    state = _floor_state(seed=3, n_texels=25, n_frames=1)
    update_colors(state)  # single frame: colors equal samples, residual = 0
    n0 = state.normals[0].copy()
    w0 = float(state.offsets[0])
    gn_update_planes(state)
    assert np.linalg.norm(state.normals[0] - n0) < 1e-8
    assert abs(state.offsets[0] - w0) < 1e-8


def test_plane_update_recovers_tilt():
    state = _floor_state(seed=4, n_texels=60, n_frames=3)
    # ground-truth colors from the true plane, then tilt the plane 1 degree
    update_colors(state)
    ang = np.radians(1.0)
    state.normals[0] = np.array([np.sin(ang), 0.0, np.cos(ang)])
    state.offsets[0] = 0.003
    ec = energy_photo(state)
    ep = energy_plane(state)
    state.lambda1 = ec / ep
    for _ in range(10):
        gn_update_planes(state)
    tilt = np.degrees(np.arccos(np.clip(state.normals[0] @ [0, 0, 1.0], -1, 1)))
    assert tilt < 0.1
    assert abs(state.offsets[0]) < 1e-3


def test_pose_update_stationary_at_zero_residual():
    state = _floor_state(seed=6, n_texels=30, n_frames=1)
    update_colors(state)
    pose0 = state.frames[0].pose.copy()
    gn_update_poses_and_grids(state)
    dR = state.frames[0].pose[:3, :3] @ pose0[:3, :3].T
    assert rotation_angle_deg(dR) < 1e-8
    assert np.linalg.norm(state.frames[0].pose[:3, 3] - pose0[:3, 3]) < 1e-8
    assert np.abs(state.grids[0]).max() < 1e-8


def test_frame_with_few_texels_skipped():
    state = _floor_state(seed=7, n_texels=5, n_frames=1)
    update_colors(state)
    pose0 = state.frames[0].pose.copy()
    gn_update_poses_and_grids(state)  # 5 < 20 visible texels: must skip
    np.testing.assert_array_equal(state.frames[0].pose, pose0)


# -- outer loop ---------------------------------------------------------------


def _rendered_state(cfg, corner_scene, corner_intrinsics, corner_poses, corner_frames,
                    rot_deg=0.0, trans_mm=0.0, density=0.04):
    from planelite.partition import merge_planes, partition_planes
    from planelite.synth_oracle import perturb
    from planelite.texel_atlas import build_patches_and_texels
    import copy

    clusters = merge_planes(corner_scene.mesh, partition_planes(corner_scene.mesh, cfg), cfg)
    patches, texels = build_patches_and_texels(corner_scene.mesh, clusters, density)
    frames = [
        FrameData(index=f.index, color=f.color, depth=f.depth, pose=f.pose.copy())
        for f in corner_frames
    ]
    if rot_deg or trans_mm:
        noisy = perturb([f.pose for f in frames], rot_deg, trans_mm, seed=13)
        for f, p in zip(frames, noisy):
            f.pose = p
    state = make_state(texels, frames, clusters.proxies, corner_intrinsics, cfg)
    return state


@pytest.fixture(scope="module")
def optimized_perturbed(request):
    corner_scene = request.getfixturevalue("corner_scene")
    corner_intrinsics = request.getfixturevalue("corner_intrinsics")
    corner_poses = request.getfixturevalue("corner_poses")
    corner_frames = request.getfixturevalue("corner_frames")
    cfg = PipelineConfig(max_outer=30, tol=1e-7)
    state = _rendered_state(
        cfg, corner_scene, corner_intrinsics, corner_poses, corner_frames,
        rot_deg=0.5, trans_mm=5.0,
    )
    optimize(state)
    return state, corner_poses


def test_optimize_already_optimal_terminates_immediately(corner_scene, corner_intrinsics,
                                                         corner_poses, corner_frames):
    cfg = PipelineConfig(max_outer=10, tol=1e-5)
    state = _rendered_state(cfg, corner_scene, corner_intrinsics, corner_poses,
                            corner_frames)
    optimize(state)
    assert state.trace[-1]["iteration"] <= 2
    assert state.trace[-1]["E_tex"] <= state.trace[0]["E_tex"] + 1e-10


def test_lambda1_balances_initial_energies(optimized_perturbed):
    state, _ = optimized_perturbed
    row0 = state.trace[0]
    if row0["E_p"] > 1e-300:
        assert abs(row0["E_c"] - state.lambda1 * row0["E_p"]) / row0["E_c"] < 1e-9


def test_energy_trace_monotone_nonincreasing(optimized_perturbed):
    state, _ = optimized_perturbed
    ets = [row["E_tex"] for row in state.trace]
    for a, b in zip(ets, ets[1:]):
        assert b <= a * (1 + 1e-12) + 1e-15


def test_optimizer_recovers_poses(optimized_perturbed):
    state, gt_poses = optimized_perturbed
    for frame, gt in zip(state.frames, gt_poses):
        dR = frame.pose[:3, :3] @ gt[:3, :3].T
        ang = rotation_angle_deg(dR)
        c = -frame.pose[:3, :3].T @ frame.pose[:3, 3]
        cg = -gt[:3, :3].T @ gt[:3, 3]
        assert ang < 0.05, f"rotation error {ang} deg"
        assert np.linalg.norm(c - cg) < 5e-4, f"center error {np.linalg.norm(c-cg)}"


def test_optimizer_halves_photometric_energy(optimized_perturbed):
    state, _ = optimized_perturbed
    drop = state.trace[0]["E_tex"] - state.trace[-1]["E_tex"]
    assert drop >= 0.5 * state.trace[0]["E_c"]

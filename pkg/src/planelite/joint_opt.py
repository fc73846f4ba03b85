"""Alternating minimization of the texture objective.

The total energy couples photometric consistency (texel color vs. warped
image samples), a plane-fit penalty on texel points, and a magnitude penalty
on the per-frame correction grids:

    E = E_photo + lambda1 * E_plane + lambda2 * E_grid

Each outer iteration updates colors in closed form (per-texel mean), then the
plane parameters per plane by Gauss-Newton, then pose plus correction grid
per frame by a joint Gauss-Newton step. Step halving keeps the recorded
energy trace non-increasing. Per-plane and per-frame updates are independent,
so results are identical at any thread count.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from planelite.config import PipelineConfig
from planelite.rgbd_io import FrameData, Intrinsics, visibility_mask
from planelite.texel_atlas import FLAG_NEVER_VISIBLE, TexelSet
from planelite.transforms import orthonormalize, so3_exp

log = logging.getLogger(__name__)

MIN_FRAME_TEXELS = 20
MAX_HALVINGS = 5


# ---------------------------------------------------------------------------
# elemental math
# ---------------------------------------------------------------------------


def plane_project(p: np.ndarray, normal: np.ndarray, offset) -> np.ndarray:
    """Project points onto planes: q = p - (p.n + w) n. Broadcasts per-row."""
    p = np.asarray(p, dtype=np.float64)
    n = np.asarray(normal, dtype=np.float64)
    if p.ndim == 1:
        return p - (p @ n + offset) * n
    d = np.einsum("ij,ij->i", p, n) + offset
    return p - d[:, None] * n


def bilinear_sample(img: np.ndarray, xy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear values and exact in-cell gradients of an (H, W, C) image.

    xy must lie inside [0, W-1] x [0, H-1]; callers mask beforehand.
    """
    h, w = img.shape[:2]
    x = xy[:, 0]
    y = xy[:, 1]
    ix = np.clip(np.floor(x).astype(np.int64), 0, w - 2)
    iy = np.clip(np.floor(y).astype(np.int64), 0, h - 2)
    fx = (x - ix)[:, None]
    fy = (y - iy)[:, None]
    c00 = img[iy, ix]
    c10 = img[iy, ix + 1]
    c01 = img[iy + 1, ix]
    c11 = img[iy + 1, ix + 1]
    val = (1 - fy) * ((1 - fx) * c00 + fx * c10) + fy * ((1 - fx) * c01 + fx * c11)
    gx = (1 - fy) * (c10 - c00) + fy * (c11 - c01)
    gy = (1 - fx) * (c01 - c00) + fx * (c11 - c10)
    grad = np.stack([gx, gy], axis=-1)  # (N, C, 2)
    return val, grad


def grid_warp(
    grid: np.ndarray, uv: np.ndarray, width: int, height: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Bilinear correction-grid warp F(u) = u + sum_l delta_l(u) f_l.

    grid: (GH, GW, 2) control offsets covering [0, W] x [0, H].
    Returns (warped (N,2), dFdu (N,2,2), ctrl_idx (N,4), ctrl_w (N,4)) where
    ctrl_idx are flat control indices (gy * GW + gx) of the 4 active corners.
    """
    gh, gw = grid.shape[:2]
    sx = width / (gw - 1)
    sy = height / (gh - 1)
    gxf = uv[:, 0] / sx
    gyf = uv[:, 1] / sy
    cx = np.clip(np.floor(gxf).astype(np.int64), 0, gw - 2)
    cy = np.clip(np.floor(gyf).astype(np.int64), 0, gh - 2)
    ax = gxf - cx
    ay = gyf - cy

    w00 = (1 - ax) * (1 - ay)
    w10 = ax * (1 - ay)
    w01 = (1 - ax) * ay
    w11 = ax * ay
    ctrl_w = np.stack([w00, w10, w01, w11], axis=1)
    ctrl_idx = np.stack(
        [cy * gw + cx, cy * gw + cx + 1, (cy + 1) * gw + cx, (cy + 1) * gw + cx + 1],
        axis=1,
    )
    flat = grid.reshape(-1, 2)
    offs = np.einsum("nk,nkj->nj", ctrl_w, flat[ctrl_idx])
    warped = uv + offs

    f = flat[ctrl_idx]  # (N, 4, 2)
    ddu = np.stack([-(1 - ay) / sx, (1 - ay) / sx, -ay / sx, ay / sx], axis=1)
    ddv = np.stack([-(1 - ax) / sy, -ax / sy, (1 - ax) / sy, ax / sy], axis=1)
    dFdu = np.zeros((len(uv), 2, 2))
    dFdu[:, 0, 0] = 1 + np.einsum("nk,nk->n", ddu, f[..., 0])
    dFdu[:, 0, 1] = np.einsum("nk,nk->n", ddv, f[..., 0])
    dFdu[:, 1, 0] = np.einsum("nk,nk->n", ddu, f[..., 1])
    dFdu[:, 1, 1] = 1 + np.einsum("nk,nk->n", ddv, f[..., 1])
    return warped, dFdu, ctrl_idx, ctrl_w


# ---------------------------------------------------------------------------
# state
# ---------------------------------------------------------------------------


@dataclass
class TexOptState:
    texels: TexelSet
    frames: list[FrameData]
    intr: Intrinsics
    normals: np.ndarray              # (P, 3) current plane normals
    offsets: np.ndarray              # (P,)
    grids: np.ndarray                # (K, GH, GW, 2)
    cfg: PipelineConfig
    lambda1: float = 1.0
    lambda2: float = 0.1
    vis: list[np.ndarray] = field(default_factory=list)
    trace: list[dict] = field(default_factory=list)
    plane_obs: list[list[tuple[int, np.ndarray]]] = field(default_factory=list)

    @property
    def n_planes(self) -> int:
        return len(self.normals)


def make_state(
    texels: TexelSet,
    frames: list[FrameData],
    proxies,
    intr: Intrinsics,
    cfg: PipelineConfig,
) -> TexOptState:
    """Initialize the optimizer: copy plane params, zero grids, visibility."""
    normals = np.stack([p.normal for p in proxies]).astype(np.float64)
    offsets = np.array([p.offset for p in proxies], dtype=np.float64)
    grids = np.zeros((len(frames), cfg.grid_height, cfg.grid_width, 2), dtype=np.float64)
    state = TexOptState(
        texels=texels, frames=frames, intr=intr,
        normals=normals.copy(), offsets=offsets.copy(), grids=grids,
        cfg=cfg, lambda2=cfg.lambda2,
    )
    refresh_visibility(state)
    return state


def refresh_visibility(state: TexOptState) -> None:
    """Full visibility recompute at current planes and poses."""
    tx = state.texels
    q = plane_project(tx.p, state.normals[tx.plane_id], state.offsets[tx.plane_id])
    normals = state.normals[tx.plane_id]
    state.vis = []
    for frame in state.frames:
        mask = visibility_mask(q, normals, frame, state.intr, state.cfg)
        state.vis.append(np.flatnonzero(mask).astype(np.int64))
    _rebuild_plane_obs(state)


def _rebuild_plane_obs(state: TexOptState) -> None:
    """Per-plane observation lists: (frame index, texel ids) sorted groups."""
    P = state.n_planes
    obs: list[list[tuple[int, np.ndarray]]] = [[] for _ in range(P)]
    for i, S in enumerate(state.vis):
        if len(S) == 0:
            continue
        pid = state.texels.plane_id[S]
        order = np.argsort(pid, kind="stable")
        Ss = S[order]
        ps = pid[order]
        bounds = np.searchsorted(ps, np.arange(P + 1))
        for j in range(P):
            chunk = Ss[bounds[j] : bounds[j + 1]]
            if len(chunk):
                obs[j].append((i, chunk))
    state.plane_obs = obs


def _prune_membership(state: TexOptState) -> None:
    """Sticky drop: remove texels whose warped projection left the image."""
    for i in range(len(state.frames)):
        S = state.vis[i]
        if len(S) == 0:
            continue
        pack = _photo_forward(state, i, S)
        state.vis[i] = S[pack["inb"]]
    _rebuild_plane_obs(state)


# ---------------------------------------------------------------------------
# forward evaluation
# ---------------------------------------------------------------------------


def _photo_forward(
    state: TexOptState,
    i: int,
    S: np.ndarray,
    pose: np.ndarray | None = None,
    grid: np.ndarray | None = None,
    normals: np.ndarray | None = None,
    offsets: np.ndarray | None = None,
) -> dict:
    """Warped samples and residuals of frame i over texels S.

    Out-of-frustum texels are flagged via 'inb'; arrays are full-length with
    zeros in dropped rows. Parameter overrides evaluate trial states.
    """
    tx = state.texels
    frame = state.frames[i]
    T = frame.pose if pose is None else pose
    g = state.grids[i] if grid is None else grid
    nrm = state.normals if normals is None else normals
    off = state.offsets if offsets is None else offsets

    p = tx.p[S]
    pid = tx.plane_id[S]
    n = nrm[pid]
    w = off[pid]
    dist = np.einsum("ij,ij->i", p, n) + w
    q = p - dist[:, None] * n
    v = q @ T[:3, :3].T + T[:3, 3]
    zok = v[:, 2] > 1e-9
    zsafe = np.where(zok, v[:, 2], 1.0)
    intr = state.intr
    uv = np.stack(
        [v[:, 0] * intr.fx / zsafe + intr.cx, v[:, 1] * intr.fy / zsafe + intr.cy],
        axis=1,
    )
    warped, dFdu, ctrl_idx, ctrl_w = grid_warp(g, uv, intr.width, intr.height)
    h_img, w_img = frame.color.shape[:2]
    inb = (
        zok
        & (warped[:, 0] >= 0.0) & (warped[:, 0] <= w_img - 1.0)
        & (warped[:, 1] >= 0.0) & (warped[:, 1] <= h_img - 1.0)
    )
    val = np.zeros((len(S), 3))
    grad = np.zeros((len(S), 3, 2))
    if inb.any():
        val[inb], grad[inb] = bilinear_sample(frame.color, warped[inb])
    resid = np.where(inb[:, None], tx.color[S] - val, 0.0)
    return {
        "q": q, "v": v, "dist": dist, "uv": uv, "warped": warped,
        "dFdu": dFdu, "ctrl_idx": ctrl_idx, "ctrl_w": ctrl_w,
        "inb": inb, "val": val, "grad": grad, "resid": resid, "zsafe": zsafe,
    }


def _dudv(state: TexOptState, v: np.ndarray, zsafe: np.ndarray) -> np.ndarray:
    """Projection Jacobian (N, 2, 3) at camera points v."""
    intr = state.intr
    n = len(v)
    out = np.zeros((n, 2, 3))
    out[:, 0, 0] = intr.fx / zsafe
    out[:, 0, 2] = -intr.fx * v[:, 0] / zsafe**2
    out[:, 1, 1] = intr.fy / zsafe
    out[:, 1, 2] = -intr.fy * v[:, 1] / zsafe**2
    return out


def _chain_image(pack: dict, state: TexOptState) -> np.ndarray:
    """d(sample)/d(camera point): G * dF/du * du/dv -> (N, 3, 3)."""
    A = np.einsum("nck,nkl->ncl", pack["grad"], pack["dFdu"])  # (N,3,2)
    return np.einsum("ncl,nlm->ncm", A, _dudv(state, pack["v"], pack["zsafe"]))


# ---------------------------------------------------------------------------
# energies
# ---------------------------------------------------------------------------


def energy_photo(state: TexOptState) -> float:
    """Sum of squared RGB residuals over all frames' visible texel sets."""
    total = 0.0
    for i in range(len(state.frames)):
        S = state.vis[i]
        if len(S) == 0:
            continue
        pack = _photo_forward(state, i, S)
        total += float(np.sum(pack["resid"] ** 2))
    return total


def energy_plane(state: TexOptState) -> float:
    """Sum of squared texel-to-plane distances over all texels."""
    tx = state.texels
    d = (
        np.einsum("ij,ij->i", tx.p, state.normals[tx.plane_id])
        + state.offsets[tx.plane_id]
    )
    return float(np.sum(d * d))


def energy_offset(state: TexOptState) -> float:
    """Sum of squared correction-grid offsets over all frames."""
    return float(np.sum(state.grids**2))


def energy_total(state: TexOptState) -> tuple[float, float, float, float]:
    ec = energy_photo(state)
    ep = energy_plane(state)
    es = energy_offset(state)
    return ec, ep, es, ec + state.lambda1 * ep + state.lambda2 * es


# ---------------------------------------------------------------------------
# closed-form color update
# ---------------------------------------------------------------------------


def update_colors(state: TexOptState) -> None:
    """Per-texel mean of warped frame samples, accumulated in frame order.

    Texels visible in zero frames keep their color and get flagged.
    """
    tx = state.texels
    acc = np.zeros((len(tx), 3), dtype=np.float64)
    cnt = np.zeros(len(tx), dtype=np.int64)
    for i in range(len(state.frames)):
        S = state.vis[i]
        if len(S) == 0:
            continue
        pack = _photo_forward(state, i, S)
        sel = S[pack["inb"]]
        acc[sel] += pack["val"][pack["inb"]]
        cnt[sel] += 1
    seen = cnt > 0
    tx.color[seen] = acc[seen] / cnt[seen, None]
    tx.flags[~seen] |= FLAG_NEVER_VISIBLE
    tx.flags[seen] &= ~np.uint8(FLAG_NEVER_VISIBLE)


# ---------------------------------------------------------------------------
# plane Gauss-Newton
# ---------------------------------------------------------------------------


def plane_residuals(
    state: TexOptState, j: int, normal: np.ndarray, offset: float
) -> tuple[np.ndarray, np.ndarray]:
    """Stacked residuals and Jacobian wrt (n, w) for plane j.

    Rows: photometric RGB residuals per (frame, texel) observation in frame
    order, then sqrt(lambda1) plane-distance rows for every texel of plane j.
    Out-of-frustum observations contribute zero rows.
    """
    tx = state.texels
    P = int(np.sum(tx.plane_id == j))
    trial_n = np.array(state.normals)
    trial_w = np.array(state.offsets)
    trial_n[j] = normal
    trial_w[j] = offset

    res_parts = []
    jac_parts = []
    for i, S in state.plane_obs[j]:
        pack = _photo_forward(state, i, S, normals=trial_n, offsets=trial_w)
        A = _chain_image(pack, state)  # (N,3,3) d(sample)/dv
        R = state.frames[i].pose[:3, :3]
        B = np.einsum("ncm,mk->nck", A, R)  # d(sample)/dq
        p = tx.p[S]
        dist = pack["dist"]
        # dq/dn = -(n p^T + dist * I), dq/dw = -n
        dqdn = -(
            normal[None, :, None] * p[:, None, :]
            + dist[:, None, None] * np.eye(3)[None, :, :]
        )
        dqdw = np.broadcast_to(-normal, (len(S), 3))
        Jn = -np.einsum("nck,nkl->ncl", B, dqdn)
        Jw = -np.einsum("nck,nk->nc", B, dqdw)
        Jrow = np.concatenate([Jn, Jw[..., None]], axis=2)  # (N,3,4)
        Jrow = np.where(pack["inb"][:, None, None], Jrow, 0.0)
        res_parts.append(pack["resid"].reshape(-1))
        jac_parts.append(Jrow.reshape(-1, 4))

    mine = np.flatnonzero(tx.plane_id == j)
    d = tx.p[mine] @ normal + offset
    sl = np.sqrt(state.lambda1)
    res_parts.append(sl * d)
    jac_parts.append(sl * np.concatenate([tx.p[mine], np.ones((P, 1))], axis=1))
    return np.concatenate(res_parts), np.concatenate(jac_parts)


def _plane_local_energy(
    state: TexOptState, j: int, normal: np.ndarray, offset: float,
    old_sq: list[np.ndarray] | None = None,
) -> tuple[float, list[np.ndarray]]:
    """Plane j's share of the energy; out-of-frustum trial terms fall back to
    their cached current-value squares so acceptance stays conservative."""
    tx = state.texels
    trial_n = np.array(state.normals)
    trial_w = np.array(state.offsets)
    trial_n[j] = normal
    trial_w[j] = offset
    total = 0.0
    sq_parts = []
    for idx, (i, S) in enumerate(state.plane_obs[j]):
        pack = _photo_forward(state, i, S, normals=trial_n, offsets=trial_w)
        sq = np.sum(pack["resid"] ** 2, axis=1)
        if old_sq is not None:
            sq = np.where(pack["inb"], sq, old_sq[idx])
        sq_parts.append(sq)
        total += float(sq.sum())
    mine = tx.plane_id == j
    d = tx.p[mine] @ normal + offset
    total += state.lambda1 * float(np.sum(d * d))
    return total, sq_parts


def _update_one_plane(state: TexOptState, j: int):
    n = state.normals[j].copy()
    w = float(state.offsets[j])
    if not state.plane_obs[j]:
        # no photometric observations: the plane-fit rows alone are rank-3
        log.debug("plane %d: no visible texels, left unchanged", j)
        return n, w
    for _ in range(max(state.cfg.inner_gn_steps, 1)):
        r, J = plane_residuals(state, j, n, w)
        JtJ = J.T @ J
        Jtr = J.T @ r
        try:
            delta = np.linalg.solve(JtJ, -Jtr)
        except np.linalg.LinAlgError:
            log.warning("plane %d: singular normal equations, skipped", j)
            return n, w
        e_old, old_sq = _plane_local_energy(state, j, n, w)
        step = 1.0
        accepted = False
        for _ in range(MAX_HALVINGS + 1):
            n_try = n + step * delta[:3]
            w_try = w + step * delta[3]
            norm = np.linalg.norm(n_try)
            if norm > 1e-12:
                n_try = n_try / norm
                w_try = w_try / norm
                e_new, _ = _plane_local_energy(state, j, n_try, w_try, old_sq)
                if e_new <= e_old:
                    n, w = n_try, float(w_try)
                    accepted = True
                    break
            step *= 0.5
        if not accepted:
            break
    return n, w


def gn_update_planes(state: TexOptState) -> None:
    """Gauss-Newton step per plane (independent; parallel over planes)."""
    jobs = range(state.n_planes)
    if state.cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=state.cfg.threads) as pool:
            results = list(pool.map(lambda j: _update_one_plane(state, j), jobs))
    else:
        results = [_update_one_plane(state, j) for j in jobs]
    for j, (n, w) in enumerate(results):
        state.normals[j] = n
        state.offsets[j] = w


# ---------------------------------------------------------------------------
# pose + grid Gauss-Newton
# ---------------------------------------------------------------------------


def frame_residuals(
    state: TexOptState, i: int, pose: np.ndarray, grid: np.ndarray
) -> tuple[np.ndarray, sparse.csr_matrix]:
    """Residuals and sparse Jacobian wrt (rotation 3, translation 3, grid).

    Rows: RGB residuals for the frame's visible texels, then sqrt(lambda2)
    regularizer rows for every grid offset component.
    """
    S = state.vis[i]
    pack = _photo_forward(state, i, S, pose=pose, grid=grid)
    N = len(S)
    ngrid = grid.size
    A = _chain_image(pack, state)  # (N,3,3) wrt camera point
    v = pack["v"]
    # dv/d(omega) = -[v]x ; dv/dt = I
    dvdw = np.zeros((N, 3, 3))
    dvdw[:, 0, 1] = v[:, 2]
    dvdw[:, 0, 2] = -v[:, 1]
    dvdw[:, 1, 0] = -v[:, 2]
    dvdw[:, 1, 2] = v[:, 0]
    dvdw[:, 2, 0] = v[:, 1]
    dvdw[:, 2, 1] = -v[:, 0]
    Jw = -np.einsum("ncm,nmk->nck", A, dvdw)
    Jt = -A
    Jpose = np.concatenate([Jw, Jt], axis=2)  # (N,3,6)
    Jpose = np.where(pack["inb"][:, None, None], Jpose, 0.0)

    # grid columns: dr/df_l = -G * delta_l for the 4 active controls
    Ggrad = np.where(pack["inb"][:, None, None], pack["grad"], 0.0)  # (N,3,2)
    ctrl_idx = pack["ctrl_idx"]
    ctrl_w = pack["ctrl_w"]

    rows_pose = np.repeat(np.arange(3 * N), 6)
    cols_pose = np.tile(np.arange(6), 3 * N)
    data_pose = Jpose.reshape(-1)

    rows_g = np.repeat(np.arange(3 * N), 8)
    cols_g = np.empty((N, 3, 4, 2), dtype=np.int64)
    cols_g[..., 0] = 6 + 2 * ctrl_idx[:, None, :]
    cols_g[..., 1] = 6 + 2 * ctrl_idx[:, None, :] + 1
    data_g = np.empty((N, 3, 4, 2))
    data_g[..., 0] = -Ggrad[:, :, None, 0] * ctrl_w[:, None, :]
    data_g[..., 1] = -Ggrad[:, :, None, 1] * ctrl_w[:, None, :]

    sl = np.sqrt(state.lambda2)
    rows_reg = 3 * N + np.arange(ngrid)
    cols_reg = 6 + np.arange(ngrid)
    data_reg = np.full(ngrid, sl)

    rows = np.concatenate([rows_pose, rows_g, cols_reg * 0 + rows_reg])
    cols = np.concatenate([cols_pose, cols_g.reshape(-1), cols_reg])
    data = np.concatenate([data_pose, data_g.reshape(-1), data_reg])
    J = sparse.csr_matrix(
        (data, (rows, cols)), shape=(3 * N + ngrid, 6 + ngrid)
    )
    r = np.concatenate([pack["resid"].reshape(-1), sl * grid.reshape(-1)])
    return r, J


def _frame_local_energy(
    state: TexOptState, i: int, pose: np.ndarray, grid: np.ndarray,
    old_sq: np.ndarray | None = None,
) -> tuple[float, np.ndarray]:
    S = state.vis[i]
    pack = _photo_forward(state, i, S, pose=pose, grid=grid)
    sq = np.sum(pack["resid"] ** 2, axis=1)
    if old_sq is not None:
        sq = np.where(pack["inb"], sq, old_sq)
    total = float(sq.sum()) + state.lambda2 * float(np.sum(grid**2))
    return total, sq


def _update_one_frame(state: TexOptState, i: int):
    frame = state.frames[i]
    pose = frame.pose.copy()
    grid = state.grids[i].copy()
    S = state.vis[i]
    if len(S) < MIN_FRAME_TEXELS:
        log.warning("frame %d: only %d visible texels, skipped", i, len(S))
        return pose, grid
    for _ in range(max(state.cfg.inner_gn_steps, 1)):
        r, J = frame_residuals(state, i, pose, grid)
        JtJ = (J.T @ J).toarray()
        Jtr = J.T @ r
        try:
            delta = np.linalg.solve(JtJ, -Jtr)
        except np.linalg.LinAlgError:
            log.warning("frame %d: singular normal equations, skipped", i)
            return pose, grid
        e_old, old_sq = _frame_local_energy(state, i, pose, grid)
        step = 1.0
        accepted = False
        for _ in range(MAX_HALVINGS + 1):
            omega = step * delta[:3]
            dt = step * delta[3:6]
            dR = so3_exp(omega)
            pose_try = pose.copy()
            pose_try[:3, :3] = orthonormalize(dR @ pose[:3, :3])
            pose_try[:3, 3] = dR @ pose[:3, 3] + dt
            grid_try = grid + step * delta[6:].reshape(grid.shape)
            e_new, _ = _frame_local_energy(state, i, pose_try, grid_try, old_sq)
            if e_new <= e_old:
                pose, grid = pose_try, grid_try
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
    return pose, grid


def gn_update_poses_and_grids(state: TexOptState) -> None:
    """Joint pose+grid Gauss-Newton per frame (independent; parallel)."""
    jobs = range(len(state.frames))
    if state.cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=state.cfg.threads) as pool:
            results = list(pool.map(lambda i: _update_one_frame(state, i), jobs))
    else:
        results = [_update_one_frame(state, i) for i in jobs]
    for i, (pose, grid) in enumerate(results):
        state.frames[i].pose = pose
        state.grids[i] = grid


# ---------------------------------------------------------------------------
# outer loop
# ---------------------------------------------------------------------------


def optimize(state: TexOptState, max_outer: int | None = None, tol: float | None = None) -> TexOptState:
    """Alternate colors -> planes -> poses+grids; record a non-increasing trace.

    lambda1 balances the initial photometric and plane energies; when the
    initial plane energy is (numerically) zero, lambda1 falls back to 1.
    """
    max_outer = state.cfg.max_outer if max_outer is None else max_outer
    tol = state.cfg.tol if tol is None else tol

    update_colors(state)
    ec = energy_photo(state)
    ep = energy_plane(state)
    es = energy_offset(state)
    state.lambda1 = ec / ep if ep > 1e-300 else 1.0
    etex = ec + state.lambda1 * ep + state.lambda2 * es
    state.trace = [{"iteration": 0, "E_c": ec, "E_p": ep, "E_s": es, "E_tex": etex}]
    _check_finite(state.trace[0])

    prev = etex
    for it in range(1, max_outer + 1):
        if state.cfg.vis_refresh and it % state.cfg.vis_refresh == 0:
            refresh_visibility(state)
        else:
            _prune_membership(state)
        update_colors(state)
        gn_update_planes(state)
        gn_update_poses_and_grids(state)
        ec, ep, es, etex = energy_total(state)
        state.trace.append(
            {"iteration": it, "E_c": ec, "E_p": ep, "E_s": es, "E_tex": etex}
        )
        _check_finite(state.trace[-1])
        if prev > 0 and (prev - etex) < tol * prev:
            break
        prev = etex
    return state


def _check_finite(row: dict) -> None:
    for key, val in row.items():
        if key != "iteration" and not np.isfinite(val):
            raise RuntimeError(f"non-finite energy term {key} = {val} at iteration {row['iteration']}")

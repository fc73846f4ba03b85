"""Per-plane texture patches: orthogonal projection, texel sampling, packing.

Each cluster projects onto its proxy plane, gets a metric texel grid at fixed
density, and every texel stores its owning face, barycentric coordinates and
lifted 3D point. Patches are shelf-packed into one or more RGB atlases with a
gutter.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import distance_transform_edt

from planelite.mesh_core import IndexedMesh
from planelite.partition import ClusterSet, PlaneProxy

log = logging.getLogger(__name__)

_DEGEN_AREA = 1e-14  # m^2, projected triangles flatter than this are skipped
FLAG_NEVER_VISIBLE = 1


@dataclass
class PlanePatch:
    """One cluster's 2D patch: in-plane basis, projected faces, texel rect."""

    plane_id: int
    origin: np.ndarray
    axis_u: np.ndarray
    axis_v: np.ndarray
    face_ids: np.ndarray          # global face indices of the cluster
    face_uv: np.ndarray           # (F, 3, 2) projected corners, meters
    degenerate: np.ndarray        # (F,) projected-away faces
    uv_min: np.ndarray            # (2,) patch rectangle lower corner, meters
    size_px: tuple[int, int]      # texel grid (nx, ny)
    page: int = -1                # filled by pack_atlas
    offset: tuple[int, int] = (0, 0)


@dataclass
class TexelSet:
    """Flat texel arrays; the unit of the photometric and geometry energies."""

    p: np.ndarray                 # (N, 3) lifted 3D points
    face_id: np.ndarray           # (N,)
    bary: np.ndarray              # (N, 3)
    plane_id: np.ndarray          # (N,)
    pix: np.ndarray               # (N, 2) patch-local integer pixel coords
    color: np.ndarray             # (N, 3) in [0,1]
    flags: np.ndarray             # (N,) uint8

    def __len__(self) -> int:
        return len(self.p)

    @classmethod
    def empty(cls) -> "TexelSet":
        return cls(
            p=np.zeros((0, 3)), face_id=np.zeros(0, dtype=np.int64),
            bary=np.zeros((0, 3)), plane_id=np.zeros(0, dtype=np.int64),
            pix=np.zeros((0, 2), dtype=np.int64), color=np.zeros((0, 3)),
            flags=np.zeros(0, dtype=np.uint8),
        )

    @classmethod
    def concatenate(cls, parts: list["TexelSet"]) -> "TexelSet":
        if not parts:
            return cls.empty()
        return cls(
            p=np.concatenate([t.p for t in parts]),
            face_id=np.concatenate([t.face_id for t in parts]),
            bary=np.concatenate([t.bary for t in parts]),
            plane_id=np.concatenate([t.plane_id for t in parts]),
            pix=np.concatenate([t.pix for t in parts]),
            color=np.concatenate([t.color for t in parts]),
            flags=np.concatenate([t.flags for t in parts]),
        )


def plane_basis(normal: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Orthonormal in-plane axes: smallest-|component| axis crossed with n."""
    n = np.asarray(normal, dtype=np.float64)
    k = int(np.argmin(np.abs(n)))
    a = np.zeros(3)
    a[k] = 1.0
    u = np.cross(a, n)
    u = u / np.linalg.norm(u)
    u = u - (u @ n) * n  # Gram-Schmidt against drift
    u = u / np.linalg.norm(u)
    v = np.cross(n, u)
    return u, v


def build_patch(mesh: IndexedMesh, face_ids: np.ndarray, proxy: PlaneProxy) -> PlanePatch:
    """Project a cluster onto its proxy plane and lay out the 2D patch.

    Raises when every face degenerates under projection (cluster perpendicular
    to its own proxy, which only happens on pathological fits).
    """
    face_ids = np.asarray(face_ids, dtype=np.int64)
    if len(face_ids) == 0:
        raise ValueError("empty cluster")
    n = proxy.normal
    u, v = plane_basis(n)
    tris = mesh.vertices[mesh.faces[face_ids]]  # (F, 3, 3)
    d = tris @ n + proxy.offset
    q = tris - d[..., None] * n  # plane projection of each corner
    rel = q - proxy.centroid
    face_uv = np.stack([rel @ u, rel @ v], axis=-1)  # (F, 3, 2)

    e1 = face_uv[:, 1] - face_uv[:, 0]
    e2 = face_uv[:, 2] - face_uv[:, 0]
    area2 = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    degenerate = np.abs(area2) * 0.5 < _DEGEN_AREA
    if degenerate.all():
        raise ValueError(
            f"cluster {proxy_id_str(proxy)}: all faces degenerate under projection"
        )
    if degenerate.any():
        log.debug("patch: %d degenerate projected faces skipped", int(degenerate.sum()))

    uv_min = face_uv[~degenerate].reshape(-1, 2).min(axis=0)
    uv_max = face_uv[~degenerate].reshape(-1, 2).max(axis=0)
    return PlanePatch(
        plane_id=-1,
        origin=proxy.centroid.copy(),
        axis_u=u,
        axis_v=v,
        face_ids=face_ids,
        face_uv=face_uv,
        degenerate=degenerate,
        uv_min=uv_min,
        size_px=(0, 0),  # set by sample_texels for the chosen density
    )


def proxy_id_str(proxy: PlaneProxy) -> str:
    n = proxy.normal
    return f"(n=[{n[0]:.3f},{n[1]:.3f},{n[2]:.3f}], w={proxy.offset:.3f})"


def sample_texels(patch: PlanePatch, mesh: IndexedMesh, density: float) -> TexelSet:
    """Metric texel grid over the patch; texels land in exactly one face.

    Pixel (ix, iy) is centered at uv_min + (ix + 0.5, iy + 0.5) * density.
    Shared-edge ties go to the lower face index; texels outside all projected
    faces are dropped. An empty result is legal for tiny clusters.
    """
    if density <= 0:
        raise ValueError("density must be positive")
    extent = patch.face_uv[~patch.degenerate].reshape(-1, 2)
    span = extent.max(axis=0) - patch.uv_min
    nx = max(int(np.ceil(span[0] / density - 1e-9)), 1)
    ny = max(int(np.ceil(span[1] / density - 1e-9)), 1)
    patch.size_px = (nx, ny)

    owner = np.full((ny, nx), -1, dtype=np.int64)  # local face slot per texel
    b1g = np.zeros((ny, nx))
    b2g = np.zeros((ny, nx))

    order = np.argsort(patch.face_ids, kind="stable")  # lower global id wins ties
    for local in order:
        if patch.degenerate[local]:
            continue
        tri = patch.face_uv[local]  # (3,2) meters relative to uv_min later
        rel = (tri - patch.uv_min) / density - 0.5  # continuous pixel coords
        lox = max(int(np.ceil(rel[:, 0].min() - 1e-9)), 0)
        hix = min(int(np.floor(rel[:, 0].max() + 1e-9)), nx - 1)
        loy = max(int(np.ceil(rel[:, 1].min() - 1e-9)), 0)
        hiy = min(int(np.floor(rel[:, 1].max() + 1e-9)), ny - 1)
        if lox > hix or loy > hiy:
            continue
        gx, gy = np.meshgrid(
            np.arange(lox, hix + 1, dtype=np.float64),
            np.arange(loy, hiy + 1, dtype=np.float64),
        )
        e1 = rel[1] - rel[0]
        e2 = rel[2] - rel[0]
        det = e1[0] * e2[1] - e1[1] * e2[0]
        px = gx - rel[0, 0]
        py = gy - rel[0, 1]
        b1 = (px * e2[1] - py * e2[0]) / det
        b2 = (e1[0] * py - e1[1] * px) / det
        inside = (b1 >= -1e-9) & (b2 >= -1e-9) & (b1 + b2 <= 1 + 1e-9)
        win = owner[loy : hiy + 1, lox : hix + 1]
        claim = inside & (win < 0)
        win[claim] = local
        b1g[loy : hiy + 1, lox : hix + 1][claim] = b1[claim]
        b2g[loy : hiy + 1, lox : hix + 1][claim] = b2[claim]

    iy, ix = np.nonzero(owner >= 0)
    if len(ix) == 0:
        return TexelSet.empty()
    local = owner[iy, ix]
    b1 = b1g[iy, ix]
    b2 = b2g[iy, ix]
    b0 = 1.0 - b1 - b2
    bary = np.stack([b0, b1, b2], axis=1)
    gfid = patch.face_ids[local]
    tri3d = mesh.vertices[mesh.faces[gfid]]  # (N, 3, 3)
    p = np.einsum("nk,nkj->nj", bary, tri3d)
    return TexelSet(
        p=p,
        face_id=gfid,
        bary=bary,
        plane_id=np.full(len(p), patch.plane_id, dtype=np.int64),
        pix=np.stack([ix, iy], axis=1).astype(np.int64),
        color=np.full((len(p), 3), 0.5),
        flags=np.zeros(len(p), dtype=np.uint8),
    )


def build_patches_and_texels(
    mesh: IndexedMesh, clusters: ClusterSet, density: float
) -> tuple[list[PlanePatch], TexelSet]:
    """Patch + texels for every cluster, concatenated in cluster order."""
    patches = []
    parts = []
    for c in range(clusters.n_clusters):
        face_ids = clusters.cluster_faces(c)
        patch = build_patch(mesh, face_ids, clusters.proxies[c])
        patch.plane_id = c
        texels = sample_texels(patch, mesh, density)
        texels.plane_id[:] = c
        patches.append(patch)
        parts.append(texels)
    return patches, TexelSet.concatenate(parts)


# ---------------------------------------------------------------------------
# atlas packing + baking
# ---------------------------------------------------------------------------


@dataclass
class AtlasLayout:
    pages: list[tuple[int, int]] = field(default_factory=list)  # (W, H)
    gutter: int = 2


def pack_atlas(
    patches: list[PlanePatch], gutter: int = 2, max_dim: int = 16384
) -> AtlasLayout:
    """Shelf-pack patches into pages; writes page/offset into each patch.

    Deterministic: patches are placed tallest-first (ties by plane id).
    Raises when a single patch plus gutter exceeds max_dim.
    """
    for p in patches:
        if p.size_px[0] + 2 * gutter > max_dim or p.size_px[1] + 2 * gutter > max_dim:
            raise ValueError(
                f"patch for plane {p.plane_id} ({p.size_px}) exceeds atlas limit {max_dim}"
            )
    order = sorted(range(len(patches)), key=lambda i: (-patches[i].size_px[1], patches[i].plane_id))
    total_area = sum((p.size_px[0] + gutter) * (p.size_px[1] + gutter) for p in patches)
    width = int(np.ceil(np.sqrt(max(total_area, 1)) * 1.1)) + 2 * gutter
    width = min(max(width, max((p.size_px[0] + 2 * gutter) for p in patches)), max_dim)

    pages: list[tuple[int, int]] = []
    page = 0
    cursor_x = gutter
    shelf_y = gutter
    shelf_h = 0
    page_h = gutter
    for i in order:
        p = patches[i]
        w, h = p.size_px
        if cursor_x + w + gutter > width:  # next shelf
            shelf_y += shelf_h + gutter
            cursor_x = gutter
            shelf_h = 0
        if shelf_y + h + gutter > max_dim:  # next page
            pages.append((width, page_h))
            page += 1
            cursor_x, shelf_y, shelf_h, page_h = gutter, gutter, 0, gutter
        p.page = page
        p.offset = (cursor_x, shelf_y)
        cursor_x += w + gutter
        shelf_h = max(shelf_h, h)
        page_h = max(page_h, shelf_y + h + gutter)
    pages.append((width, page_h))
    return AtlasLayout(pages=pages, gutter=gutter)


def bake_atlas(
    patches: list[PlanePatch],
    layout: AtlasLayout,
    texels: TexelSet,
    dilate_px: int = 2,
) -> list[np.ndarray]:
    """Write texel colors into the packed pages and dilate into empty pixels."""
    images = [np.zeros((h, w, 3), dtype=np.float64) for (w, h) in layout.pages]
    filled = [np.zeros((h, w), dtype=bool) for (w, h) in layout.pages]
    by_plane = {p.plane_id: p for p in patches}
    for c in np.unique(texels.plane_id):
        patch = by_plane[int(c)]
        sel = texels.plane_id == c
        ox, oy = patch.offset
        xs = texels.pix[sel, 0] + ox
        ys = texels.pix[sel, 1] + oy
        images[patch.page][ys, xs] = texels.color[sel]
        filled[patch.page][ys, xs] = True
    for img, mask in zip(images, filled):
        if mask.all() or not mask.any():
            continue
        dist, (iy, ix) = distance_transform_edt(~mask, return_indices=True)
        near = dist <= dilate_px + 0.5
        fill = (~mask) & near
        img[fill] = img[iy[fill], ix[fill]]
    return images


def face_uvs(
    mesh: IndexedMesh,
    patches: list[PlanePatch],
    layout: AtlasLayout,
    density: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Normalized per-face atlas UVs for export, plus per-face page index.

    v is flipped (measured from the bottom) per OBJ convention.
    """
    uvs = np.zeros((mesh.n_faces, 3, 2), dtype=np.float64)
    pages = np.zeros(mesh.n_faces, dtype=np.int64)
    for patch in patches:
        W, H = layout.pages[patch.page]
        ox, oy = patch.offset
        px = (patch.face_uv - patch.uv_min) / density  # continuous pixel coords
        gx = np.clip(px[..., 0] + ox, 0, W)
        gy = np.clip(px[..., 1] + oy, 0, H)
        uvs[patch.face_ids, :, 0] = gx / W
        uvs[patch.face_ids, :, 1] = 1.0 - gy / H
        pages[patch.face_ids] = patch.page
    return np.clip(uvs, 0.0, 1.0), pages

"""Z-buffered triangle rasterization of camera-space geometry.

Output per pixel: camera depth, face id and perspective-correct barycentric
coordinates. Faces are processed in index order and depth ties keep the
earlier face, so both backends produce identical buffers.
"""

from __future__ import annotations

import numpy as np

from planelite import backend
from planelite.backend import njit

_EDGE_EPS = 1e-12


def _raster_numpy(pts, faces, fx, fy, cx, cy, width, height, znear):
    depth = np.full((height, width), np.inf, dtype=np.float64)
    face_id = np.full((height, width), -1, dtype=np.int64)
    bary = np.zeros((height, width, 3), dtype=np.float64)
    for f in range(len(faces)):
        i0, i1, i2 = faces[f]
        z0, z1, z2 = pts[i0, 2], pts[i1, 2], pts[i2, 2]
        if z0 <= znear or z1 <= znear or z2 <= znear:
            continue
        x0 = pts[i0, 0] * fx / z0 + cx
        y0 = pts[i0, 1] * fy / z0 + cy
        x1 = pts[i1, 0] * fx / z1 + cx
        y1 = pts[i1, 1] * fy / z1 + cy
        x2 = pts[i2, 0] * fx / z2 + cx
        y2 = pts[i2, 1] * fy / z2 + cy
        area = (x1 - x0) * (y2 - y0) - (y1 - y0) * (x2 - x0)
        if abs(area) < _EDGE_EPS:
            continue
        lox = max(int(np.ceil(min(x0, x1, x2))), 0)
        hix = min(int(np.floor(max(x0, x1, x2))), width - 1)
        loy = max(int(np.ceil(min(y0, y1, y2))), 0)
        hiy = min(int(np.floor(max(y0, y1, y2))), height - 1)
        if lox > hix or loy > hiy:
            continue
        px, py = np.meshgrid(
            np.arange(lox, hix + 1, dtype=np.float64),
            np.arange(loy, hiy + 1, dtype=np.float64),
        )
        w0 = ((x1 - px) * (y2 - py) - (y1 - py) * (x2 - px)) / area
        w1 = ((x2 - px) * (y0 - py) - (y2 - py) * (x0 - px)) / area
        w2 = 1.0 - w0 - w1
        inside = (w0 >= -1e-12) & (w1 >= -1e-12) & (w2 >= -1e-12)
        if not inside.any():
            continue
        inv_z = w0 / z0 + w1 / z1 + w2 / z2
        z = 1.0 / inv_z
        win = depth[loy : hiy + 1, lox : hix + 1]
        better = inside & (z < win)
        if not better.any():
            continue
        win[better] = z[better]
        face_id[loy : hiy + 1, lox : hix + 1][better] = f
        b0 = (w0 / z0) * z
        b1 = (w1 / z1) * z
        b2 = (w2 / z2) * z
        sub = bary[loy : hiy + 1, lox : hix + 1]
        sub[better, 0] = b0[better]
        sub[better, 1] = b1[better]
        sub[better, 2] = b2[better]
    return depth, face_id, bary


@njit(cache=True)
def _raster_njit(pts, faces, fx, fy, cx, cy, width, height, znear):  # pragma: no cover - via dispatch
    depth = np.full((height, width), np.inf, dtype=np.float64)
    face_id = np.full((height, width), -1, dtype=np.int64)
    bary = np.zeros((height, width, 3), dtype=np.float64)
    for f in range(faces.shape[0]):
        i0 = faces[f, 0]
        i1 = faces[f, 1]
        i2 = faces[f, 2]
        z0 = pts[i0, 2]
        z1 = pts[i1, 2]
        z2 = pts[i2, 2]
        if z0 <= znear or z1 <= znear or z2 <= znear:
            continue
        x0 = pts[i0, 0] * fx / z0 + cx
        y0 = pts[i0, 1] * fy / z0 + cy
        x1 = pts[i1, 0] * fx / z1 + cx
        y1 = pts[i1, 1] * fy / z1 + cy
        x2 = pts[i2, 0] * fx / z2 + cx
        y2 = pts[i2, 1] * fy / z2 + cy
        area = (x1 - x0) * (y2 - y0) - (y1 - y0) * (x2 - x0)
        if abs(area) < _EDGE_EPS:
            continue
        minx = min(x0, min(x1, x2))
        maxx = max(x0, max(x1, x2))
        miny = min(y0, min(y1, y2))
        maxy = max(y0, max(y1, y2))
        lox = max(int(np.ceil(minx)), 0)
        hix = min(int(np.floor(maxx)), width - 1)
        loy = max(int(np.ceil(miny)), 0)
        hiy = min(int(np.floor(maxy)), height - 1)
        for pyi in range(loy, hiy + 1):
            py = float(pyi)
            for pxi in range(lox, hix + 1):
                px = float(pxi)
                w0 = ((x1 - px) * (y2 - py) - (y1 - py) * (x2 - px)) / area
                w1 = ((x2 - px) * (y0 - py) - (y2 - py) * (x0 - px)) / area
                w2 = 1.0 - w0 - w1
                if w0 >= -1e-12 and w1 >= -1e-12 and w2 >= -1e-12:
                    inv_z = w0 / z0 + w1 / z1 + w2 / z2
                    z = 1.0 / inv_z
                    if z < depth[pyi, pxi]:
                        depth[pyi, pxi] = z
                        face_id[pyi, pxi] = f
                        bary[pyi, pxi, 0] = (w0 / z0) * z
                        bary[pyi, pxi, 1] = (w1 / z1) * z
                        bary[pyi, pxi, 2] = (w2 / z2) * z
    return depth, face_id, bary


def rasterize(
    pts_cam: np.ndarray,
    faces: np.ndarray,
    fx: float,
    fy: float,
    cx: float,
    cy: float,
    width: int,
    height: int,
    znear: float = 0.05,
):
    """Rasterize camera-space triangles into depth/face/barycentric buffers.

    Faces with any vertex at or behind znear are skipped (no clipping).
    Returns (depth (H,W) with inf for empty, face_id (H,W) with -1, bary
    (H,W,3) perspective-correct).
    """
    pts = np.ascontiguousarray(pts_cam, dtype=np.float64)
    fcs = np.ascontiguousarray(faces, dtype=np.int64)
    args = (pts, fcs, float(fx), float(fy), float(cx), float(cy),
            int(width), int(height), float(znear))
    if backend.get_backend() == "numba":
        return _raster_njit(*args)
    return _raster_numpy(*args)

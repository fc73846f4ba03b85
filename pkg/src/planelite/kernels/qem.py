"""Quadric error metric primitives.

Quadrics are symmetric 4x4 forms packed as 10 floats in row-major upper
triangle order: [a00 a01 a02 a03 a11 a12 a13 a22 a23 a33]. The contraction
cost of an edge is h^T Q h at the chosen position h=(x,y,z,1), where Q sums
the endpoint quadrics; the position solves the 3x3 stationarity system when
well conditioned (condition number < 1e8), else the best of {endpoint a,
endpoint b, midpoint} is taken.
"""

from __future__ import annotations

import numpy as np

from planelite import backend
from planelite.backend import njit

COND_LIMIT = 1e8


def face_quadrics(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Fundamental quadric of each face plane, packed (m, 10).

    Degenerate faces (zero area) contribute a zero quadric.
    """
    v = np.asarray(vertices, dtype=np.float64)
    f = np.asarray(faces, dtype=np.int64)
    n = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    norms = np.linalg.norm(n, axis=1)
    safe = np.where(norms > 1e-300, norms, 1.0)
    n = n / safe[:, None]
    n[norms <= 1e-300] = 0.0
    d = -np.einsum("ij,ij->i", n, v[f[:, 0]])
    p = np.concatenate([n, d[:, None]], axis=1)  # (m, 4)
    iu = np.triu_indices(4)
    return (p[:, :, None] * p[:, None, :])[:, iu[0], iu[1]]


def plane_quadric(normal: np.ndarray, d: float, weight: float = 1.0) -> np.ndarray:
    """Packed quadric of a single weighted plane (n, d)."""
    p = np.array([normal[0], normal[1], normal[2], d], dtype=np.float64)
    full = weight * np.outer(p, p)
    iu = np.triu_indices(4)
    return full[iu]


def eval_quadric(q: np.ndarray, pos: np.ndarray) -> float:
    """h^T Q h for h = (x, y, z, 1)."""
    x, y, z = float(pos[0]), float(pos[1]), float(pos[2])
    return float(
        q[0] * x * x + 2 * q[1] * x * y + 2 * q[2] * x * z + 2 * q[3] * x
        + q[4] * y * y + 2 * q[5] * y * z + 2 * q[6] * y
        + q[7] * z * z + 2 * q[8] * z + q[9]
    )


def unpack_quadric(q: np.ndarray) -> np.ndarray:
    """Expand a packed 10-vector to the full symmetric 4x4 matrix."""
    out = np.zeros((4, 4), dtype=np.float64)
    iu = np.triu_indices(4)
    out[iu] = q
    out.T[np.triu_indices(4)] = q
    return out


def _edge_cost_impl(q, ax, ay, az, bx, by, bz):
    # Self-contained scalar kernel: same source compiles under numba and runs
    # as the pure fallback.
    a00 = q[0]; a01 = q[1]; a02 = q[2]; a03 = q[3]
    a11 = q[4]; a12 = q[5]; a13 = q[6]
    a22 = q[7]; a23 = q[8]; a33 = q[9]

    # closed-form eigenvalues of the symmetric 3x3 block for the cond check
    p1 = a01 * a01 + a02 * a02 + a12 * a12
    trq = (a00 + a11 + a22) / 3.0
    p2 = (a00 - trq) ** 2 + (a11 - trq) ** 2 + (a22 - trq) ** 2 + 2.0 * p1
    p = np.sqrt(p2 / 6.0)
    if p < 1e-300:
        e_lo = trq
        e_mid = trq
        e_hi = trq
    else:
        b00 = (a00 - trq) / p
        b11 = (a11 - trq) / p
        b22 = (a22 - trq) / p
        b01 = a01 / p
        b02 = a02 / p
        b12 = a12 / p
        detb = (
            b00 * (b11 * b22 - b12 * b12)
            - b01 * (b01 * b22 - b12 * b02)
            + b02 * (b01 * b12 - b11 * b02)
        )
        r = detb / 2.0
        if r < -1.0:
            r = -1.0
        elif r > 1.0:
            r = 1.0
        phi = np.arccos(r) / 3.0
        e_hi = trq + 2.0 * p * np.cos(phi)
        e_lo = trq + 2.0 * p * np.cos(phi + 2.0 * np.pi / 3.0)
        e_mid = 3.0 * trq - e_hi - e_lo

    lo = abs(e_lo)
    if abs(e_mid) < lo:
        lo = abs(e_mid)
    if abs(e_hi) < lo:
        lo = abs(e_hi)
    hi = abs(e_lo)
    if abs(e_mid) > hi:
        hi = abs(e_mid)
    if abs(e_hi) > hi:
        hi = abs(e_hi)

    solved = False
    x = 0.0
    y = 0.0
    z = 0.0
    if lo > 0.0 and hi / lo < COND_LIMIT:
        det = (
            a00 * (a11 * a22 - a12 * a12)
            - a01 * (a01 * a22 - a12 * a02)
            + a02 * (a01 * a12 - a11 * a02)
        )
        if det != 0.0:
            # Cramer solve of A v = -b, b = (a03, a13, a23)
            x = (
                -a03 * (a11 * a22 - a12 * a12)
                + a01 * (a13 * a22 - a12 * a23)
                - a02 * (a13 * a12 - a11 * a23)
            ) / det
            y = (
                -a00 * (a13 * a22 - a23 * a12)
                + a03 * (a01 * a22 - a12 * a02)
                - a02 * (a01 * a23 - a13 * a02)
            ) / det
            z = (
                -a00 * (a11 * a23 - a12 * a13)
                + a01 * (a01 * a23 - a13 * a02)
                - a03 * (a01 * a12 - a11 * a02)
            ) / det
            solved = True
    if solved:
        cost = (
            a00 * x * x + 2 * a01 * x * y + 2 * a02 * x * z + 2 * a03 * x
            + a11 * y * y + 2 * a12 * y * z + 2 * a13 * y
            + a22 * z * z + 2 * a23 * z + a33
        )
        if cost < 0.0:
            cost = 0.0
        return cost, x, y, z

    mx = 0.5 * (ax + bx)
    my = 0.5 * (ay + by)
    mz = 0.5 * (az + bz)
    best = 1e300
    for cand in range(3):
        if cand == 0:
            cx, cy, cz = ax, ay, az
        elif cand == 1:
            cx, cy, cz = bx, by, bz
        else:
            cx, cy, cz = mx, my, mz
        c = (
            a00 * cx * cx + 2 * a01 * cx * cy + 2 * a02 * cx * cz + 2 * a03 * cx
            + a11 * cy * cy + 2 * a12 * cy * cz + 2 * a13 * cy
            + a22 * cz * cz + 2 * a23 * cz + a33
        )
        if c < best:
            best = c
            x, y, z = cx, cy, cz
    if best < 0.0:
        best = 0.0
    return best, x, y, z


_edge_cost_py = _edge_cost_impl
if backend.HAVE_NUMBA:
    _edge_cost_njit = njit(cache=True)(_edge_cost_impl)

    @njit(cache=True)
    def _edge_costs_batch_njit(quads, apos, bpos):  # pragma: no cover - via dispatch
        n = quads.shape[0]
        costs = np.empty(n, dtype=np.float64)
        points = np.empty((n, 3), dtype=np.float64)
        for i in range(n):
            c, x, y, z = _edge_cost_njit(
                quads[i],
                apos[i, 0], apos[i, 1], apos[i, 2],
                bpos[i, 0], bpos[i, 1], bpos[i, 2],
            )
            costs[i] = c
            points[i, 0] = x
            points[i, 1] = y
            points[i, 2] = z
        return costs, points
else:  # pragma: no cover - numba is a declared dependency
    _edge_cost_njit = _edge_cost_impl
    _edge_costs_batch_njit = None


def edge_cost(quadric: np.ndarray, a: np.ndarray, b: np.ndarray):
    """Contraction cost and position for one summed edge quadric."""
    q = np.ascontiguousarray(quadric, dtype=np.float64)
    fn = _edge_cost_njit if backend.get_backend() == "numba" else _edge_cost_py
    c, x, y, z = fn(q, float(a[0]), float(a[1]), float(a[2]),
                    float(b[0]), float(b[1]), float(b[2]))
    return float(c), np.array([x, y, z])


def edge_costs_batch(quads: np.ndarray, apos: np.ndarray, bpos: np.ndarray):
    """Vector form of edge_cost over (e, 10) quadrics and endpoint positions."""
    quads = np.ascontiguousarray(quads, dtype=np.float64)
    apos = np.ascontiguousarray(apos, dtype=np.float64)
    bpos = np.ascontiguousarray(bpos, dtype=np.float64)
    if backend.get_backend() == "numba":
        return _edge_costs_batch_njit(quads, apos, bpos)
    n = len(quads)
    costs = np.empty(n, dtype=np.float64)
    points = np.empty((n, 3), dtype=np.float64)
    for i in range(n):
        c, x, y, z = _edge_cost_py(
            quads[i],
            apos[i, 0], apos[i, 1], apos[i, 2],
            bpos[i, 0], bpos[i, 1], bpos[i, 2],
        )
        costs[i] = c
        points[i] = (x, y, z)
    return costs, points

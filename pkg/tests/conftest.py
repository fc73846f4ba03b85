"""Shared fixtures: tiny meshes and session-scoped synthetic scenes."""

from __future__ import annotations

import numpy as np
import pytest

from planelite.config import PipelineConfig
from planelite.mesh_core import IndexedMesh
from planelite.rgbd_io import Intrinsics
from planelite.synth_oracle import SceneSpec, build_scene, orbit_poses, render_frame


def grid_plane_mesh(nx: int = 10, ny: int = 10, size: float = 1.0, z: float = 0.0,
                    jitter: float = 0.0, seed: int = 0) -> IndexedMesh:
    """Uniform triangulated rectangle in the z-plane, optional z jitter."""
    xs = np.linspace(0.0, size, nx + 1)
    ys = np.linspace(0.0, size, ny + 1)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    verts = np.stack([gx.ravel(), gy.ravel(), np.full(gx.size, z)], axis=1)
    if jitter > 0:
        rng = np.random.default_rng(seed)
        verts[:, 2] += rng.normal(0.0, jitter, size=len(verts))

    def vid(i, j):
        return i * (ny + 1) + j

    faces = []
    for i in range(nx):
        for j in range(ny):
            a, b, c, d = vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)
            faces.append((a, b, c))
            faces.append((a, c, d))
    return IndexedMesh(verts, np.array(faces, dtype=np.int64))


def cube_mesh(side: float = 1.0, edge: float = 0.25) -> IndexedMesh:
    """Closed unit-ish cube from six welded grid faces."""
    from planelite.synth_oracle import Rect, SceneSpec, build_scene

    s = side
    o = np.array
    rects = [
        Rect(o([0.0, 0.0, 0.0]), o([0, s, 0.0]), o([s, 0, 0.0])),  # bottom, n=-z
        Rect(o([0.0, 0.0, s]), o([s, 0, 0.0]), o([0, s, 0.0])),    # top, n=+z
        Rect(o([0.0, 0.0, 0.0]), o([s, 0, 0]), o([0, 0, s])),      # y=0, n=-y
        Rect(o([0.0, s, 0.0]), o([0, 0, s]), o([s, 0, 0])),        # y=s, n=+y
        Rect(o([0.0, 0.0, 0.0]), o([0, 0, s]), o([0, s, 0])),      # x=0, n=-x
        Rect(o([s, 0.0, 0.0]), o([0, s, 0]), o([0, 0, s])),        # x=s, n=+x
    ]
    spec = SceneSpec(room=None, extra_rects=rects, edge=edge)
    return build_scene(spec).mesh


def random_surface_mesh(seed: int = 0, n: int = 40) -> IndexedMesh:
    """Random Delaunay height-field mesh (valid, connected)."""
    from scipy.spatial import Delaunay

    rng = np.random.default_rng(seed)
    pts2 = rng.uniform(0.0, 1.0, size=(n, 2))
    tri = Delaunay(pts2)
    z = rng.normal(0.0, 0.05, size=n)
    verts = np.concatenate([pts2, z[:, None]], axis=1)
    return IndexedMesh(verts, tri.simplices.astype(np.int64))


@pytest.fixture(scope="session")
def corner_scene():
    """Three orthogonal textured planes meeting in a corner, fine mesh."""
    from planelite.synth_oracle import Rect

    o = np.array
    s = 1.6
    rects = [
        Rect(o([0.0, 0.0, 0.0]), o([s, 0, 0.0]), o([0, s, 0.0])),  # floor z=0, n=+z
        Rect(o([0.0, 0.0, 0.0]), o([0, 0, s]), o([s, 0, 0])),      # wall y=0, n=+y
        Rect(o([0.0, 0.0, 0.0]), o([0, s, 0]), o([0, 0, s])),      # wall x=0, n=+x
    ]
    spec = SceneSpec(room=None, extra_rects=rects, edge=0.05, pattern="sine")
    return build_scene(spec)


@pytest.fixture(scope="session")
def corner_intrinsics():
    return Intrinsics(fx=260.0, fy=260.0, cx=159.5, cy=119.5, width=320, height=240)


@pytest.fixture(scope="session")
def corner_poses(corner_scene):
    center = np.array([0.55, 0.55, 0.55])
    target = np.array([0.18, 0.18, 0.18])
    return orbit_poses(target, center, radius=0.28, n=8)


@pytest.fixture(scope="session")
def corner_frames(corner_scene, corner_intrinsics, corner_poses):
    return [
        render_frame(corner_scene, pose, corner_intrinsics, index=i)
        for i, pose in enumerate(corner_poses)
    ]


@pytest.fixture()
def cfg():
    return PipelineConfig()

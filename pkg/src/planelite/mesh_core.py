"""Triangle-mesh container, adjacency operators, graph Laplacian, and file I/O.

Meshes are immutable after construction (arrays are marked read-only); the
editing stages build new meshes instead of mutating.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import sparse

from planelite.config import cluster_color

log = logging.getLogger(__name__)

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


@dataclass
class IndexedMesh:
    """Shared-vertex triangle mesh.

    vertices: (n, 3) float64 positions in meters.
    faces: (m, 3) int64 vertex indices, three distinct indices per face.
    vertex_labels: optional per-vertex cluster id.
    dropped_faces: degenerate faces removed while loading.
    """

    vertices: np.ndarray
    faces: np.ndarray
    vertex_labels: np.ndarray | None = None
    dropped_faces: int = 0
    _neighbors: sparse.csr_matrix | None = field(default=None, repr=False, compare=False)

    def __post_init__(self) -> None:
        v = np.ascontiguousarray(np.asarray(self.vertices, dtype=np.float64))
        f = np.ascontiguousarray(np.asarray(self.faces, dtype=np.int64))
        if v.ndim != 2 or v.shape[1] != 3:
            raise ValueError(f"vertices must be (n, 3), got {v.shape}")
        if f.ndim != 2 or (f.size and f.shape[1] != 3):
            raise ValueError(f"faces must be (m, 3), got {f.shape}")
        if f.size:
            if f.min() < 0 or f.max() >= len(v):
                raise ValueError("face index out of vertex range")
            degen = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 2] == f[:, 0])
            if degen.any():
                raise ValueError(f"{int(degen.sum())} degenerate faces (repeated indices)")
        v.setflags(write=False)
        f.setflags(write=False)
        self.vertices = v
        self.faces = f
        if self.vertex_labels is not None:
            vl = np.ascontiguousarray(np.asarray(self.vertex_labels, dtype=np.int64))
            vl.setflags(write=False)
            self.vertex_labels = vl

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def neighbors_csr(self) -> sparse.csr_matrix:
        """Symmetric 0/1 vertex adjacency derived from faces (cached)."""
        if self._neighbors is None:
            f = self.faces
            i = np.concatenate([f[:, 0], f[:, 1], f[:, 1], f[:, 2], f[:, 2], f[:, 0]])
            j = np.concatenate([f[:, 1], f[:, 0], f[:, 2], f[:, 1], f[:, 0], f[:, 2]])
            a = sparse.csr_matrix(
                (np.ones(len(i), dtype=np.float64), (i, j)),
                shape=(self.n_vertices, self.n_vertices),
            )
            a.data[:] = 1.0  # collapse duplicate edge entries
            self._neighbors = a
        return self._neighbors

    def neighbors(self, i: int) -> np.ndarray:
        return self.neighbors_csr()[i].indices


def face_normals(mesh: IndexedMesh) -> tuple[np.ndarray, np.ndarray]:
    """Unit face normals and face areas. Zero-area faces get a zero normal."""
    v = mesh.vertices
    f = mesh.faces
    n = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    norms = np.linalg.norm(n, axis=1)
    areas = 0.5 * norms
    safe = np.where(norms > 1e-300, norms, 1.0)
    return n / safe[:, None], areas


def face_centroids(mesh: IndexedMesh) -> np.ndarray:
    return mesh.vertices[mesh.faces].mean(axis=1)


def mesh_edges(mesh: IndexedMesh) -> np.ndarray:
    """Unique undirected edges as a (e, 2) int64 array with edge[:,0] < edge[:,1]."""
    f = mesh.faces
    e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    e = np.sort(e, axis=1)
    return np.unique(e, axis=0)


def edge_face_incidence(mesh: IndexedMesh) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Edges plus the faces on each side.

    Returns (edges (e,2), edge_faces (e,2) with -1 for missing, counts (e,)).
    counts > 2 marks non-manifold edges; only the first two faces are kept.
    """
    f = mesh.faces
    m = len(f)
    ev = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    ev = np.sort(ev, axis=1)
    fid = np.tile(np.arange(m, dtype=np.int64), 3)
    order = np.lexsort((ev[:, 1], ev[:, 0]))
    ev = ev[order]
    fid = fid[order]
    uniq, start = np.unique(ev, axis=0, return_index=True)
    counts = np.diff(np.append(start, len(ev)))
    edge_faces = np.full((len(uniq), 2), -1, dtype=np.int64)
    edge_faces[:, 0] = fid[start]
    more = counts > 1
    edge_faces[more, 1] = fid[start[more] + 1]
    return uniq, edge_faces, counts.astype(np.int64)


def face_adjacency_csr(mesh: IndexedMesh) -> sparse.csr_matrix:
    """Face-to-face adjacency across shared edges (symmetric 0/1 CSR)."""
    _, ef, _counts = edge_face_incidence(mesh)
    both = ef[(ef[:, 0] >= 0) & (ef[:, 1] >= 0)]
    m = mesh.n_faces
    if len(both) == 0:
        return sparse.csr_matrix((m, m))
    i = np.concatenate([both[:, 0], both[:, 1]])
    j = np.concatenate([both[:, 1], both[:, 0]])
    a = sparse.csr_matrix((np.ones(len(i)), (i, j)), shape=(m, m))
    a.data[:] = 1.0
    return a


def graph_laplacian(mesh: IndexedMesh) -> sparse.csr_matrix:
    """Uniform graph Laplacian: L_ii = 1, L_ij = -1/|N(i)| for neighbors j.

    Raises on isolated vertices (no incident edge). L is not symmetric in
    general; the normal-equations product L^T L used downstream is.
    """
    if mesh.n_vertices < 1:
        raise ValueError("mesh has no vertices")
    adj = mesh.neighbors_csr()
    deg = np.diff(adj.indptr)
    isolated = np.flatnonzero(deg == 0)
    if len(isolated):
        raise ValueError(f"isolated vertex {int(isolated[0])} has no neighbors")
    inv = -1.0 / deg.astype(np.float64)
    off = sparse.csr_matrix(
        (np.repeat(inv, deg), adj.indices, adj.indptr), shape=adj.shape
    )
    return (sparse.eye(mesh.n_vertices, format="csr") + off).tocsr()


def _clean_faces(vertices: np.ndarray, faces: np.ndarray) -> tuple[np.ndarray, int]:
    """Drop degenerate faces (repeated indices), return (faces, dropped count)."""
    if faces.size == 0:
        return faces.reshape(0, 3).astype(np.int64), 0
    degen = (
        (faces[:, 0] == faces[:, 1])
        | (faces[:, 1] == faces[:, 2])
        | (faces[:, 2] == faces[:, 0])
    )
    dropped = int(degen.sum())
    if dropped:
        log.warning("dropped %d degenerate faces while loading", dropped)
    return faces[~degen], dropped


# ---------------------------------------------------------------------------
# PLY
# ---------------------------------------------------------------------------


def _parse_ply_header(fh) -> tuple[str, list]:
    magic = fh.readline().strip()
    if magic != b"ply":
        raise ValueError("not a PLY file")
    fmt = None
    elements: list = []  # (name, count, [(prop_name, dtype, is_list, count_dtype)])
    while True:
        line = fh.readline()
        if not line:
            raise ValueError("unterminated PLY header")
        tokens = line.decode("ascii", "replace").strip().split()
        if not tokens or tokens[0] == "comment":
            continue
        if tokens[0] == "format":
            fmt = tokens[1]
        elif tokens[0] == "element":
            elements.append((tokens[1], int(tokens[2]), []))
        elif tokens[0] == "property":
            if not elements:
                raise ValueError("property before element in PLY header")
            if tokens[1] == "list":
                elements[-1][2].append((tokens[4], _PLY_TYPES[tokens[3]], True, _PLY_TYPES[tokens[2]]))
            else:
                elements[-1][2].append((tokens[2], _PLY_TYPES[tokens[1]], False, None))
        elif tokens[0] == "end_header":
            break
    if fmt not in ("ascii", "binary_little_endian"):
        raise ValueError(f"unsupported PLY format {fmt!r}")
    return fmt, elements


def _read_ply(path: Path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, "rb") as fh:
        fmt, elements = _parse_ply_header(fh)
        body = fh.read()
    vertices = None
    faces = None
    offset = 0
    for name, count, props in elements:
        if fmt == "ascii":
            rows, offset = _ply_ascii_rows(body, offset, count)
        if name == "vertex":
            xyz_idx = [i for i, p in enumerate(props) if p[0] in ("x", "y", "z")]
            if len(xyz_idx) != 3 or any(p[2] for p in props):
                raise ValueError("PLY vertex element must carry scalar x y z")
            if fmt == "ascii":
                arr = np.array(
                    [[float(r[i]) for i in xyz_idx] for r in rows], dtype=np.float64
                )
            else:
                dt = np.dtype([(f"p{i}", "<" + p[1]) for i, p in enumerate(props)])
                raw = np.frombuffer(body, dtype=dt, count=count, offset=offset)
                offset += dt.itemsize * count
                arr = np.stack(
                    [raw[f"p{i}"].astype(np.float64) for i in xyz_idx], axis=1
                )
            vertices = arr.reshape(count, 3) if count else np.zeros((0, 3))
        elif name == "face":
            if not props or not props[0][2]:
                raise ValueError("PLY face element must start with a list property")
            _, idx_t, _, cnt_t = props[0]
            if len(props) > 1:
                raise ValueError("PLY face elements with extra properties unsupported")
            if fmt == "ascii":
                polys = [[int(x) for x in r[1 : 1 + int(r[0])]] for r in rows]
            else:
                polys, offset = _ply_binary_lists(body, offset, count, cnt_t, idx_t)
            tri = []
            for poly in polys:
                for k in range(1, len(poly) - 1):  # fan-triangulate
                    tri.append((poly[0], poly[k], poly[k + 1]))
            faces = np.array(tri, dtype=np.int64).reshape(-1, 3)
        else:
            if fmt != "ascii":  # skip unknown fixed-size element
                dt = np.dtype([(f"p{i}", "<" + p[1]) for i, p in enumerate(props)])
                if any(p[2] for p in props):
                    raise ValueError(f"cannot skip PLY list element {name!r}")
                offset += dt.itemsize * count
    if vertices is None:
        raise ValueError("PLY file has no vertex element")
    if faces is None:
        faces = np.zeros((0, 3), dtype=np.int64)
    return vertices, faces


def _ply_ascii_rows(body: bytes, offset: int, count: int) -> tuple[list, int]:
    rows = []
    pos = offset
    for _ in range(count):
        end = body.find(b"\n", pos)
        if end < 0:
            end = len(body)
        rows.append(body[pos:end].split())
        pos = end + 1
    return rows, pos


def _ply_binary_lists(body, offset, count, cnt_t, idx_t):
    cnt_dt = np.dtype("<" + cnt_t)
    idx_dt = np.dtype("<" + idx_t)
    polys = []
    pos = offset
    for _ in range(count):
        n = int(np.frombuffer(body, dtype=cnt_dt, count=1, offset=pos)[0])
        pos += cnt_dt.itemsize
        idx = np.frombuffer(body, dtype=idx_dt, count=n, offset=pos)
        pos += idx_dt.itemsize * n
        polys.append(idx.astype(np.int64).tolist())
    return polys, pos


def save_mesh(
    mesh: IndexedMesh,
    path: str | Path,
    binary: bool = True,
    face_colors: np.ndarray | None = None,
) -> None:
    """Write a PLY file. Binary mode stores double-precision vertices, so a
    save/load round trip is bit-exact. face_colors: optional (m, 3) uint8."""
    path = Path(path)
    m = mesh.n_faces
    header = ["ply"]
    header.append("format binary_little_endian 1.0" if binary else "format ascii 1.0")
    header += [
        f"element vertex {mesh.n_vertices}",
        "property double x",
        "property double y",
        "property double z",
        f"element face {m}",
        "property list uchar int vertex_indices",
    ]
    if face_colors is not None:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(np.ascontiguousarray(mesh.vertices, dtype="<f8").tobytes())
            if face_colors is None:
                rec = np.zeros(m, dtype=[("n", "u1"), ("v", "<i4", 3)])
                rec["n"] = 3
                rec["v"] = mesh.faces
            else:
                rec = np.zeros(
                    m, dtype=[("n", "u1"), ("v", "<i4", 3), ("c", "u1", 3)]
                )
                rec["n"] = 3
                rec["v"] = mesh.faces
                rec["c"] = face_colors
            fh.write(rec.tobytes())
        else:
            for v in mesh.vertices:
                fh.write(f"{v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n".encode("ascii"))
            for k, f in enumerate(mesh.faces):
                line = f"3 {f[0]} {f[1]} {f[2]}"
                if face_colors is not None:
                    c = face_colors[k]
                    line += f" {c[0]} {c[1]} {c[2]}"
                fh.write((line + "\n").encode("ascii"))


def save_cluster_debug_ply(mesh: IndexedMesh, face_labels: np.ndarray, path) -> None:
    """Cluster-colored PLY dump with a deterministic palette keyed by cluster id."""
    colors = np.array([cluster_color(int(c)) for c in face_labels], dtype=np.uint8)
    save_mesh(mesh, path, binary=True, face_colors=colors)


# ---------------------------------------------------------------------------
# OBJ
# ---------------------------------------------------------------------------


def _read_obj(path: Path) -> tuple[np.ndarray, np.ndarray]:
    verts = []
    faces = []
    with open(path, "r") as fh:
        for line in fh:
            tokens = line.split()
            if not tokens:
                continue
            if tokens[0] == "v":
                verts.append([float(x) for x in tokens[1:4]])
            elif tokens[0] == "f":
                idx = [int(t.split("/")[0]) for t in tokens[1:]]
                idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                for k in range(1, len(idx) - 1):
                    faces.append((idx[0], idx[k], idx[k + 1]))
    return np.array(verts, dtype=np.float64).reshape(-1, 3), np.array(
        faces, dtype=np.int64
    ).reshape(-1, 3)


def load_mesh(path: str | Path) -> IndexedMesh:
    """Load a PLY (ascii / binary little-endian) or OBJ mesh.

    Degenerate faces are dropped with a counted warning; a mesh with zero
    faces after cleaning is an error.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(path)
    suffix = path.suffix.lower()
    if suffix == ".ply":
        vertices, faces = _read_ply(path)
    elif suffix == ".obj":
        vertices, faces = _read_obj(path)
    else:
        raise ValueError(f"unsupported mesh format {suffix!r} (expected .ply or .obj)")
    faces, dropped = _clean_faces(vertices, faces)
    if len(faces) == 0:
        raise ValueError(f"{path}: no valid faces after degenerate cleaning")
    return IndexedMesh(vertices, faces, dropped_faces=dropped)


def save_textured_mesh(
    mesh: IndexedMesh,
    atlas: np.ndarray,
    uvs: np.ndarray,
    path: str | Path,
) -> None:
    """Write OBJ + MTL + PNG atlas.

    atlas: (H, W, 3) float in [0,1] or uint8. uvs: (m, 3, 2) per-face texture
    coordinates in [0,1]^2 (v measured upward per OBJ convention).
    """
    path = Path(path)
    uvs = np.asarray(uvs, dtype=np.float64)
    if uvs.shape != (mesh.n_faces, 3, 2):
        raise ValueError(f"uvs must be (m, 3, 2), got {uvs.shape}")
    if uvs.min() < -1e-9 or uvs.max() > 1 + 1e-9:
        raise ValueError("UV coordinates outside [0,1]^2")
    base = path.with_suffix("")
    obj_path = base.with_suffix(".obj")
    mtl_path = base.with_suffix(".mtl")
    png_path = base.with_suffix(".png")

    img = np.asarray(atlas)
    if img.dtype != np.uint8:
        img = (np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(img, mode="RGB").save(png_path)

    with open(mtl_path, "w") as fh:
        fh.write("newmtl atlas\nKa 1 1 1\nKd 1 1 1\nillum 1\n")
        fh.write(f"map_Kd {png_path.name}\n")

    # deduplicate identical texture coordinates across face corners
    uv_index: dict[tuple[float, float], int] = {}
    corner_vt = np.zeros((mesh.n_faces, 3), dtype=np.int64)
    for f in range(mesh.n_faces):
        for k in range(3):
            key = (float(uvs[f, k, 0]), float(uvs[f, k, 1]))
            idx = uv_index.get(key)
            if idx is None:
                idx = len(uv_index)
                uv_index[key] = idx
            corner_vt[f, k] = idx

    with open(obj_path, "w") as fh:
        fh.write(f"mtllib {mtl_path.name}\n")
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for (u, w_) in uv_index:
            fh.write(f"vt {u:.9g} {w_:.9g}\n")
        fh.write("usemtl atlas\n")
        for f, face in enumerate(mesh.faces):
            t = corner_vt[f]
            fh.write(
                f"f {face[0]+1}/{t[0]+1} {face[1]+1}/{t[1]+1} {face[2]+1}/{t[2]+1}\n"
            )

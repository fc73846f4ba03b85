"""Cluster-aware two-step QEM simplification.

Step 1 contracts only edges interior to a cluster (cluster-boundary and open
mesh-boundary vertices frozen), each cluster toward its own face target.
Step 2 freezes surviving inner edges and contracts the boundary edges
globally until the total face budget is met. A plain single-heap variant is
kept as the comparison baseline.
"""

from __future__ import annotations

import heapq
import logging
from dataclasses import dataclass

import numpy as np

from planelite.kernels.qem import edge_cost, face_quadrics, plane_quadric, unpack_quadric
from planelite.mesh_core import IndexedMesh, edge_face_incidence
from planelite.partition import ClusterSet, cluster_adjacency, vertex_labels_from_faces

log = logging.getLogger(__name__)

BOUNDARY_WEIGHT = 1e3  # open-boundary virtual plane quadric weight
_MIN_NORMAL = 1e-12


@dataclass
class SimplifyPlan:
    """Face targets: one floor per cluster for step 1, a global budget for step 2."""

    inner_targets: np.ndarray
    boundary_target: int
    global_budget: int

    def __post_init__(self) -> None:
        if (self.inner_targets < 0).any() or self.boundary_target < 0:
            raise ValueError("targets must be non-negative")


def make_plan(
    mesh: IndexedMesh,
    clusters: ClusterSet,
    global_ratio: float,
    min_faces: int = 2,
) -> SimplifyPlan:
    """Waterfill the face budget equally across clusters.

    Every cluster gets the same share, clamped below by min_faces and above
    by its current size, so small clusters come out relatively denser.
    """
    if not 0.0 < global_ratio < 1.0:
        raise ValueError("global_ratio must lie in (0, 1)")
    counts = np.bincount(clusters.face_labels, minlength=clusters.n_clusters).astype(np.int64)
    k = len(counts)
    budget = int(round(global_ratio * mesh.n_faces))
    budget = max(budget, k * min_faces)
    floor = np.minimum(counts, min_faces)
    if budget <= int(floor.sum()):
        targets = floor.copy()
    else:
        lo, hi = float(min_faces), float(counts.max())
        for _ in range(64):  # bisect the equal share
            mid = 0.5 * (lo + hi)
            total = np.minimum(counts, np.maximum(min_faces, mid)).sum()
            if total > budget:
                hi = mid
            else:
                lo = mid
        targets = np.minimum(counts, np.maximum(min_faces, int(lo))).astype(np.int64)
        # hand out the integer remainder deterministically by cluster id
        rest = budget - int(targets.sum())
        c = 0
        while rest > 0 and c < 10 * k:
            idx = c % k
            if targets[idx] < counts[idx]:
                targets[idx] += 1
                rest -= 1
            c += 1
    return SimplifyPlan(
        inner_targets=targets, boundary_target=budget, global_budget=budget
    )


def vertex_quadric(mesh: IndexedMesh, vertex: int) -> np.ndarray:
    """Summed fundamental quadric of a vertex's incident face planes (4x4)."""
    incident = np.any(mesh.faces == vertex, axis=1)
    if not incident.any():
        raise ValueError(f"vertex {vertex} has no incident faces")
    packed = face_quadrics(mesh.vertices, mesh.faces[incident]).sum(axis=0)
    return unpack_quadric(packed)


class _Contractor:
    """Mutable edge-collapse state shared by both simplification modes."""

    def __init__(self, mesh: IndexedMesh, face_labels: np.ndarray | None):
        self.V = mesh.vertices.copy()
        self.F = mesh.faces.copy()
        n, m = mesh.n_vertices, mesh.n_faces
        if face_labels is None:
            face_labels = np.zeros(m, dtype=np.int64)
        self.face_label = face_labels.astype(np.int64).copy()
        self.n_clusters = int(self.face_label.max()) + 1
        self.vert_label = vertex_labels_from_faces(mesh, self.face_label)
        self.face_alive = np.ones(m, dtype=bool)
        self.vert_alive = np.ones(n, dtype=bool)
        self.version = np.zeros(n, dtype=np.int64)
        self.cluster_faces = np.bincount(self.face_label, minlength=self.n_clusters)
        self.total_faces = m

        self.Q = np.zeros((n, 10), dtype=np.float64)
        fq = face_quadrics(self.V, self.F)
        for k in range(3):
            np.add.at(self.Q, self.F[:, k], fq)

        self.vertex_faces: list[set[int]] = [set() for _ in range(n)]
        for f in range(m):
            for k in range(3):
                self.vertex_faces[self.F[f, k]].add(f)

        edges, edge_faces, counts = edge_face_incidence(mesh)
        self.init_edges = edges
        self.init_edge_faces = edge_faces
        self.init_edge_counts = counts
        open_edge = counts == 1
        nonmanifold = counts > 2
        lbl_a = self.face_label[edge_faces[:, 0]]
        lbl_b = np.where(edge_faces[:, 1] >= 0, self.face_label[edge_faces[:, 1]], -1)
        cluster_bnd = (edge_faces[:, 1] >= 0) & (lbl_a != lbl_b)
        frozen = open_edge | nonmanifold | cluster_bnd
        self.boundary_vertex = np.zeros(n, dtype=bool)
        self.boundary_vertex[edges[frozen].reshape(-1)] = True

        # open-boundary preservation: virtual planes through boundary edges
        for e in np.flatnonzero(open_edge):
            a, b = edges[e]
            f = edge_faces[e, 0]
            fv = mesh.vertices[mesh.faces[f]]
            fn = np.cross(fv[1] - fv[0], fv[2] - fv[0])
            fn_norm = np.linalg.norm(fn)
            if fn_norm < _MIN_NORMAL:
                continue
            fn = fn / fn_norm
            ed = mesh.vertices[b] - mesh.vertices[a]
            elen = np.linalg.norm(ed)
            if elen < _MIN_NORMAL:
                continue
            vn = np.cross(ed / elen, fn)
            vn_norm = np.linalg.norm(vn)
            if vn_norm < _MIN_NORMAL:
                continue
            vn = vn / vn_norm
            kq = plane_quadric(vn, float(-vn @ mesh.vertices[a]), BOUNDARY_WEIGHT * elen * elen)
            self.Q[a] += kq
            self.Q[b] += kq

    # -- queries ------------------------------------------------------------

    def common_faces(self, u: int, v: int) -> list[int]:
        return sorted(self.vertex_faces[u] & self.vertex_faces[v])

    def neighbors(self, u: int) -> set[int]:
        out: set[int] = set()
        for f in self.vertex_faces[u]:
            out.update(int(x) for x in self.F[f])
        out.discard(u)
        return out

    def edge_is_boundary(self, u: int, v: int) -> bool:
        cf = self.common_faces(u, v)
        if len(cf) == 1:
            return True
        if len(cf) == 2:
            return self.face_label[cf[0]] != self.face_label[cf[1]]
        return False

    def candidate(self, u: int, v: int):
        """(cost, position) for contracting edge (u, v)."""
        q = self.Q[u] + self.Q[v]
        return edge_cost(q, self.V[u], self.V[v])

    def _flip_or_degenerate(self, u: int, v: int, pos: np.ndarray, dying: list[int]) -> bool:
        """True if moving u,v to pos flips or squashes any surviving face."""
        dying_set = set(dying)
        for f in (self.vertex_faces[u] | self.vertex_faces[v]) - dying_set:
            ids = self.F[f]
            before = np.cross(
                self.V[ids[1]] - self.V[ids[0]], self.V[ids[2]] - self.V[ids[0]]
            )
            pts = [
                pos if (i == u or i == v) else self.V[i] for i in ids
            ]
            after = np.cross(pts[1] - pts[0], pts[2] - pts[0])
            na = np.linalg.norm(after)
            if na < _MIN_NORMAL:
                return True
            if float(before @ after) <= 0.0:
                return True
        return False

    def try_contract(self, u: int, v: int, pos: np.ndarray, inherit_label: bool) -> bool:
        """Contract edge (u, v) into min(u, v) at pos. False when rejected."""
        dying = self.common_faces(u, v)
        if len(dying) == 0 or len(dying) > 2:
            return False
        # never empty a cluster
        dying_labels = np.bincount(
            self.face_label[dying], minlength=self.n_clusters
        )
        if ((self.cluster_faces - dying_labels) < 1)[dying_labels > 0].any():
            return False
        if self._flip_or_degenerate(u, v, pos, dying):
            return False

        keep, drop = (u, v) if u < v else (v, u)
        if inherit_label:
            lu = self._own_cluster_face_count(u)
            lv = self._own_cluster_face_count(v)
            label = self.vert_label[u] if lu >= lv else self.vert_label[v]
            self.vert_label[keep] = label

        for f in dying:
            ids = [int(x) for x in self.F[f]]
            for i in ids:
                self.vertex_faces[i].discard(f)
            self.face_alive[f] = False
            self.cluster_faces[self.face_label[f]] -= 1
            self.total_faces -= 1

        for f in list(self.vertex_faces[drop]):
            row = self.F[f]
            row[row == drop] = keep
            self.vertex_faces[keep].add(f)
        self.vertex_faces[drop] = set()

        self.V[keep] = pos
        self.Q[keep] = self.Q[u] + self.Q[v]
        self.vert_alive[drop] = False
        self.version[u] += 1
        self.version[v] += 1
        return True

    def _own_cluster_face_count(self, u: int) -> int:
        lbl = self.vert_label[u]
        return sum(1 for f in self.vertex_faces[u] if self.face_label[f] == lbl)

    def finish(self) -> tuple[IndexedMesh, np.ndarray]:
        """Compact to a new mesh plus surviving per-face labels."""
        faces = self.F[self.face_alive]
        labels = self.face_label[self.face_alive]
        # contraction can leave alive vertices with no faces; keep referenced only
        kept = np.unique(faces)
        vmap = np.full(len(self.V), -1, dtype=np.int64)
        vmap[kept] = np.arange(len(kept))
        mesh = IndexedMesh(
            self.V[kept], vmap[faces], vertex_labels=self.vert_label[kept]
        )
        return mesh, labels


def _heap_push(heap, ctr: _Contractor, u: int, v: int) -> None:
    a, b = (u, v) if u < v else (v, u)
    cost, pos = ctr.candidate(a, b)
    heapq.heappush(
        heap,
        (cost, a, b, int(ctr.version[a]), int(ctr.version[b]),
         (pos[0], pos[1], pos[2])),
    )


def _heap_pop_valid(heap, ctr: _Contractor):
    while heap:
        cost, a, b, va, vb, pos = heapq.heappop(heap)
        if not (ctr.vert_alive[a] and ctr.vert_alive[b]):
            continue
        if ctr.version[a] != va or ctr.version[b] != vb:
            continue
        yield cost, a, b, np.array(pos)


def simplify_two_step(
    mesh: IndexedMesh,
    clusters: ClusterSet,
    plan: SimplifyPlan,
) -> tuple[IndexedMesh, ClusterSet]:
    """Run inner-cluster then boundary contraction down to the plan targets.

    Returns the simplified mesh (with per-vertex labels) and a ClusterSet
    with remapped face labels; proxies are carried over unchanged.
    """
    ctr = _Contractor(mesh, clusters.face_labels)
    k = ctr.n_clusters
    if len(plan.inner_targets) != k:
        raise ValueError("plan target count does not match cluster count")

    edges = ctr.init_edges
    counts = ctr.init_edge_counts
    lbl_a = ctr.face_label[ctr.init_edge_faces[:, 0]]
    lbl_b = np.where(
        ctr.init_edge_faces[:, 1] >= 0, ctr.face_label[ctr.init_edge_faces[:, 1]], -1
    )
    inner = (counts == 2) & (lbl_a == lbl_b)
    inner &= ~ctr.boundary_vertex[edges[:, 0]] & ~ctr.boundary_vertex[edges[:, 1]]

    # step 1: per-cluster heaps over interior edges
    for c in range(k):
        target = int(plan.inner_targets[c])
        sel = inner & (lbl_a == c)
        heap: list = []
        for a, b in edges[sel]:
            _heap_push(heap, ctr, int(a), int(b))
        for cost, a, b, pos in _heap_pop_valid(heap, ctr):
            if ctr.cluster_faces[c] <= target:
                break
            if len(ctr.common_faces(a, b)) != 2:
                continue
            if not ctr.try_contract(a, b, pos, inherit_label=False):
                continue
            keep = min(a, b)
            for w in sorted(ctr.neighbors(keep)):
                if (
                    not ctr.boundary_vertex[w]
                    and ctr.vert_label[w] == c
                    and len(ctr.common_faces(keep, w)) == 2
                ):
                    _heap_push(heap, ctr, keep, w)

    step1_boundary = set(map(int, np.flatnonzero(ctr.boundary_vertex)))

    # step 2: one global heap over cluster-boundary and open-boundary edges
    heap = []
    seen: set[tuple[int, int]] = set()
    for a, b in edges:
        a, b = int(a), int(b)
        if not (ctr.vert_alive[a] and ctr.vert_alive[b]):
            continue
        if not (ctr.boundary_vertex[a] and ctr.boundary_vertex[b]):
            continue
        if ctr.edge_is_boundary(a, b):
            key = (min(a, b), max(a, b))
            if key not in seen:
                seen.add(key)
                _heap_push(heap, ctr, a, b)
    for cost, a, b, pos in _heap_pop_valid(heap, ctr):
        if ctr.total_faces <= plan.boundary_target:
            break
        if not ctr.edge_is_boundary(a, b):
            continue
        if not ctr.try_contract(a, b, pos, inherit_label=True):
            continue
        keep = min(a, b)
        ctr.boundary_vertex[keep] = True
        for w in sorted(ctr.neighbors(keep)):
            if ctr.boundary_vertex[w] and ctr.edge_is_boundary(keep, w):
                _heap_push(heap, ctr, keep, w)

    out_mesh, out_labels = ctr.finish()
    out_clusters = ClusterSet(
        face_labels=out_labels,
        proxies=list(clusters.proxies),
        adjacency=cluster_adjacency(out_mesh, out_labels, k),
    )
    log.info(
        "simplify: %d -> %d faces (budget %d); step-1 boundary vertices preserved: %d",
        mesh.n_faces, out_mesh.n_faces, plan.global_budget, len(step1_boundary),
    )
    return out_mesh, out_clusters


def simplify_global(mesh: IndexedMesh, target_faces: int) -> IndexedMesh:
    """Single-heap QEM over all edges; the comparison baseline mode.

    Open mesh boundaries carry the same virtual-plane quadrics as the
    two-step path; cluster structure is ignored.
    """
    ctr = _Contractor(mesh, None)
    heap: list = []
    for a, b in ctr.init_edges[ctr.init_edge_counts <= 2]:
        _heap_push(heap, ctr, int(a), int(b))
    for cost, a, b, pos in _heap_pop_valid(heap, ctr):
        if ctr.total_faces <= target_faces:
            break
        ncf = len(ctr.common_faces(a, b))
        if ncf == 0 or ncf > 2:
            continue
        if not ctr.try_contract(a, b, pos, inherit_label=False):
            continue
        keep = min(a, b)
        for w in sorted(ctr.neighbors(keep)):
            if len(ctr.common_faces(keep, w)) in (1, 2):
                _heap_push(heap, ctr, keep, w)
    out_mesh, _ = ctr.finish()
    return out_mesh

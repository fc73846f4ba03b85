"""Partition a mesh into near-planar clusters and merge coplanar neighbors.

The partition alternates priority-queue region growth over faces with PCA
proxy refits, splitting the least-flat cluster until every cluster's smallest
covariance eigenvalue drops below a threshold. Merging then joins adjacent
clusters whose proxies agree in normal, mutual distance, and centroid-ray
alignment.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from planelite.config import PipelineConfig
from planelite.kernels import grow_from_seeds
from planelite.mesh_core import IndexedMesh, face_adjacency_csr, face_centroids, face_normals

log = logging.getLogger(__name__)


@dataclass
class PlaneProxy:
    """Infinite plane {x : normal . x + offset = 0} with the cluster centroid."""

    normal: np.ndarray
    offset: float
    centroid: np.ndarray

    def distance(self, points: np.ndarray) -> np.ndarray:
        return np.abs(np.asarray(points) @ self.normal + self.offset)

    def to_dict(self) -> dict:
        return {
            "normal": self.normal.tolist(),
            "offset": float(self.offset),
            "centroid": self.centroid.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PlaneProxy":
        return cls(
            normal=np.asarray(d["normal"], dtype=np.float64),
            offset=float(d["offset"]),
            centroid=np.asarray(d["centroid"], dtype=np.float64),
        )


@dataclass
class ClusterSet:
    """Per-face cluster labels, one proxy per cluster, and the cluster graph."""

    face_labels: np.ndarray
    proxies: list[PlaneProxy]
    adjacency: list[set[int]] = field(default_factory=list)

    @property
    def n_clusters(self) -> int:
        return len(self.proxies)

    def cluster_faces(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.face_labels == c)


def fit_proxy(points: np.ndarray, orient: np.ndarray | None = None) -> PlaneProxy:
    """PCA plane fit: centroid mean, normal = smallest-eigenvalue direction.

    orient: optional direction the normal sign should agree with (e.g. the
    area-weighted mean face normal). Raises on degenerate (collinear) input.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) < 3:
        raise ValueError("need at least 3 points to fit a plane")
    c = pts.mean(axis=0)
    d = pts - c
    cov = d.T @ d / len(pts)
    evals, evecs = np.linalg.eigh(cov)
    if evals[1] <= max(evals[2] * 1e-12, 1e-30):
        raise ValueError("degenerate point set: points are collinear or coincident")
    n = evecs[:, 0]
    if orient is not None and float(n @ orient) < 0:
        n = -n
    elif orient is None:
        k = int(np.argmax(np.abs(n)))
        if n[k] < 0:
            n = -n
    n = n / np.linalg.norm(n)
    return PlaneProxy(normal=n, offset=float(-n @ c), centroid=c)


def avg_distance(points: np.ndarray, proxy: PlaneProxy) -> float:
    """Mean absolute point-to-plane distance of a vertex set to a proxy."""
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) == 0:
        raise ValueError("empty cluster")
    return float(np.mean(np.abs(pts @ proxy.normal + proxy.offset)))


def can_merge(
    points_i: np.ndarray,
    points_j: np.ndarray,
    proxy_i: PlaneProxy,
    proxy_j: PlaneProxy,
    cfg: PipelineConfig,
) -> bool:
    """Merge predicate for two adjacent clusters.

    True iff the proxy normals agree within the angle threshold, each cluster
    lies near the other's plane, and the centroid-connecting ray is close to
    perpendicular to both normals (rejects stacked parallel planes).
    """
    cosang = float(np.clip(proxy_i.normal @ proxy_j.normal, -1.0, 1.0))
    if np.degrees(np.arccos(cosang)) >= cfg.merge_angle_deg:
        return False
    if avg_distance(points_i, proxy_j) >= cfg.merge_dist:
        return False
    if avg_distance(points_j, proxy_i) >= cfg.merge_dist:
        return False
    r = proxy_i.centroid - proxy_j.centroid
    rn = np.linalg.norm(r)
    if rn < 1e-12:
        return True  # coincident centroids: ray direction undefined, treat as side-by-side
    r = r / rn
    if abs(float(r @ proxy_i.normal)) >= cfg.merge_center_cos:
        return False
    if abs(float(r @ proxy_j.normal)) >= cfg.merge_center_cos:
        return False
    return True


def normal_angle_deg(a: PlaneProxy, b: PlaneProxy) -> float:
    return float(np.degrees(np.arccos(np.clip(a.normal @ b.normal, -1.0, 1.0))))


# ---------------------------------------------------------------------------
# partition internals
# ---------------------------------------------------------------------------


def _cluster_vertex_ids(faces: np.ndarray, labels: np.ndarray, k: int) -> list[np.ndarray]:
    """Unique vertex ids per cluster."""
    out = []
    lbl3 = np.repeat(labels, 3)
    vid = faces.reshape(-1)
    order = np.lexsort((vid, lbl3))
    lbl_s = lbl3[order]
    vid_s = vid[order]
    bounds = np.searchsorted(lbl_s, np.arange(k + 1))
    for c in range(k):
        out.append(np.unique(vid_s[bounds[c] : bounds[c + 1]]))
    return out


def _refit_all(
    mesh: IndexedMesh,
    labels: np.ndarray,
    k: int,
    fnormals: np.ndarray,
    fareas: np.ndarray,
) -> tuple[list[PlaneProxy], np.ndarray]:
    """PCA proxies for every cluster plus smallest covariance eigenvalues."""
    vsets = _cluster_vertex_ids(mesh.faces, labels, k)
    area_n = np.zeros((k, 3))
    np.add.at(area_n, labels, fnormals * fareas[:, None])
    proxies = []
    lmin = np.zeros(k)
    for c in range(k):
        pts = mesh.vertices[vsets[c]]
        cmean = pts.mean(axis=0)
        d = pts - cmean
        cov = d.T @ d / len(pts)
        evals, evecs = np.linalg.eigh(cov)
        n = evecs[:, 0]
        if float(n @ area_n[c]) < 0:
            n = -n
        n = n / np.linalg.norm(n)
        proxies.append(PlaneProxy(normal=n, offset=float(-n @ cmean), centroid=cmean))
        lmin[c] = max(evals[0], 0.0)
    return proxies, lmin


def _proxy_arrays(proxies: list[PlaneProxy]) -> tuple[np.ndarray, np.ndarray]:
    normals = np.stack([p.normal for p in proxies]) if proxies else np.zeros((0, 3))
    offsets = np.array([p.offset for p in proxies], dtype=np.float64)
    return normals, offsets


def _teleport_seeds(
    centroids: np.ndarray, labels: np.ndarray, proxies: list[PlaneProxy], k: int
) -> np.ndarray:
    """Seed face per cluster = face whose centroid best fits the proxy (tie: low id)."""
    normals, offsets = _proxy_arrays(proxies)
    d2 = (centroids @ normals.T + offsets[None, :]) ** 2
    seeds = np.empty(k, dtype=np.int64)
    for c in range(k):
        members = np.flatnonzero(labels == c)
        seeds[c] = members[np.argmin(d2[members, c])]
    return seeds


def _label_components(indptr, indices, labels):
    """Assign fresh labels to unlabeled faces, one per connected component."""
    k = int(labels.max()) + 1 if labels.size else 0
    for start in np.flatnonzero(labels == -1):
        if labels[start] != -1:
            continue
        stack = [int(start)]
        labels[start] = k
        while stack:
            f = stack.pop()
            for j in range(indptr[f], indptr[f + 1]):
                nb = int(indices[j])
                if labels[nb] == -1:
                    labels[nb] = k
                    stack.append(nb)
        k += 1
    return labels, k


def cluster_adjacency(mesh: IndexedMesh, labels: np.ndarray, k: int) -> list[set[int]]:
    """Cluster graph: edges between clusters sharing a mesh edge."""
    adj_csr = face_adjacency_csr(mesh)
    coo = adj_csr.tocoo()
    li = labels[coo.row]
    lj = labels[coo.col]
    diff = li != lj
    out: list[set[int]] = [set() for _ in range(k)]
    for a, b in zip(li[diff], lj[diff]):
        out[int(a)].add(int(b))
        out[int(b)].add(int(a))
    return out


def _consolidate_redundant(
    mesh: IndexedMesh, labels: np.ndarray, k: int, split_eigenvalue: float
) -> tuple[np.ndarray, int, bool]:
    """Merge adjacent cluster pairs whose union is still flat.

    Seed splitting can leave two clusters on one plane; the union's smallest
    covariance eigenvalue (face-corner weighted) detects that. Pairs merge
    flattest-first until none qualifies.
    """
    v = mesh.vertices
    f = mesh.faces
    changed = False
    while True:
        cnt = np.bincount(labels, minlength=k).astype(np.float64) * 3.0
        s1 = np.zeros((k, 3))
        s2 = np.zeros((k, 3, 3))
        corners = v[f]  # (m, 3, 3)
        for c in range(3):
            np.add.at(s1, labels, corners[:, c, :])
            np.add.at(s2, labels, corners[:, c, :, None] * corners[:, c, None, :])
        adj = cluster_adjacency(mesh, labels, k)
        best = None
        for i in range(k):
            for j in sorted(adj[i]):
                if j <= i:
                    continue
                n = cnt[i] + cnt[j]
                mean = (s1[i] + s1[j]) / n
                cov = (s2[i] + s2[j]) / n - np.outer(mean, mean)
                lmin = float(np.linalg.eigvalsh(cov)[0])
                if lmin < split_eigenvalue:
                    cand = (lmin, i, j)
                    if best is None or cand < best:
                        best = cand
        if best is None:
            return labels, k, changed
        _, i, j = best
        labels = labels.copy()
        labels[labels == j] = i
        labels[labels > j] -= 1
        k -= 1
        changed = True


def partition_planes(mesh: IndexedMesh, cfg: PipelineConfig) -> ClusterSet:
    """Partition every face into a connected, near-planar cluster.

    Always returns a full labeling; a single cluster is legal for a planar
    mesh. Proxies are PCA fits of the cluster vertex sets.
    """
    centroids = face_centroids(mesh)
    fnormals, fareas = face_normals(mesh)
    adj = face_adjacency_csr(mesh)
    indptr = adj.indptr.astype(np.int64)
    indices = adj.indices.astype(np.int64)
    m = mesh.n_faces

    # first seed: face nearest the centroid cloud center (deterministic)
    center = centroids.mean(axis=0)
    seed0 = int(np.argmin(np.einsum("ij,ij->i", centroids - center, centroids - center)))
    seeds = np.array([seed0], dtype=np.int64)
    seed_proxies = [
        PlaneProxy(
            normal=fnormals[seed0],
            offset=float(-fnormals[seed0] @ centroids[seed0]),
            centroid=centroids[seed0],
        )
    ]

    def grow(seeds_arr, proxies):
        normals, offsets = _proxy_arrays(proxies)
        seed_pts = centroids[seeds_arr]
        labels = grow_from_seeds(
            indptr, indices, centroids, seeds_arr, normals, offsets, seed_pts, cfg.alpha
        )
        labels, k = _label_components(indptr, indices, labels)
        # clusters can starve when a coplanar tie steals their seed; drop them
        counts = np.bincount(labels, minlength=k)
        if (counts == 0).any():
            remap = np.cumsum(counts > 0) - 1
            labels = remap[labels]
            k = int(remap[-1]) + 1
        return labels, k

    labels, k = grow(seeds, seed_proxies)
    proxies, lmin = _refit_all(mesh, labels, k, fnormals, fareas)

    while True:
        # Lloyd iterations: teleport seeds, regrow, refit
        for _ in range(max(cfg.lloyd_iters, 1)):
            seeds = _teleport_seeds(centroids, labels, proxies, k)
            labels, k2 = grow(seeds, proxies)
            if k2 != k:  # components without seeds got fresh labels
                k = k2
            proxies, lmin = _refit_all(mesh, labels, k, fnormals, fareas)
        labels, k, merged = _consolidate_redundant(mesh, labels, k, cfg.split_eigenvalue)
        if merged:
            proxies, lmin = _refit_all(mesh, labels, k, fnormals, fareas)
        worst = int(np.argmax(lmin))
        if lmin[worst] < cfg.split_eigenvalue or k >= cfg.max_clusters:
            break
        # split the least-flat cluster at its worst-fitting face
        members = np.flatnonzero(labels == worst)
        d = np.abs(centroids[members] @ proxies[worst].normal + proxies[worst].offset)
        new_seed = int(members[np.argmax(d)])
        seeds = np.append(_teleport_seeds(centroids, labels, proxies, k), new_seed)
        grown_proxies = proxies + [
            PlaneProxy(
                normal=fnormals[new_seed],
                offset=float(-fnormals[new_seed] @ centroids[new_seed]),
                centroid=centroids[new_seed],
            )
        ]
        labels, k = grow(seeds, grown_proxies)
        proxies, lmin = _refit_all(mesh, labels, k, fnormals, fareas)

    log.info("partition: %d clusters on %d faces", k, m)
    return ClusterSet(
        face_labels=labels, proxies=proxies, adjacency=cluster_adjacency(mesh, labels, k)
    )


def merge_planes(mesh: IndexedMesh, clusters: ClusterSet, cfg: PipelineConfig) -> ClusterSet:
    """Greedy best-first merging of adjacent coplanar clusters.

    Pairs are merged smallest-normal-angle-first; proxies are refit after each
    merge; the loop ends when no adjacent pair satisfies can_merge.
    """
    labels = clusters.face_labels.copy()
    k = clusters.n_clusters
    fnormals, fareas = face_normals(mesh)
    vsets = _cluster_vertex_ids(mesh.faces, labels, k)
    proxies = list(clusters.proxies)
    adjacency = [set(s) for s in clusters.adjacency]
    alive = [True] * k

    area_n = np.zeros((k, 3))
    np.add.at(area_n, labels, fnormals * fareas[:, None])

    gen = [0] * k  # bumped on refit so cached predicate results invalidate
    pred_cache: dict[tuple[int, int, int, int], bool] = {}

    def mergeable(i: int, j: int) -> bool:
        key = (i, j, gen[i], gen[j])
        hit = pred_cache.get(key)
        if hit is None:
            hit = can_merge(
                mesh.vertices[vsets[i]], mesh.vertices[vsets[j]],
                proxies[i], proxies[j], cfg,
            )
            pred_cache[key] = hit
        return hit

    while True:
        best = None
        for i in range(k):
            if not alive[i]:
                continue
            for j in sorted(adjacency[i]):
                if j <= i or not alive[j]:
                    continue
                if mergeable(i, j):
                    ang = normal_angle_deg(proxies[i], proxies[j])
                    cand = (ang, i, j)
                    if best is None or cand < best:
                        best = cand
        if best is None:
            break
        _, i, j = best
        labels[labels == j] = i
        vsets[i] = np.union1d(vsets[i], vsets[j])
        area_n[i] += area_n[j]
        proxies[i] = fit_proxy(mesh.vertices[vsets[i]], orient=area_n[i])
        gen[i] += 1
        adjacency[i] |= adjacency[j]
        adjacency[i].discard(i)
        adjacency[i].discard(j)
        for nb in adjacency[j]:
            adjacency[nb].discard(j)
            if nb != i:
                adjacency[nb].add(i)
                adjacency[i].add(nb)
        adjacency[j] = set()
        alive[j] = False

    # compact labels to 0..k'-1 preserving ascending old-id order
    old_ids = [c for c in range(k) if alive[c]]
    remap = {old: new for new, old in enumerate(old_ids)}
    new_labels = np.array([remap[int(c)] for c in labels], dtype=np.int64)
    new_proxies = [proxies[c] for c in old_ids]
    new_adf = [set(remap[x] for x in adjacency[c]) for c in old_ids]
    log.info("merge: %d -> %d clusters", k, len(old_ids))
    return ClusterSet(face_labels=new_labels, proxies=new_proxies, adjacency=new_adf)


def vertex_labels_from_faces(mesh: IndexedMesh, face_labels: np.ndarray) -> np.ndarray:
    """Per-vertex cluster id: majority label of incident faces, ties -> lower id."""
    vid = mesh.faces.reshape(-1)
    lbl = np.repeat(face_labels, 3)
    order = np.lexsort((lbl, vid))
    vid_s = vid[order]
    lbl_s = lbl[order]
    out = np.full(mesh.n_vertices, -1, dtype=np.int64)
    n = len(vid_s)
    i = 0
    while i < n:
        j = i
        best_label = -1
        best_count = 0
        while j < n and vid_s[j] == vid_s[i]:
            t = j
            while t < n and vid_s[t] == vid_s[i] and lbl_s[t] == lbl_s[j]:
                t += 1
            count = t - j
            if count > best_count:  # strict: ties keep the earlier (lower) label
                best_count = count
                best_label = lbl_s[j]
            j = t
        out[vid_s[i]] = best_label
        i = j
    return out

"""Priority-queue region growth over the face adjacency graph.

Faces are conquered in order of (energy, face id, cluster id); energy is the
squared face-centroid distance to the cluster plane plus a compactness term
alpha * squared distance to the cluster seed point. Both backends pop in the
same lexicographic order, so labels agree exactly.
"""

from __future__ import annotations

import heapq

import numpy as np

from planelite import backend
from planelite.backend import njit


def _face_energy(centroid, normal, offset, seed_pt, alpha):
    d = centroid[0] * normal[0] + centroid[1] * normal[1] + centroid[2] * normal[2] + offset
    dx = centroid[0] - seed_pt[0]
    dy = centroid[1] - seed_pt[1]
    dz = centroid[2] - seed_pt[2]
    return d * d + alpha * (dx * dx + dy * dy + dz * dz)


def _grow_numpy(indptr, indices, centroids, seeds, normals, offsets, seed_pts, alpha):
    m = len(centroids)
    labels = np.full(m, -1, dtype=np.int64)
    heap: list[tuple[float, int, int]] = []
    for k, s in enumerate(seeds):
        heapq.heappush(heap, (0.0, int(s), k))
    while heap:
        _, face, k = heapq.heappop(heap)
        if labels[face] != -1:
            continue
        labels[face] = k
        for j in range(indptr[face], indptr[face + 1]):
            nb = int(indices[j])
            if labels[nb] == -1:
                e = _face_energy(centroids[nb], normals[k], offsets[k], seed_pts[k], alpha)
                heapq.heappush(heap, (e, nb, k))
    return labels


@njit(cache=True)
def _grow_njit(indptr, indices, centroids, seeds, normals, offsets, seed_pts, alpha):  # pragma: no cover - exercised via dispatch
    m = centroids.shape[0]
    labels = np.full(m, -1, dtype=np.int64)
    cap = 3 * indices.shape[0] // 2 + seeds.shape[0] + 8
    h_cost = np.empty(cap, dtype=np.float64)
    h_face = np.empty(cap, dtype=np.int64)
    h_clus = np.empty(cap, dtype=np.int64)
    size = 0

    for k in range(seeds.shape[0]):
        h_cost[size] = 0.0
        h_face[size] = seeds[k]
        h_clus[size] = k
        size += 1
        i = size - 1
        while i > 0:  # sift up
            p = (i - 1) // 2
            if _heap_less(h_cost, h_face, h_clus, i, p):
                _heap_swap(h_cost, h_face, h_clus, i, p)
                i = p
            else:
                break

    while size > 0:
        face = h_face[0]
        k = h_clus[0]
        size -= 1
        h_cost[0] = h_cost[size]
        h_face[0] = h_face[size]
        h_clus[0] = h_clus[size]
        i = 0
        while True:  # sift down
            l = 2 * i + 1
            r = l + 1
            sm = i
            if l < size and _heap_less(h_cost, h_face, h_clus, l, sm):
                sm = l
            if r < size and _heap_less(h_cost, h_face, h_clus, r, sm):
                sm = r
            if sm == i:
                break
            _heap_swap(h_cost, h_face, h_clus, i, sm)
            i = sm

        if labels[face] != -1:
            continue
        labels[face] = k
        for j in range(indptr[face], indptr[face + 1]):
            nb = indices[j]
            if labels[nb] == -1:
                d = (
                    centroids[nb, 0] * normals[k, 0]
                    + centroids[nb, 1] * normals[k, 1]
                    + centroids[nb, 2] * normals[k, 2]
                    + offsets[k]
                )
                dx = centroids[nb, 0] - seed_pts[k, 0]
                dy = centroids[nb, 1] - seed_pts[k, 1]
                dz = centroids[nb, 2] - seed_pts[k, 2]
                e = d * d + alpha * (dx * dx + dy * dy + dz * dz)
                if size >= cap:  # grow heap storage
                    new_cap = cap * 2
                    nc = np.empty(new_cap, dtype=np.float64)
                    nf = np.empty(new_cap, dtype=np.int64)
                    nk = np.empty(new_cap, dtype=np.int64)
                    nc[:size] = h_cost[:size]
                    nf[:size] = h_face[:size]
                    nk[:size] = h_clus[:size]
                    h_cost, h_face, h_clus, cap = nc, nf, nk, new_cap
                h_cost[size] = e
                h_face[size] = nb
                h_clus[size] = k
                size += 1
                i = size - 1
                while i > 0:
                    p = (i - 1) // 2
                    if _heap_less(h_cost, h_face, h_clus, i, p):
                        _heap_swap(h_cost, h_face, h_clus, i, p)
                        i = p
                    else:
                        break
    return labels


@njit(cache=True, inline="always")
def _heap_less(cost, face, clus, a, b):  # pragma: no cover
    if cost[a] != cost[b]:
        return cost[a] < cost[b]
    if face[a] != face[b]:
        return face[a] < face[b]
    return clus[a] < clus[b]


@njit(cache=True, inline="always")
def _heap_swap(cost, face, clus, a, b):  # pragma: no cover
    cost[a], cost[b] = cost[b], cost[a]
    face[a], face[b] = face[b], face[a]
    clus[a], clus[b] = clus[b], clus[a]


def grow_from_seeds(
    indptr: np.ndarray,
    indices: np.ndarray,
    centroids: np.ndarray,
    seeds: np.ndarray,
    normals: np.ndarray,
    offsets: np.ndarray,
    seed_pts: np.ndarray,
    alpha: float,
) -> np.ndarray:
    """Label every reachable face with the cluster that conquered it first.

    Unreachable faces (components without a seed) keep label -1.
    """
    args = (
        np.ascontiguousarray(indptr, dtype=np.int64),
        np.ascontiguousarray(indices, dtype=np.int64),
        np.ascontiguousarray(centroids, dtype=np.float64),
        np.ascontiguousarray(seeds, dtype=np.int64),
        np.ascontiguousarray(normals, dtype=np.float64),
        np.ascontiguousarray(offsets, dtype=np.float64),
        np.ascontiguousarray(seed_pts, dtype=np.float64),
        float(alpha),
    )
    if backend.get_backend() == "numba":
        return _grow_njit(*args)
    return _grow_numpy(*args)

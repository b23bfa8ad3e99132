"""Geometric kernels on raw point sets.

Everything here operates on plain ``numpy`` arrays of shape ``(n, d)`` and
never touches the autodiff graph: k-NN queries, farthest point sampling,
geodesic patch extraction, patch normalization and coarse downsampling.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra

# rows of the pairwise-difference block evaluated at once in knn
_KNN_CHUNK = 256


class DegeneratePatchError(ValueError):
    """Raised when a patch collapses to a single location."""


class GeodesicFallbackWarning(UserWarning):
    """Emitted when a geodesic patch had to be topped up by Euclidean distance."""


@dataclass
class NeighborGraph:
    k: int
    indices: np.ndarray
    distances: np.ndarray


@dataclass
class Patch:
    points: np.ndarray
    center: np.ndarray
    scale: float
    source_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self):
        return len(self.points)

    def denormalize(self, points=None):
        pts = self.points if points is None else np.asarray(points, dtype=np.float64)
        return pts * self.scale + self.center


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face index out of range")

    @property
    def triangles(self):
        return self.vertices[self.faces]

    def areas(self):
        t = self.triangles
        return 0.5 * np.linalg.norm(np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0]), axis=1)

    def drop_degenerate(self, tol=0.0):
        return TriangleMesh(self.vertices, self.faces[self.areas() > tol])


def as_points(points, dim=None):
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or len(pts) == 0:
        raise ValueError(f"expected a non-empty (n, d) point array, got shape {pts.shape}")
    if dim is not None and pts.shape[1] != dim:
        raise ValueError(f"expected {dim}-D points, got shape {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ValueError("point coordinates must be finite")
    return pts


def squared_distances(a, b):
    """Exact pairwise squared distances, summed coordinate by coordinate."""
    if a.shape[1] > 8:
        diff = a[:, None, :] - b[None, :, :]
        return np.sum(diff * diff, axis=-1)
    out = np.zeros((len(a), len(b)))
    for c in range(a.shape[1]):
        d = a[:, c, None] - b[None, :, c]
        out += d * d
    return out


def knn(points, k):
    """Exact k-nearest neighbors of every point among the others.

    The query point itself is never returned. Ties are resolved in favour of
    the lower index, so the result is fully deterministic.
    """
    pts = as_points(points)
    n = len(pts)
    k = int(k)
    if k < 1 or k >= n:
        raise ValueError(f"knn needs 1 <= k < n, got k={k} for n={n}")
    indices = np.empty((n, k), dtype=np.int64)
    dist2 = np.empty((n, k), dtype=np.float64)
    for lo in range(0, n, _KNN_CHUNK):
        hi = min(lo + _KNN_CHUNK, n)
        d2 = squared_distances(pts[lo:hi], pts)
        rows = np.arange(hi - lo)
        d2[rows, rows + lo] = np.inf
        # stable sort keeps index order among equal distances
        order = np.argsort(d2, axis=1, kind="stable")[:, :k]
        indices[lo:hi] = order
        dist2[lo:hi] = np.take_along_axis(d2, order, axis=1)
    return NeighborGraph(k=k, indices=indices, distances=np.sqrt(dist2))


def fps(points, m, start_index=0):
    """Farthest point sampling; returns ``m`` indices starting at ``start_index``."""
    pts = as_points(points)
    n = len(pts)
    m = int(m)
    if m < 1 or m > n:
        raise ValueError(f"fps needs 1 <= m <= n, got m={m} for n={n}")
    if not 0 <= start_index < n:
        raise ValueError(f"start_index {start_index} out of range for {n} points")
    selected = np.empty(m, dtype=np.int64)
    selected[0] = start_index
    diff = pts - pts[start_index]
    mind = np.sum(diff * diff, axis=1)
    for i in range(1, m):
        # argmax returns the first maximum: lowest-index tie-break
        nxt = int(np.argmax(mind))
        selected[i] = nxt
        diff = pts - pts[nxt]
        np.minimum(mind, np.sum(diff * diff, axis=1), out=mind)
    return selected


def normalize(points):
    """Center on the centroid and scale into the unit sphere.

    Returns ``(normalized, center, scale)``.
    """
    pts = as_points(points)
    center = pts.mean(axis=0)
    shifted = pts - center
    scale = float(np.sqrt(np.max(np.sum(shifted * shifted, axis=1))))
    if not scale > 0.0:
        raise DegeneratePatchError("cannot normalize a patch whose points all coincide")
    return shifted / scale, center, scale


def denormalize(points, center, scale):
    return np.asarray(points, dtype=np.float64) * scale + np.asarray(center, dtype=np.float64)


def make_patch(points, source_indices=None):
    normed, center, scale = normalize(points)
    src = np.zeros(0, dtype=np.int64) if source_indices is None else np.asarray(source_indices, dtype=np.int64)
    return Patch(points=normed, center=center, scale=scale, source_indices=src)


def knn_graph_distances(points, graph_k, sources):
    """Shortest-path distances over the symmetrized ``graph_k``-NN graph."""
    graph = knn(points, graph_k)
    n = len(points)
    rows = np.repeat(np.arange(n), graph_k)
    cols = graph.indices.ravel()
    w = graph.distances.ravel()
    # zero-length edges would vanish from a sparse matrix
    w = np.where(w > 0, w, np.finfo(np.float64).tiny)
    adj = coo_matrix((w, (rows, cols)), shape=(n, n)).tocsr()
    return dijkstra(adj, directed=False, indices=np.asarray(sources))


def geodesic_patches(cloud, n_patches, patch_size, graph_k=5, start_index=0):
    """Cut ``n_patches`` normalized patches of ``patch_size`` points around FPS seeds.

    Membership is decided by graph geodesic distance from the seed. When the
    seed's connected component is too small, the remainder is filled with the
    Euclidean-nearest unreachable points and a GeodesicFallbackWarning is
    emitted.
    """
    pts = as_points(cloud, dim=3)
    n = len(pts)
    if patch_size > n:
        raise ValueError(f"patch_size {patch_size} exceeds cloud size {n}")
    if graph_k < 1:
        raise ValueError("graph_k must be >= 1")
    n_patches = min(int(n_patches), n)
    seeds = fps(pts, n_patches, start_index)
    if patch_size == n:
        return [make_patch(pts, np.arange(n)) for _ in seeds]
    geo = knn_graph_distances(pts, min(graph_k, n - 1), seeds)
    patches = []
    idx = np.arange(n)
    for s, dist in zip(seeds, geo):
        reachable = np.isfinite(dist)
        n_reach = int(reachable.sum())
        if n_reach >= patch_size:
            order = np.lexsort((idx, dist))[:patch_size]
        else:
            warnings.warn(
                f"seed {int(s)} reaches only {n_reach} of {patch_size} points; "
                "filling with Euclidean neighbors",
                GeodesicFallbackWarning,
                stacklevel=2,
            )
            near = np.lexsort((idx, dist))[:n_reach]
            rest = idx[~reachable]
            d = pts[rest] - pts[s]
            eu = np.sum(d * d, axis=1)
            fill = rest[np.lexsort((rest, eu))[: patch_size - n_reach]]
            order = np.concatenate([near, fill])
        patches.append(make_patch(pts[order], order))
    return patches


def patch_rng(seed, *key):
    """Counter-style generator keyed by ``(seed, *key)``; independent per key."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, key)]))


def coarse_indices(points, r, seed=0, patch_id=0):
    """Index sets of ``r`` FPS runs of ``N/r`` points each, shape ``(r, N/r)``.

    Every run starts from a distinct pseudo-random index drawn from a
    generator keyed by ``(seed, patch_id)``.
    """
    pts = as_points(points)
    n = len(pts)
    r = int(r)
    if r < 1 or n % r:
        raise ValueError(f"rate r={r} must divide the patch size {n}")
    starts = patch_rng(seed, patch_id).choice(n, size=r, replace=False)
    return np.stack([fps(pts, n // r, int(s)) for s in starts])


def downsample_coarse(patch, r, seed=0, patch_id=0):
    """Split a patch into ``r`` coarse patches; they stay in the parent's frame."""
    if not isinstance(patch, Patch):
        patch = Patch(points=as_points(patch), center=np.zeros(3), scale=1.0)
    sel = coarse_indices(patch.points, r, seed, patch_id)
    return [
        Patch(points=patch.points[ix], center=patch.center, scale=patch.scale, source_indices=ix)
        for ix in sel
    ]

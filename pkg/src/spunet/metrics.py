"""Evaluation metrics: Chamfer, Hausdorff, point-to-surface and uniformity.

These work on plain arrays and never build a gradient graph.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .loss import PAPER_P_VALUES, uniform_pairs


def _check(points, what):
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or len(pts) == 0 or pts.shape[1] != 3:
        raise ValueError(f"{what}: expected a non-empty (n, 3) array, got shape {pts.shape}")
    return pts


def nearest_distances(a, b):
    """Distance from every point of ``a`` to its nearest point of ``b``.

    The tree only proposes the neighbor; the distance is recomputed with the
    same coordinate-wise formula as the brute-force reference.
    """
    _, idx = cKDTree(b).query(a, k=1)
    d = a - b[idx]
    return np.sqrt(np.sum(d * d, axis=1))


def cd_metric(a, b):
    a, b = _check(a, "cd_metric"), _check(b, "cd_metric")
    return float(nearest_distances(a, b).mean() + nearest_distances(b, a).mean())


def hd_metric(a, b):
    a, b = _check(a, "hd_metric"), _check(b, "hd_metric")
    return float(max(nearest_distances(a, b).max(), nearest_distances(b, a).max()))


def point_triangle_distance(p, a, b, c):
    """Exact distance from points ``p`` to triangles ``(a, b, c)``, vectorized.

    Region classification follows the closest-point-on-triangle construction
    (vertex, edge, then face regions). Arrays broadcast over a leading axis.
    """
    ab, ac, ap = b - a, c - a, p - a

    def dot(u, v):
        return u[..., 0] * v[..., 0] + u[..., 1] * v[..., 1] + u[..., 2] * v[..., 2]

    d1, d2 = dot(ab, ap), dot(ac, ap)
    bp = p - b
    d3, d4 = dot(ab, bp), dot(ac, bp)
    cp = p - c
    d5, d6 = dot(ab, cp), dot(ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    shape = np.broadcast_shapes(d1.shape, d3.shape, d5.shape)
    closest = np.empty(shape + (3,))
    done = np.zeros(shape, dtype=bool)
    a, b, c = (np.broadcast_to(x, shape + (3,)) for x in (a, b, c))
    ab, ac = b - a, c - a

    def assign(mask, value):
        m = mask & ~done
        closest[m] = value[m]
        done[m] = True

    with np.errstate(divide="ignore", invalid="ignore"):
        assign((d1 <= 0) & (d2 <= 0), a)
        assign((d3 >= 0) & (d4 <= d3), b)
        assign((d6 >= 0) & (d5 <= d6), c)
        v = d1 / (d1 - d3)
        assign((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + v[..., None] * ab)
        w = d2 / (d2 - d6)
        assign((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + w[..., None] * ac)
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        assign((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), b + w[..., None] * (c - b))
        denom = 1.0 / (va + vb + vc)
        v, w = vb * denom, vc * denom
        assign(np.ones(shape, dtype=bool), a + v[..., None] * ab + w[..., None] * ac)
    diff = np.broadcast_to(p, shape + (3,)) - closest
    return np.sqrt(dot(diff, diff))


class TriangleBVH:
    """Axis-aligned bounding-volume hierarchy over mesh faces."""

    def __init__(self, mesh, leaf_size=8):
        tris = mesh.triangles
        if len(tris) == 0:
            raise ValueError("cannot build a BVH over an empty mesh")
        self.tris = tris
        self.leaf_size = leaf_size
        # node arrays: box min/max, children (-1 for leaves), face range
        self.lo, self.hi, self.left, self.right, self.start, self.stop = [], [], [], [], [], []
        self.order = np.arange(len(tris))
        self._centroids = tris.mean(axis=1)
        self._build(0, len(tris))
        self.lo, self.hi = np.array(self.lo), np.array(self.hi)
        self.ordered = tris[self.order]

    def _build(self, start, stop):
        node = len(self.lo)
        faces = self.tris[self.order[start:stop]].reshape(-1, 3)
        self.lo.append(faces.min(axis=0))
        self.hi.append(faces.max(axis=0))
        self.left.append(-1)
        self.right.append(-1)
        self.start.append(start)
        self.stop.append(stop)
        if stop - start > self.leaf_size:
            cent = self._centroids[self.order[start:stop]]
            axis = int(np.argmax(cent.max(axis=0) - cent.min(axis=0)))
            # stable sort keeps the layout deterministic
            self.order[start:stop] = self.order[start:stop][np.argsort(cent[:, axis], kind="stable")]
            mid = (start + stop) // 2
            self.left[node] = self._build(start, mid)
            self.right[node] = self._build(mid, stop)
        return node

    def box_distance(self, node, p):
        d = np.maximum(np.maximum(self.lo[node] - p, p - self.hi[node]), 0.0)
        return float(np.sqrt(np.sum(d * d)))

    def query(self, p):
        best = np.inf
        stack = [0]
        while stack:
            node = stack.pop()
            if self.box_distance(node, p) >= best:
                continue
            if self.left[node] < 0:
                t = self.ordered[self.start[node]:self.stop[node]]
                d = point_triangle_distance(p, t[:, 0], t[:, 1], t[:, 2]).min()
                best = min(best, float(d))
                continue
            kids = [self.left[node], self.right[node]]
            kids.sort(key=lambda k: self.box_distance(k, p), reverse=True)
            stack.extend(kids)
        return best


def p2f_brute_force(points, mesh):
    t = mesh.drop_degenerate().triangles
    pts = _check(points, "p2f")
    out = np.empty(len(pts))
    for i, p in enumerate(pts):
        out[i] = point_triangle_distance(p, t[:, 0], t[:, 1], t[:, 2]).min()
    return out


def p2f(points, mesh, bvh=None):
    """Mean and per-point exact distances from ``points`` to the mesh surface."""
    pts = _check(points, "p2f")
    mesh = mesh.drop_degenerate()
    if len(mesh.faces) == 0:
        raise ValueError("p2f: mesh has no non-degenerate faces")
    bvh = TriangleBVH(mesh) if bvh is None else bvh
    dist = np.array([bvh.query(p) for p in pts])
    return float(dist.mean()), dist


def uniformity_metric(points, p_values=PAPER_P_VALUES, n_seeds=50):
    """Chi-square uniformity score per area fraction ``p`` (lower is more uniform).

    The FPS seeding starts from the point farthest from the centroid, which
    makes the score independent of point order and of rigid rotations.
    """
    pts = _check(points, "uniformity_metric")
    d = pts - pts.mean(axis=0)
    start = int(np.argmax(np.sum(d * d, axis=1)))
    scores = {}
    for p in p_values:
        pr = uniform_pairs(pts, p, n_seeds, start)
        if len(pr.point) == 0:
            scores[float(p)] = 0.0
            continue
        diff = pts[pr.point] - pts[pr.neighbor]
        dist = np.sqrt(np.sum(diff * diff, axis=1))
        scores[float(p)] = float(np.sum(pr.weight * (dist - pr.target) ** 2))
    return scores


@dataclass
class MetricReport:
    cd: float
    hd: float
    p2f_mean: float | None = None
    uniformity: dict = field(default_factory=dict)
    point_counts: dict = field(default_factory=dict)

    def flat(self):
        out = {"cd": self.cd, "hd": self.hd}
        if self.p2f_mean is not None:
            out["p2f"] = self.p2f_mean
        for p, v in sorted(self.uniformity.items()):
            out[f"uni_p{p * 100:g}%"] = v
        for k, v in self.point_counts.items():
            out[f"n_{k}"] = v
        return out

    def to_text(self):
        return "".join(f"{k}={v!r}\n" for k, v in self.flat().items())

    def to_json(self):
        d = asdict(self)
        d["uniformity"] = {f"{p:g}": v for p, v in sorted(self.uniformity.items())}
        return json.dumps(d, indent=2, sort_keys=True)


def evaluate(pred, gt, mesh=None, p_values=PAPER_P_VALUES, n_seeds=50):
    pred, gt = _check(pred, "pred"), _check(gt, "gt")
    report = MetricReport(
        cd=cd_metric(pred, gt),
        hd=hd_metric(pred, gt),
        point_counts={"pred": len(pred), "gt": len(gt)},
    )
    if mesh is not None:
        report.p2f_mean = p2f(pred, mesh)[0]
    report.uniformity = uniformity_metric(pred, p_values, n_seeds)
    return report

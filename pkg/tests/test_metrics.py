import json
import math

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from spunet.geometry import TriangleMesh
from spunet.io import sample_mesh
from spunet.metrics import (
    MetricReport,
    cd_metric,
    evaluate,
    hd_metric,
    p2f,
    p2f_brute_force,
    point_triangle_distance,
    uniformity_metric,
)
from spunet.shapes import cube, icosphere, torus


def dist(p, q):
    # same left-to-right sum as the metric; math.dist can differ by an ulp
    return math.sqrt((p[0] - q[0]) ** 2 + (p[1] - q[1]) ** 2 + (p[2] - q[2]) ** 2)


def nearest(a, b):
    return [min(dist(p, q) for q in b) for p in a]


def segment_distance(p, a, b):
    ab, ap = b - a, p - a
    t = min(max(np.dot(ap, ab) / np.dot(ab, ab), 0.0), 1.0)
    return float(np.linalg.norm(p - (a + t * ab)))


def triangle_distance_oracle(p, a, b, c):
    """Plane projection when it lands inside, else the nearest edge."""
    n = np.cross(b - a, c - a)
    n = n / np.linalg.norm(n)
    h = np.dot(p - a, n)
    q = p - h * n
    signs = [np.dot(np.cross(v1 - v0, q - v0), n) for v0, v1 in ((a, b), (b, c), (c, a))]
    if all(s >= 0 for s in signs):
        return abs(h)
    return min(segment_distance(p, a, b), segment_distance(p, b, c), segment_distance(p, c, a))


def test_cd_hd_match_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(10):
        a, b = rng.random((rng.integers(1, 60), 3)), rng.random((rng.integers(1, 60), 3))
        ab, ba = nearest(a.tolist(), b.tolist()), nearest(b.tolist(), a.tolist())
        assert cd_metric(a, b) == pytest.approx(np.mean(ab) + np.mean(ba), rel=1e-13)
        assert hd_metric(a, b) == max(max(ab), max(ba))


def test_hd_example():
    assert hd_metric(np.zeros((1, 3)), np.array([[0.0, 0, 0], [3, 0, 0]])) == 3.0
    assert cd_metric(np.zeros((1, 3)), np.zeros((1, 3))) == 0.0


def test_metrics_reject_empty_or_malformed():
    for bad in (np.zeros((0, 3)), np.zeros((4, 2))):
        with pytest.raises(ValueError):
            cd_metric(bad, np.zeros((1, 3)))


def flat_triangle():
    return TriangleMesh(np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]]), np.array([[0, 1, 2]]))


def test_p2f_flat_triangle_cases():
    mesh = flat_triangle()
    pts = np.array([[0.2, 0.2, 0.0], [0.2, 0.2, 0.7], [2.0, 0.0, 0.0], [0.5, -1.0, 0.0], [1.0, 0.0, 0.0]])
    _, d = p2f(pts, mesh)
    np.testing.assert_allclose(d, [0.0, 0.7, 1.0, 1.0, 0.0], rtol=1e-15, atol=1e-15)


def test_p2f_mesh_vertices_are_on_the_surface():
    mesh = cube(divisions=3)
    mean, d = p2f(mesh.vertices, mesh)
    assert mean == 0.0 and np.all(d == 0.0)


def test_point_triangle_distance_matches_oracle():
    rng = np.random.default_rng(1)
    for _ in range(300):
        a, b, c = rng.standard_normal((3, 3))
        p = rng.standard_normal(3) * 2
        ref = triangle_distance_oracle(p, a, b, c)
        assert point_triangle_distance(p, a, b, c) == pytest.approx(ref, rel=1e-9, abs=1e-12)


def test_bvh_equals_brute_force():
    rng = np.random.default_rng(2)
    mesh = torus(n_major=16, n_minor=8)
    pts = rng.standard_normal((200, 3))
    _, fast = p2f(pts, mesh)
    assert np.array_equal(fast, p2f_brute_force(pts, mesh))


def test_p2f_ignores_degenerate_faces():
    mesh = flat_triangle()
    mesh = TriangleMesh(mesh.vertices, np.array([[0, 1, 2], [0, 0, 1]]))
    assert p2f(np.array([[0.0, 0, 1]]), mesh)[0] == 1.0
    with pytest.raises(ValueError):
        p2f(np.zeros((1, 3)), TriangleMesh(mesh.vertices, np.array([[0, 0, 1]])))


def sphere_points(n=1024):
    return sample_mesh(icosphere(3), n, seed=0)


def test_uniformity_invariant_to_permutation_and_rotation():
    pts = sphere_points()
    base = uniformity_metric(pts)
    perm = np.random.default_rng(3).permutation(len(pts))
    assert uniformity_metric(pts[perm]) == base
    rot = Rotation.from_rotvec([0.3, -1.1, 0.7]).as_matrix()
    for p, v in uniformity_metric(pts @ rot.T).items():
        assert v == pytest.approx(base[p], rel=1e-9, abs=1e-15)


def test_uniformity_ranks_clustered_above_poisson():
    pts = sphere_points()
    rng = np.random.default_rng(4)
    centers = pts[rng.choice(len(pts), 4, replace=False)]
    clustered = centers[rng.integers(0, 4, len(pts))] + 0.05 * rng.standard_normal(pts.shape)
    good, bad = uniformity_metric(pts), uniformity_metric(clustered)
    assert all(bad[p] > good[p] for p in good)
    assert sorted(good) == [0.004, 0.006, 0.008, 0.01, 0.012]


def test_report_text_and_json():
    pts = sphere_points(256)
    report = evaluate(pts, pts, mesh=icosphere(3))
    assert report.cd == 0.0 and report.hd == 0.0
    assert report.point_counts == {"pred": 256, "gt": 256}
    lines = report.to_text().splitlines()
    assert lines[:2] == ["cd=0.0", "hd=0.0"]
    assert lines[2].startswith("p2f=")
    d = json.loads(report.to_json())
    assert d["cd"] == 0.0 and set(d["uniformity"]) == {"0.004", "0.006", "0.008", "0.01", "0.012"}
    assert MetricReport(1.0, 2.0).flat() == {"cd": 1.0, "hd": 2.0}

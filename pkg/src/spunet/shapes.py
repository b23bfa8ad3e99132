"""Procedural triangle meshes used as toy training and evaluation surfaces."""

from __future__ import annotations

import numpy as np

from .geometry import TriangleMesh


def icosphere(subdivisions=3, radius=1.0):
    t = (1.0 + 5 ** 0.5) / 2.0
    verts = [
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [np.array(v, dtype=np.float64) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        cache = {}

        def midpoint(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    return TriangleMesh(np.array(verts) * radius, np.array(faces))


def torus(major=1.0, minor=0.4, n_major=48, n_minor=24):
    u = np.linspace(0, 2 * np.pi, n_major, endpoint=False)
    v = np.linspace(0, 2 * np.pi, n_minor, endpoint=False)
    uu, vv = np.meshgrid(u, v, indexing="ij")
    ring = major + minor * np.cos(vv)
    verts = np.stack([ring * np.cos(uu), ring * np.sin(uu), minor * np.sin(vv)], axis=-1).reshape(-1, 3)
    faces = []
    for i in range(n_major):
        for j in range(n_minor):
            a = i * n_minor + j
            b = ((i + 1) % n_major) * n_minor + j
            c = ((i + 1) % n_major) * n_minor + (j + 1) % n_minor
            d = i * n_minor + (j + 1) % n_minor
            faces += [(a, b, c), (a, c, d)]
    return TriangleMesh(verts, np.array(faces))


def cube(half=1.0, divisions=8):
    """Axis-aligned cube surface, each face split into a grid of triangles."""
    verts, faces = [], []
    g = np.linspace(-half, half, divisions + 1)
    for axis in range(3):
        for sign in (-1.0, 1.0):
            base = len(verts)
            for a in g:
                for b in g:
                    p = np.empty(3)
                    p[axis] = sign * half
                    p[(axis + 1) % 3] = a
                    p[(axis + 2) % 3] = b
                    verts.append(p)
            n = divisions + 1
            for i in range(divisions):
                for j in range(divisions):
                    a, b = base + i * n + j, base + (i + 1) * n + j
                    c, d = base + (i + 1) * n + j + 1, base + i * n + j + 1
                    tri = [(a, b, c), (a, c, d)]
                    if sign < 0:
                        tri = [(x, z, y) for x, y, z in tri]
                    faces += tri
    return TriangleMesh(np.array(verts), np.array(faces))


def normalized(mesh):
    """Mesh translated to its vertex centroid and scaled into the unit sphere."""
    c = mesh.vertices.mean(axis=0)
    v = mesh.vertices - c
    return TriangleMesh(v / np.linalg.norm(v, axis=1).max(), mesh.faces)


PRIMITIVES = {
    "sphere": lambda: icosphere(4),
    "torus": lambda: normalized(torus()),
    "cube": lambda: normalized(cube()),
}

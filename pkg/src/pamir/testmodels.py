"""Tiny hand-checkable body models and fixtures for tests and examples."""

from __future__ import annotations

import numpy as np

from .body import BodyModel
from .mesh import TriMesh

# square cross-section corners in (x, z), counter-clockwise seen from +y
_CORNERS = np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]])


def _column_faces(n_levels: int) -> np.ndarray:
    faces = []
    for lvl in range(n_levels - 1):
        for s in range(4):
            a, b = lvl * 4 + s, lvl * 4 + (s + 1) % 4
            c, d = b + 4, a + 4
            faces += [[a, c, b], [a, d, c]]
    top = (n_levels - 1) * 4
    faces += [[0, 1, 2], [0, 2, 3], [top, top + 2, top + 1], [top, top + 3, top + 2]]
    return np.array(faces, dtype=np.int64)


def column_mesh(levels, half_width: float = 0.05) -> TriMesh:
    """Closed square tube through the given y levels (outward-facing triangles)."""
    levels = np.asarray(levels, dtype=np.float64)
    v = np.array([[half_width * cx, y, half_width * cz] for y in levels for cx, cz in _CORNERS])
    mesh = TriMesh(v, _column_faces(len(levels)))
    if mesh.signed_volume() < 0:
        mesh = TriMesh(v, mesh.faces[:, ::-1].copy())
    return mesh


def two_bone_model(half_width: float = 0.05) -> BodyModel:
    """Vertical 1 m column with joints at y = 0 (root), 0.5 (elbow) and 1 (tip).

    Vertices below the elbow follow the root, vertices above it the elbow joint and
    the elbow ring is split evenly. Joints are ring centroids. The two shape
    directions stretch the column along y and widen it along x.
    """
    levels = np.array([0.0, 0.25, 0.5, 0.75, 1.0])
    mesh = column_mesh(levels, half_width)
    v = mesh.vertices
    n = len(v)
    ring = np.repeat(np.arange(len(levels)), 4)
    reg = np.zeros((3, n))
    for j, lvl in enumerate((0, 2, 4)):
        reg[j, ring == lvl] = 0.25
    w = np.zeros((n, 3))
    w[ring < 2, 0] = 1.0
    w[ring == 2, :2] = 0.5
    w[ring > 2, 1] = 1.0
    basis = np.zeros((2, n, 3))
    basis[0, :, 1] = 0.1 * v[:, 1]
    basis[1, :, 0] = 0.5 * v[:, 0]
    return BodyModel(v, mesh.faces, basis, np.zeros((0, n, 3)), reg, w,
                     np.array([-1, 0, 1], dtype=np.int64), ("root", "elbow", "tip"))


def five_vertex_fixture():
    """Query point and five vertices with distinct distances, for blending-weight oracles."""
    p = np.array([0.01, 0.02, -0.01])
    vertices = np.array([
        [0.00, 0.00, 0.00],
        [0.05, 0.00, 0.00],
        [0.00, 0.08, 0.00],
        [0.00, 0.00, -0.11],
        [0.30, 0.30, 0.30],
    ])
    return p, vertices

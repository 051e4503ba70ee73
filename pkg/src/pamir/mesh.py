"""Triangle meshes: container, OBJ/PLY IO, marching cubes, surface sampling and distances."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree
from skimage import measure


class MeshError(ValueError):
    pass


@dataclass
class TriMesh:
    vertices: np.ndarray
    faces: np.ndarray
    colors: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
            if len(self.colors) != len(self.vertices):
                raise MeshError("colors must have one row per vertex")
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise MeshError("face index out of range")
        if not np.all(np.isfinite(self.vertices)):
            raise MeshError("mesh has non-finite vertices")

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0

    def triangles(self) -> np.ndarray:
        return self.vertices[self.faces]

    def face_areas(self) -> np.ndarray:
        t = self.triangles()
        return 0.5 * np.linalg.norm(np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0]), axis=1)

    def face_normals(self) -> np.ndarray:
        t = self.triangles()
        n = np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0])
        norm = np.linalg.norm(n, axis=1, keepdims=True)
        return n / np.maximum(norm, 1e-300)

    def vertex_normals(self) -> np.ndarray:
        t = self.triangles()
        n = np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0])
        vn = np.zeros_like(self.vertices)
        for k in range(3):
            np.add.at(vn, self.faces[:, k], n)
        return vn / np.maximum(np.linalg.norm(vn, axis=1, keepdims=True), 1e-300)

    def signed_volume(self) -> float:
        t = self.triangles()
        return float(np.einsum("ij,ij->i", t[:, 0], np.cross(t[:, 1], t[:, 2])).sum() / 6.0)

    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def bbox_diagonal(self) -> float:
        lo, hi = self.bbox()
        return float(np.linalg.norm(hi - lo))

    def transformed(self, rotation=None, translation=None) -> "TriMesh":
        v = self.vertices
        if rotation is not None:
            v = v @ np.asarray(rotation).T
        if translation is not None:
            v = v + np.asarray(translation)
        return TriMesh(v, self.faces.copy(), None if self.colors is None else self.colors.copy())


def empty_mesh() -> TriMesh:
    return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))


def watertight_report(mesh: TriMesh) -> dict:
    """Count boundary / non-manifold / mis-oriented edges.

    A closed consistently oriented mesh uses every directed edge exactly once and
    its reverse exactly once.
    """
    f = mesh.faces
    directed = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    n = max(len(mesh.vertices), 1)
    keys = directed[:, 0] * n + directed[:, 1]
    uniq, counts = np.unique(keys, return_counts=True)
    duplicated = int((counts > 1).sum())
    rev = directed[:, 1] * n + directed[:, 0]
    has_rev = np.isin(rev, uniq)
    unmatched = int((~has_rev).sum())
    return {
        "faces": len(f),
        "duplicate_directed_edges": duplicated,
        "unmatched_edges": unmatched,
        "watertight": duplicated == 0 and unmatched == 0 and len(f) > 0,
    }


def is_watertight(mesh: TriMesh) -> bool:
    return watertight_report(mesh)["watertight"]


# --------------------------------------------------------------------- IO

def save_obj(mesh: TriMesh, path) -> None:
    lines = []
    if mesh.colors is not None:
        for v, c in zip(mesh.vertices, mesh.colors):
            lines.append("v %.6f %.6f %.6f %.6f %.6f %.6f" % (*v, *c))
    else:
        lines.extend("v %.6f %.6f %.6f" % tuple(v) for v in mesh.vertices)
    lines.extend("f %d %d %d" % tuple(f + 1) for f in mesh.faces)
    Path(path).write_text("\n".join(lines) + "\n")


def load_obj(path) -> TriMesh:
    verts, cols, faces = [], [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            vals = [float(x) for x in parts[1:]]
            verts.append(vals[:3])
            if len(vals) >= 6:
                cols.append(vals[3:6])
        elif parts[0] == "f":
            idx = [int(tok.split("/")[0]) for tok in parts[1:]]
            idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
            for k in range(1, len(idx) - 1):
                faces.append([idx[0], idx[k], idx[k + 1]])
    colors = np.array(cols) if cols and len(cols) == len(verts) else None
    return TriMesh(np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3), colors)


def save_ply(mesh: TriMesh, path) -> None:
    has_c = mesh.colors is not None
    head = ["ply", "format ascii 1.0", f"element vertex {len(mesh.vertices)}",
            "property float x", "property float y", "property float z"]
    if has_c:
        head += ["property uchar red", "property uchar green", "property uchar blue"]
    head += [f"element face {len(mesh.faces)}", "property list uchar int vertex_indices", "end_header"]
    lines = head
    if has_c:
        c8 = np.clip(np.round(mesh.colors * 255), 0, 255).astype(int)
        lines += ["%.6f %.6f %.6f %d %d %d" % (*v, *c) for v, c in zip(mesh.vertices, c8)]
    else:
        lines += ["%.6f %.6f %.6f" % tuple(v) for v in mesh.vertices]
    lines += ["3 %d %d %d" % tuple(f) for f in mesh.faces]
    Path(path).write_text("\n".join(lines) + "\n")


def load_ply(path) -> TriMesh:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise MeshError(f"{path}: not a PLY file")
    nv = nf = 0
    vprops = []
    i = 1
    current = None
    while lines[i].strip() != "end_header":
        tok = lines[i].split()
        if tok[0] == "format" and tok[1] != "ascii":
            raise MeshError("only ascii PLY is supported")
        if tok[0] == "element":
            current = tok[1]
            if current == "vertex":
                nv = int(tok[2])
            elif current == "face":
                nf = int(tok[2])
        elif tok[0] == "property" and current == "vertex":
            vprops.append(tok[-1])
        i += 1
    body = lines[i + 1:]
    vdata = np.array([[float(x) for x in ln.split()] for ln in body[:nv]]).reshape(nv, len(vprops))
    faces = []
    for ln in body[nv:nv + nf]:
        idx = [int(x) for x in ln.split()[1:]]
        for k in range(1, len(idx) - 1):
            faces.append([idx[0], idx[k], idx[k + 1]])
    col = None
    if {"red", "green", "blue"} <= set(vprops):
        col = vdata[:, [vprops.index(c) for c in ("red", "green", "blue")]] / 255.0
    xyz = vdata[:, [vprops.index(c) for c in ("x", "y", "z")]]
    return TriMesh(xyz, np.array(faces, dtype=np.int64).reshape(-1, 3), col)


def save_mesh(mesh: TriMesh, path) -> None:
    suffix = Path(path).suffix.lower()
    if suffix == ".obj":
        save_obj(mesh, path)
    elif suffix == ".ply":
        save_ply(mesh, path)
    else:
        raise MeshError(f"unsupported mesh format {suffix!r}")


def load_mesh(path) -> TriMesh:
    suffix = Path(path).suffix.lower()
    if suffix == ".obj":
        return load_obj(path)
    if suffix == ".ply":
        return load_ply(path)
    raise MeshError(f"unsupported mesh format {suffix!r}")


# ------------------------------------------------------- marching cubes

def grid_points(lo, hi, resolution: int) -> np.ndarray:
    """Grid sample positions, shape (R, R, R, 3), indexed [ix, iy, iz]."""
    axes = [np.linspace(lo[k], hi[k], resolution) for k in range(3)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def marching_cubes(field: np.ndarray, lo, hi, iso: float = 0.5) -> TriMesh:
    """Iso-surface of a field sampled on ``grid_points(lo, hi, R)``.

    Faces are wound so normals point toward decreasing field values (outward for an
    occupancy field). A field that never crosses ``iso`` gives an empty mesh.
    """
    if not 0.0 < iso < 1.0:
        raise MeshError("iso must lie in (0, 1)")
    return iso_surface(field, lo, hi, iso)


def iso_surface(field: np.ndarray, lo, hi, level: float) -> TriMesh:
    """Level set ``field == level`` with normals toward decreasing values."""
    field = np.asarray(field, dtype=np.float64)
    if field.ndim != 3 or min(field.shape) < 2:
        raise MeshError("field must be a 3D grid with at least 2 samples per axis")
    if not (field.min() < level < field.max()):
        return empty_mesh()
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    spacing = (hi - lo) / (np.array(field.shape) - 1)
    verts, faces, _, _ = measure.marching_cubes(field, level=level, spacing=tuple(spacing),
                                                gradient_direction="ascent",
                                                allow_degenerate=False)
    return TriMesh(verts.astype(np.float64) + lo, faces.astype(np.int64))


# ------------------------------------------------------- sampling & distances

def sample_surface(mesh: TriMesh, n: int, rng: np.random.Generator):
    """Area-weighted uniform surface samples: (points, face_index, face_normal)."""
    areas = mesh.face_areas()
    total = areas.sum()
    if total <= 0:
        raise MeshError("cannot sample a zero-area mesh")
    fidx = rng.choice(len(areas), size=n, p=areas / total)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    t = mesh.triangles()[fidx]
    pts = (1 - r1)[:, None] * t[:, 0] + (r1 * (1 - r2))[:, None] * t[:, 1] + (r1 * r2)[:, None] * t[:, 2]
    return pts, fidx, mesh.face_normals()[fidx]


def closest_point_on_triangles(p, a, b, c) -> np.ndarray:
    """Row-wise closest point on triangle (a, b, c) to p (Voronoi-region method)."""
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    with np.errstate(divide="ignore", invalid="ignore"):
        denom = va + vb + vc
        v = vb / denom
        w = vc / denom
        out = a + ab * v[:, None] + ac * w[:, None]

        # edge regions
        m_bc = (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        out = np.where(m_bc[:, None], b + (c - b) * t_bc[:, None], out)
        m_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
        t_ac = d2 / (d2 - d6)
        out = np.where(m_ac[:, None], a + ac * t_ac[:, None], out)
        m_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
        t_ab = d1 / (d1 - d3)
        out = np.where(m_ab[:, None], a + ab * t_ab[:, None], out)
    # vertex regions
    out = np.where(((d6 >= 0) & (d5 <= d6))[:, None], c, out)
    out = np.where(((d3 >= 0) & (d4 <= d3))[:, None], b, out)
    out = np.where(((d1 <= 0) & (d2 <= 0))[:, None], a, out)
    return out


class MeshDistance:
    """Exact unsigned point-to-surface distances with a centroid KD-tree prefilter."""

    def __init__(self, mesh: TriMesh, k: int = 8):
        if mesh.is_empty:
            raise MeshError("distance to an empty mesh is undefined")
        self.tri = mesh.triangles()
        self.centroids = self.tri.mean(axis=1)
        self.radius = float(np.linalg.norm(self.tri - self.centroids[:, None], axis=2).max())
        self.tree = cKDTree(self.centroids)
        self.k = min(k, len(self.tri))

    def _eval(self, pts, tri_idx):
        t = self.tri[tri_idx]
        q = closest_point_on_triangles(pts, t[:, 0], t[:, 1], t[:, 2])
        return np.linalg.norm(pts - q, axis=1)

    def closest(self, points: np.ndarray):
        """Exact closest surface points: ``(distances [N], closest points [N, 3], triangle index [N])``."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        dc, idx = self.tree.query(points, k=self.k)
        dc = dc.reshape(len(points), -1)
        idx = idx.reshape(len(points), -1)
        k = idx.shape[1]
        t = self.tri[idx.ravel()]
        q = closest_point_on_triangles(np.repeat(points, k, axis=0), t[:, 0], t[:, 1], t[:, 2]).reshape(-1, k, 3)
        d_all = np.linalg.norm(points[:, None] - q, axis=2)
        best = d_all.argmin(axis=1)
        rows = np.arange(len(points))
        d, cp, tri = d_all[rows, best], q[rows, best], idx[rows, best]
        # a triangle beyond the k nearest centroids can only be closer if its centroid
        # lies within d + radius
        unsure = np.nonzero(dc[:, -1] - self.radius < d)[0]
        for i in unsure:
            cand = np.array(self.tree.query_ball_point(points[i], d[i] + self.radius), dtype=np.int64)
            if len(cand):
                tc = self.tri[cand]
                qc = closest_point_on_triangles(np.repeat(points[i:i + 1], len(cand), 0), tc[:, 0], tc[:, 1], tc[:, 2])
                dd = np.linalg.norm(points[i] - qc, axis=1)
                j = int(dd.argmin())
                if dd[j] < d[i]:
                    d[i], cp[i], tri[i] = dd[j], qc[j], cand[j]
        return d, cp, tri

    def __call__(self, points: np.ndarray) -> np.ndarray:
        return self.closest(points)[0]


def point_to_surface(src: TriMesh, dst: TriMesh, n: int = 10_000, seed: int = 0) -> float:
    """Mean distance from ``n`` uniform samples of ``src`` to the surface of ``dst``."""
    pts, _, _ = sample_surface(src, n, np.random.default_rng(seed))
    return float(MeshDistance(dst)(pts).mean())


def chamfer_distance(a: TriMesh, b: TriMesh, n: int = 10_000, seed: int = 0) -> float:
    """Symmetric Chamfer: mean of the two directional point-to-surface distances."""
    return 0.5 * (point_to_surface(a, b, n, seed) + point_to_surface(b, a, n, seed + 1))


def region_chamfer(a: TriMesh, b: TriMesh, keep, n: int = 10_000, seed: int = 0) -> float:
    """Chamfer restricted to surface samples of either mesh for which ``keep(points)`` holds.

    Samples are still matched against the whole other surface.
    """
    out = []
    for src, dst, s in ((a, b, seed), (b, a, seed + 1)):
        pts, _, _ = sample_surface(src, n, np.random.default_rng(s))
        pts = pts[np.asarray(keep(pts), dtype=bool)]
        if len(pts) == 0:
            raise MeshError("no surface samples inside the region")
        out.append(float(MeshDistance(dst)(pts).mean()))
    return 0.5 * (out[0] + out[1])


def depth_aligned_chamfer(a: TriMesh, b: TriMesh, n: int = 10_000, seed: int = 0, search: float = 0.3,
                          axis: int = 2) -> tuple[float, float]:
    """Chamfer after translating ``a`` along ``axis`` by the shift that minimizes it.

    Under weak perspective the depth of a reconstruction is unobservable, so this
    compares shapes up to a depth offset. Returns ``(chamfer, shift)``.
    """
    from scipy.optimize import minimize_scalar

    pa, _, _ = sample_surface(a, n, np.random.default_rng(seed))
    pb, _, _ = sample_surface(b, n, np.random.default_rng(seed + 1))
    da, db = MeshDistance(a), MeshDistance(b)
    e = np.zeros(3)
    e[axis] = 1.0

    def cost(shift, m=n):
        return 0.5 * (db(pa[:m] + shift * e).mean() + da(pb[:m] - shift * e).mean())

    grid = np.linspace(-search, search, 25)
    coarse = [cost(g, min(n, 2000)) for g in grid]
    k = int(np.argmin(coarse))
    lo, hi = grid[max(k - 1, 0)], grid[min(k + 1, len(grid) - 1)]
    res = minimize_scalar(lambda s: cost(s, min(n, 2000)), bounds=(lo, hi), method="bounded",
                          options={"xatol": 1e-5})
    shift = float(res.x)
    return float(cost(shift)), shift


def mesh_metrics(pred: TriMesh, gt: TriMesh, n: int = 10_000, seed: int = 0) -> dict:
    p2s = point_to_surface(pred, gt, n, seed)
    s2p = point_to_surface(gt, pred, n, seed + 1)
    return {"p2s": p2s, "chamfer": 0.5 * (p2s + s2p), "gt_bbox_diagonal": gt.bbox_diagonal()}


# ------------------------------------------------------- test shapes

def icosphere(subdivisions: int = 4, radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> TriMesh:
    t = (1.0 + 5 ** 0.5) / 2.0
    verts = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t),
             (0, -1, -t), (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
             (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
             (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(v, dtype=np.float64) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        cache = {}

        def mid(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    v = np.array(verts) * radius + np.asarray(center, dtype=np.float64)
    return TriMesh(v, np.array(faces, dtype=np.int64))


def box_mesh(lo, hi) -> TriMesh:
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    corners = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], dtype=np.float64)
    v = lo + corners * (hi - lo)
    # index = 4x + 2y + z; outward winding
    faces = [(0, 1, 3), (0, 3, 2), (4, 6, 7), (4, 7, 5),   # x = lo, x = hi
             (0, 4, 5), (0, 5, 1), (2, 3, 7), (2, 7, 6),   # y = lo, y = hi
             (0, 2, 6), (0, 6, 4), (1, 5, 7), (1, 7, 3)]   # z = lo, z = hi
    return TriMesh(v, np.array(faces, dtype=np.int64))

"""Geometric kernels: weak-perspective projection, feature sampling, ray-parity
occupancy, voxelization, training point sampling and nearest-vertex blending weights.

Conventions
-----------
* Model space is y-up; the camera looks down -z, so +z points toward the viewer.
* Normalized image coordinates (u, v) lie in [-1, 1], u to the right and v upward.
  A FeatureMap stores rows top to bottom (pixel (0, 0) is the top-left texel).
* Volumes are indexed ``[ix, iy, iz]``; voxel ``i`` has its center at
  ``lo + (i + 0.5) * (hi - lo) / R``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy.spatial import cKDTree

from .mesh import MeshError, TriMesh, sample_surface


class VoxelizationError(RuntimeError):
    pass


class SamplingError(RuntimeError):
    pass


@dataclass(frozen=True)
class Bounds:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=np.float64).reshape(3)
        hi = np.asarray(self.hi, dtype=np.float64).reshape(3)
        if not np.all(hi > lo):
            raise ValueError("bounds need positive extent on every axis")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def around(cls, points, margin: float = 1.2) -> "Bounds":
        """Cube centred on the bounding-box centre with edge ``margin`` x largest extent."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        pmin, pmax = points.min(axis=0), points.max(axis=0)
        center = 0.5 * (pmin + pmax)
        half = 0.5 * margin * float((pmax - pmin).max())
        return cls(center - half, center + half)

    @property
    def extent(self) -> np.ndarray:
        return self.hi - self.lo

    @property
    def edge(self) -> float:
        return float(self.extent.max())

    def voxel_centers(self, resolution: int) -> np.ndarray:
        axes = [self.lo[k] + (np.arange(resolution) + 0.5) * self.extent[k] / resolution for k in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def uniform(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.lo + rng.random((n, 3)) * self.extent

    def as_array(self) -> np.ndarray:
        return np.stack([self.lo, self.hi])


@dataclass(frozen=True)
class Camera:
    """Weak-perspective camera: ``(u, v) = scale * (x, y) + offset``."""

    scale: float
    offset: tuple = (0.0, 0.0)

    @classmethod
    def framing(cls, bounds: Bounds) -> "Camera":
        """Camera mapping the xy extent of ``bounds`` onto [-1, 1]^2."""
        s = 2.0 / bounds.edge
        c = 0.5 * (bounds.lo + bounds.hi)
        return cls(float(s), (float(-s * c[0]), float(-s * c[1])))

    def as_array(self) -> np.ndarray:
        return np.array([self.scale, self.offset[0], self.offset[1]], dtype=np.float64)

    @classmethod
    def from_array(cls, arr) -> "Camera":
        arr = np.asarray(arr, dtype=np.float64).reshape(3)
        return cls(float(arr[0]), (float(arr[1]), float(arr[2])))


@dataclass
class OccupancyVolume:
    data: np.ndarray
    bounds: Bounds

    @property
    def resolution(self) -> int:
        return self.data.shape[0]


@dataclass
class FeatureVolume:
    data: torch.Tensor      # [C_v, r, r, r], indexed [c, ix, iy, iz]
    bounds: Bounds


@dataclass
class FeatureMap:
    data: torch.Tensor      # [C_i, H, W]


# ------------------------------------------------------------ projection / sampling

def project(p, camera: Camera):
    """Weak-perspective projection of points ``[..., 3]`` to ``[..., 2]``; ignores z."""
    if isinstance(p, torch.Tensor):
        off = torch.as_tensor(camera.offset, dtype=p.dtype)
        return camera.scale * p[..., :2] + off
    p = np.asarray(p, dtype=np.float64)
    return camera.scale * p[..., :2] + np.asarray(camera.offset)


def project_batched(points: torch.Tensor, cams: torch.Tensor) -> torch.Tensor:
    """points [B, N, 3], cams [B, 3] as (scale, off_u, off_v) -> uv [B, N, 2]."""
    return cams[:, None, :1] * points[..., :2] + cams[:, None, 1:]


def sample_map_batched(fmap: torch.Tensor, uv: torch.Tensor) -> torch.Tensor:
    """Bilinear, border-clamped sampling. fmap [B, C, H, W], uv [B, N, 2] -> [B, N, C]."""
    grid = torch.stack([uv[..., 0], -uv[..., 1]], dim=-1)[:, :, None, :]
    out = F.grid_sample(fmap, grid, mode="bilinear", padding_mode="border", align_corners=False)
    return out[..., 0].transpose(1, 2)


def sample_volume_batched(fvol: torch.Tensor, points: torch.Tensor, bounds: torch.Tensor) -> torch.Tensor:
    """Trilinear, border-clamped sampling.

    fvol [B, C, X, Y, Z], points [B, N, 3], bounds [B, 2, 3] -> [B, N, C].
    """
    lo, hi = bounds[:, None, 0], bounds[:, None, 1]
    n = 2.0 * (points - lo) / (hi - lo) - 1.0
    # grid_sample reads (W, H, D) = (z, y, x) for tensors laid out [C, D=X, H=Y, W=Z]
    grid = n.flip(-1)[:, :, None, None, :]
    out = F.grid_sample(fvol, grid, mode="bilinear", padding_mode="border", align_corners=False)
    return out[..., 0, 0].transpose(1, 2)


def sample_map(fmap: FeatureMap, uv) -> torch.Tensor:
    """Sample a feature map at normalized coordinates ``uv`` ([2] or [N, 2])."""
    uv = torch.as_tensor(uv, dtype=fmap.data.dtype)
    single = uv.ndim == 1
    out = sample_map_batched(fmap.data[None], uv.reshape(1, -1, 2))[0]
    return out[0] if single else out


def sample_volume(fvol: FeatureVolume, p) -> torch.Tensor:
    """Sample a feature volume at model-space points ``p`` ([3] or [N, 3])."""
    p = torch.as_tensor(p, dtype=fvol.data.dtype)
    single = p.ndim == 1
    b = torch.as_tensor(fvol.bounds.as_array(), dtype=fvol.data.dtype)[None]
    out = sample_volume_batched(fvol.data[None], p.reshape(1, -1, 3), b)[0]
    return out[0] if single else out


# ------------------------------------------------------------ ray parity

_JITTER = (1.3717e-7, 2.9153e-7, 0.7411e-7)
_AMBIGUOUS_EPS = 1e-12


def _axis_ray_parity(tri: np.ndarray, points: np.ndarray, axis: int, scale: float,
                     chunk: int = 2_000_000):
    """Cast +axis rays from ``points``; return (crossing parity, ambiguous mask).

    Triangles are bucketed on a 2D grid over the two remaining axes so that each
    ray only tests triangles whose projected bounding box covers it.
    """
    a, b = [k for k in range(3) if k != axis]
    ja = _JITTER[a] * scale
    jb = _JITTER[b] * scale + _JITTER[axis] * scale
    pu = points[:, a] + ja
    pv = points[:, b] + jb
    pw = points[:, axis]

    tu, tv, tw = tri[:, :, a], tri[:, :, b], tri[:, :, axis]
    umin, umax = tu.min(1), tu.max(1)
    vmin, vmax = tv.min(1), tv.max(1)
    g = int(np.clip(np.sqrt(len(tri)), 1, 512))
    u0, v0 = umin.min(), vmin.min()
    du = max((umax.max() - u0) / g, 1e-300)
    dv = max((vmax.max() - v0) / g, 1e-300)

    def cell(x, lo, d):
        return np.clip(np.floor((x - lo) / d).astype(np.int64), 0, g - 1)

    ci0, ci1 = cell(umin, u0, du), cell(umax, u0, du)
    cj0, cj1 = cell(vmin, v0, dv), cell(vmax, v0, dv)
    ni, nj = ci1 - ci0 + 1, cj1 - cj0 + 1
    per_tri = ni * nj
    tri_of = np.repeat(np.arange(len(tri)), per_tri)
    local = np.arange(per_tri.sum()) - np.repeat(np.cumsum(per_tri) - per_tri, per_tri)
    ci = ci0[tri_of] + local // nj[tri_of]
    cj = cj0[tri_of] + local % nj[tri_of]
    cell_id = ci * g + cj
    order = np.argsort(cell_id, kind="stable")
    cell_tris = tri_of[order]
    starts = np.searchsorted(cell_id[order], np.arange(g * g + 1))

    inside_grid = (pu >= u0) & (pu <= u0 + g * du) & (pv >= v0) & (pv <= v0 + g * dv)
    pc = cell(pu, u0, du) * g + cell(pv, v0, dv)
    counts = np.where(inside_grid, starts[pc + 1] - starts[pc], 0)

    parity = np.zeros(len(points), dtype=np.int64)
    ambiguous = np.zeros(len(points), dtype=bool)
    pidx_all = np.nonzero(counts)[0]
    if len(pidx_all) == 0:
        return parity, ambiguous
    csum = np.cumsum(counts[pidx_all])
    cuts = np.searchsorted(csum, np.arange(chunk, csum[-1], chunk), side="right")
    edges = np.unique(np.concatenate([[0], cuts, [len(pidx_all)]]))
    for start, stop in zip(edges[:-1], edges[1:]):
        pid = pidx_all[start:stop]
        cnt = counts[pid]
        rep_p = np.repeat(pid, cnt)
        off = np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt, cnt)
        t_idx = cell_tris[starts[pc[rep_p]] + off]
        x, y = pu[rep_p], pv[rep_p]
        ax, ay = tu[t_idx, 0], tv[t_idx, 0]
        bx, by = tu[t_idx, 1], tv[t_idx, 1]
        cx, cy = tu[t_idx, 2], tv[t_idx, 2]
        den = (by - cy) * (ax - cx) + (cx - bx) * (ay - cy)
        ok = np.abs(den) > 0
        den_safe = np.where(ok, den, 1.0)
        l1 = ((by - cy) * (x - cx) + (cx - bx) * (y - cy)) / den_safe
        l2 = ((cy - ay) * (x - cx) + (ax - cx) * (y - cy)) / den_safe
        l3 = 1.0 - l1 - l2
        lmin = np.minimum(np.minimum(l1, l2), l3)
        hit2d = ok & (lmin >= 0)
        wz = l1 * tw[t_idx, 0] + l2 * tw[t_idx, 1] + l3 * tw[t_idx, 2]
        above = wz > pw[rep_p]
        hit = hit2d & above
        amb = ok & (np.abs(lmin) < _AMBIGUOUS_EPS) & above
        np.add.at(parity, rep_p[hit], 1)
        ambiguous[np.unique(rep_p[amb])] = True
    return parity % 2, ambiguous


def _random_ray_parity(tri: np.ndarray, point: np.ndarray, direction: np.ndarray):
    """Moller-Trumbore parity along one ray against every triangle."""
    e1 = tri[:, 1] - tri[:, 0]
    e2 = tri[:, 2] - tri[:, 0]
    h = np.cross(direction, e2)
    a = np.einsum("ij,ij->i", e1, h)
    ok = np.abs(a) > 1e-300
    f = np.where(ok, 1.0 / np.where(ok, a, 1.0), 0.0)
    s = point - tri[:, 0]
    u = f * np.einsum("ij,ij->i", s, h)
    q = np.cross(s, e1)
    v = f * (q @ direction)
    t = f * np.einsum("ij,ij->i", e2, q)
    w = 1.0 - u - v
    hit = ok & (u >= 0) & (v >= 0) & (w >= 0) & (t > 0)
    amb = ok & (t > 0) & (np.minimum(np.minimum(u, v), w) > -_AMBIGUOUS_EPS) & \
        (np.abs(np.minimum(np.minimum(u, v), w)) < _AMBIGUOUS_EPS)
    return int(hit.sum() % 2), bool(amb.any())


def ray_parity_votes(mesh: TriMesh, points: np.ndarray):
    """Per-axis parity votes ``[N, 3]`` and ambiguity flags ``[N, 3]``."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    tri = mesh.triangles()
    votes = np.zeros((len(points), 3), dtype=np.int64)
    amb = np.zeros((len(points), 3), dtype=bool)
    if len(tri) == 0 or len(points) == 0:
        return votes, amb
    scale = float(np.abs(tri).max()) + 1.0
    for axis in range(3):
        votes[:, axis], amb[:, axis] = _axis_ray_parity(tri, points, axis, scale)
    return votes, amb


def _resolve(mesh: TriMesh, points: np.ndarray, votes: np.ndarray, amb: np.ndarray, seed: int = 0):
    valid = ~amb
    inside = (votes * valid).sum(1)
    outside = ((1 - votes) * valid).sum(1)
    label = (inside > outside).astype(np.int64)
    tie = np.nonzero(inside == outside)[0]
    if len(tie):
        tri = mesh.triangles()
        rng = np.random.default_rng(seed)
        for i in tie:
            for _ in range(8):
                d = rng.normal(size=3)
                d /= np.linalg.norm(d)
                par, bad = _random_ray_parity(tri, points[i], d)
                if not bad:
                    break
            label[i] = par
    return label


def point_in_mesh(mesh: TriMesh, p) -> np.ndarray:
    """Inside (1) / outside (0) labels by majority vote of three jittered axis rays.

    Accepts a single point or ``[N, 3]``. Ties (an ambiguous ray grazing an edge or
    vertex) fall back to random-direction rays. Points exactly on the surface get an
    arbitrary but deterministic label.
    """
    pts = np.asarray(p, dtype=np.float64)
    single = pts.ndim == 1
    pts = pts.reshape(-1, 3)
    votes, amb = ray_parity_votes(mesh, pts)
    label = _resolve(mesh, pts, votes, amb)
    return int(label[0]) if single else label


def voxelize(mesh: TriMesh, bounds: Bounds, resolution: int,
             max_disagreement: float = 1e-3) -> OccupancyVolume:
    """Occupancy of voxel centres by ray parity (same rule as ``point_in_mesh``)."""
    if resolution < 8:
        raise ValueError("voxelization resolution must be >= 8")
    centers = bounds.voxel_centers(resolution).reshape(-1, 3)
    votes, amb = ray_parity_votes(mesh, centers)
    disagree = int(((votes.min(1) != votes.max(1)) & ~amb.any(1)).sum())
    if disagree > max_disagreement * len(centers):
        raise VoxelizationError(
            f"mesh is not watertight: ray parity disagrees on {disagree} of {len(centers)} voxels")
    label = _resolve(mesh, centers, votes, amb)
    return OccupancyVolume(label.reshape((resolution,) * 3).astype(np.uint8), bounds)


# ------------------------------------------------------------ training points

def sample_training_points(mesh: TriMesh, bounds: Bounds, n: int, near_fraction: float = 0.8,
                           jitter_sigma: float | None = None, rng=None):
    """Mixed near-surface / uniform samples with inside labels.

    Returns ``(points [n, 3], labels [n])``. Near-surface points are area-weighted
    surface samples displaced by isotropic Gaussian noise of std ``jitter_sigma``
    (default 2.5% of the bounds edge).
    """
    if n < 1:
        raise SamplingError("need at least one sample")
    rng = np.random.default_rng(rng)
    if jitter_sigma is None:
        jitter_sigma = 0.025 * bounds.edge
    n_near = int(math.ceil(near_fraction * n))
    parts = []
    if n_near:
        try:
            surf, _, _ = sample_surface(mesh, n_near, rng)
        except MeshError as exc:
            raise SamplingError(str(exc)) from exc
        parts.append(surf + rng.normal(scale=jitter_sigma, size=surf.shape))
    if n - n_near:
        parts.append(bounds.uniform(n - n_near, rng))
    pts = np.concatenate(parts)
    return pts, point_in_mesh(mesh, pts)


# ------------------------------------------------------------ blending weights

def nearest_vertex_weights(p, vertices, k: int = 4, sigma: float = 0.05, squared: bool = False):
    """k nearest vertices and their normalized blending weights.

    Weights are ``exp(-d / (2 sigma^2))`` with ``d`` the Euclidean distance
    (``squared=True`` uses ``d^2``). Ties are broken by lower vertex index. Accepts a
    single point (returns ``[k]`` arrays) or ``[N, 3]``.
    """
    pts = np.asarray(p, dtype=np.float64)
    single = pts.ndim == 1
    pts = pts.reshape(-1, 3)
    vertices = np.asarray(vertices, dtype=np.float64)
    if k > len(vertices):
        raise ValueError("k exceeds the number of vertices")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    kk = min(k + 4, len(vertices))
    _, cand = cKDTree(vertices).query(pts, k=kk)
    cand = cand.reshape(len(pts), kk)
    d = np.linalg.norm(pts[:, None, :] - vertices[cand], axis=-1)
    order = np.lexsort((cand, d), axis=-1)[:, :k]
    idx = np.take_along_axis(cand, order, axis=1)
    d = np.take_along_axis(d, order, axis=1)
    x = d * d if squared else d
    # shifting by the minimum leaves the normalized weights unchanged and avoids underflow
    w = np.exp(-(x - x[:, :1]) / (2.0 * sigma * sigma))
    w = w / w.sum(axis=1, keepdims=True)
    if single:
        return idx[0], w[0]
    return idx, w

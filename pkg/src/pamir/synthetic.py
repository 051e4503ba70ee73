"""Procedural clothed subjects, analytic occupancy oracles, a small orthographic
renderer and on-disk datasets.

A subject is the desk body model's capsule skeleton with per-capsule radius
multipliers ("clothing") and an optional skirt frustum. The outer surface is the
zero level set of the union SDF; marching cubes turns it into the ground-truth mesh.
Views of one subject differ by a root rotation about the vertical axis while the
camera stays fixed, so every view comes with its own ground-truth body.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import humanoid
from .body import BodyModel, BodyParams, TorchBody, rodrigues, skin
from .geometry import Bounds, Camera
from .mesh import TriMesh, grid_points, is_watertight, iso_surface, load_obj, save_obj
from .tensorio import file_checksum, load_tensors, save_tensors

MC_RESOLUTION = 128
DATASET_VERSION = 1


class SyntheticDataError(RuntimeError):
    pass


def _pose(**joints) -> np.ndarray:
    p = np.zeros((len(humanoid.JOINT_NAMES), 3))
    for name, aa in joints.items():
        p[humanoid.J[name]] = aa
    return p


# axis-angle per joint in the parent frame; +x on a hip swings the leg backward
POSE_LIBRARY = {
    "standing": _pose(),
    "walking": _pose(l_hip=(-0.35, 0, 0), r_hip=(0.30, 0, 0), l_knee=(0.20, 0, 0), r_knee=(0.35, 0, 0),
                     l_shoulder=(0.30, 0, 0), r_shoulder=(-0.30, 0, 0),
                     l_elbow=(-0.25, 0, 0), r_elbow=(-0.25, 0, 0)),
    "sitting": _pose(l_hip=(-1.40, 0, 0.05), r_hip=(-1.40, 0, -0.05), l_knee=(1.40, 0, 0), r_knee=(1.40, 0, 0),
                     l_shoulder=(-0.45, 0, 0), r_shoulder=(-0.45, 0, 0),
                     l_elbow=(-0.50, 0, 0), r_elbow=(-0.50, 0, 0)),
    "arms_raised": _pose(l_shoulder=(0, 0, 1.30), r_shoulder=(0, 0, -1.30),
                         l_elbow=(0, 0, 0.25), r_elbow=(0, 0, -0.25)),
}

# capsule groups used for colouring
_TOP = ("torso", "belly", "shoulders", "l_upper_arm", "r_upper_arm")
_BOTTOM = ("hips", "l_thigh", "r_thigh", "l_shin", "r_shin")
_SKIN = ("neck", "head", "l_forearm", "r_forearm", "l_hand", "r_hand")
_SHOES = ("l_foot", "r_foot")
_BACK_PANEL = ("torso", "belly", "shoulders", "head")

# 2-band spherical-harmonics light (L00, L1-1, L10, L11), mostly frontal
_C2, _C4 = 0.511664, 0.886227
_LIGHT_DIR = np.array([0.25, 0.35, 1.0]) / np.linalg.norm([0.25, 0.35, 1.0])
LIGHTING = {
    "frontal": np.concatenate([[0.55 / _C4], 0.45 * _LIGHT_DIR[[1, 2, 0]] / (2 * _C2)]),
    "flat": np.array([0.9 / _C4, 0.0, 0.0, 0.0]),
}


def sh_irradiance(normals: np.ndarray, coeffs) -> np.ndarray:
    """Irradiance of unit normals under 2-band SH coefficients (order L00, L1-1, L10, L11)."""
    n = np.asarray(normals, dtype=np.float64)
    c = np.asarray(coeffs, dtype=np.float64)
    return _C4 * c[0] + 2 * _C2 * (c[1] * n[..., 1] + c[2] * n[..., 2] + c[3] * n[..., 0])


@dataclass
class SyntheticSubject:
    seed: int
    pose_name: str
    body_params_gt: BodyParams
    radius_multipliers: np.ndarray          # [C] per-capsule clothing inflation, >= 1
    skirt: np.ndarray | None                # (top y, length, top radius, bottom radius) in rest space
    albedo: np.ndarray                      # [C + 1, 3] front colour per part, last row = skirt
    back_albedo: np.ndarray                 # [C + 1, 3]
    camera: Camera
    n_views: int = 4
    lighting: str = "frontal"
    image_size: int = 64
    meta: dict = field(default_factory=dict)

    def view_params(self, k: int) -> BodyParams:
        """Ground-truth body of view ``k``: the base pose with the root turned about +y."""
        angle = 2.0 * math.pi * k / self.n_views
        p = self.body_params_gt.copy()
        if k % self.n_views:
            ry = rodrigues(torch.tensor([0.0, angle, 0.0], dtype=torch.float64))
            r0 = rodrigues(torch.as_tensor(p.pose[0]))
            p.pose[0] = _matrix_to_axis_angle((ry @ r0).numpy())
        return p

    def save(self, path) -> None:
        arrays = {"shape": self.body_params_gt.shape, "pose": self.body_params_gt.pose,
                  "global_translation": self.body_params_gt.global_translation,
                  "global_scale": np.array([self.body_params_gt.global_scale]),
                  "radius_multipliers": self.radius_multipliers, "albedo": self.albedo,
                  "back_albedo": self.back_albedo, "camera": self.camera.as_array()}
        if self.skirt is not None:
            arrays["skirt"] = self.skirt
        save_tensors(path, arrays, meta={"kind": "synthetic_subject", "seed": self.seed,
                                         "pose_name": self.pose_name, "n_views": self.n_views,
                                         "lighting": self.lighting, "image_size": self.image_size,
                                         **self.meta})

    @classmethod
    def load(cls, path) -> "SyntheticSubject":
        a, meta = load_tensors(path)
        if meta.get("kind") != "synthetic_subject":
            raise SyntheticDataError(f"{path}: not a synthetic subject file")
        body = BodyParams(a["shape"], a["pose"], a["global_translation"], float(a["global_scale"][0]))
        extra = {k: v for k, v in meta.items()
                 if k not in ("kind", "seed", "pose_name", "n_views", "lighting", "image_size")}
        return cls(meta["seed"], meta["pose_name"], body, a["radius_multipliers"], a.get("skirt"),
                   a["albedo"], a["back_albedo"], Camera.from_array(a["camera"]), meta["n_views"],
                   meta["lighting"], meta["image_size"], extra)


def _matrix_to_axis_angle(r: np.ndarray) -> np.ndarray:
    from scipy.spatial.transform import Rotation

    return Rotation.from_matrix(r).as_rotvec()


# ------------------------------------------------------------------ posed geometry

def capped_cone_sdf(p: torch.Tensor, a: torch.Tensor, b: torch.Tensor, ra: float, rb: float) -> torch.Tensor:
    """Exact signed distance to a capped cone (frustum) with end radii ``ra`` at ``a`` and ``rb`` at ``b``."""
    rba = rb - ra
    ba = b - a
    baba = (ba * ba).sum()
    pa = p - a
    papa = (pa * pa).sum(-1)
    paba = (pa * ba).sum(-1) / baba
    x = torch.sqrt((papa - paba * paba * baba).clamp_min(0.0))
    cax = (x - torch.where(paba < 0.5, torch.as_tensor(ra, dtype=p.dtype),
                           torch.as_tensor(rb, dtype=p.dtype))).clamp_min(0.0)
    cay = (paba - 0.5).abs() - 0.5
    k = rba * rba + baba
    f = ((rba * (x - ra) + paba * baba) / k).clamp(0.0, 1.0)
    cbx = x - ra - f * rba
    cby = paba - f
    inside = (cbx < 0) & (cay < 0)
    d2 = torch.minimum(cax * cax + cay * cay * baba, cbx * cbx + cby * cby * baba)
    return torch.where(inside, -1.0, 1.0) * torch.sqrt(d2)


def _shape_displacement(u: torch.Tensor, beta: torch.Tensor, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """``humanoid.shape_directions`` contracted with ``beta`` for points ``u [N, C, 3]`` around capsules ``a, b [C, 3]``."""
    ab = b - a
    t = (((u - a) * ab).sum(-1) / (ab * ab).sum(-1)).clamp(0.0, 1.0)
    radial = u - (a + t[..., None] * ab)
    upper = ((u[..., 1] - 0.9) / 0.4).clamp(0.0, 1.0)
    out = beta[1] * 0.15 * radial
    dx = 0.08 * u[..., 0] * (beta[2] * upper + beta[3] * (1.0 - upper))
    dy = 0.06 * beta[0] * u[..., 1]
    return out + torch.stack([dx, dy, torch.zeros_like(dx)], dim=-1)


@dataclass
class PosedShape:
    """Shaped, posed capsules (and skirt) of one body, plus their owner transforms.

    A capsule's surface is the image of the rest capsule under the body model's shape
    displacement and its owner joint's rigid transform, so the skinned template lands
    on it wherever skinning is rigid. Distances are measured in the unshaped rest frame
    and rescaled by the girth factor.
    """

    a: np.ndarray            # world endpoints of the shaped capsules (used for bounds)
    b: np.ndarray
    r: np.ndarray            # world radii, girth and clothing included
    rest_a: np.ndarray       # shaped rest endpoints
    rest_b: np.ndarray
    rot: np.ndarray          # [C + 1, 3, 3] owner rotation per part
    trans: np.ndarray        # [C + 1, 3] owner translation per part (before global scale/translation)
    scale: float
    translation: np.ndarray
    skirt: tuple | None = None       # posed (a, b, ra, rb)
    skirt_rest: tuple | None = None
    beta: np.ndarray | None = None
    base_r: np.ndarray | None = None  # unshaped rest radii with clothing multipliers
    unshape_iterations: int = 6

    @property
    def n_parts(self) -> int:
        return len(self.r) + (1 if self.skirt is not None else 0)

    @property
    def girth(self) -> float:
        return 1.0 + 0.15 * float(self.beta[1]) if self.beta is not None and len(self.beta) > 1 else 1.0

    def capsule_sdf(self, points, idx=None) -> torch.Tensor:
        """Distances ``[N, len(idx)]`` to the shaped posed capsules ``idx`` (all by default)."""
        p = torch.as_tensor(points, dtype=torch.float64).reshape(-1, 3)
        idx = np.arange(len(self.r)) if idx is None else np.asarray(idx, dtype=np.int64).reshape(-1)
        t = lambda x: torch.as_tensor(np.asarray(x, dtype=np.float64))
        q = (p - t(self.translation)) / self.scale
        q = torch.einsum("cji,ncj->nci", t(self.rot[idx]), q[:, None, :] - t(self.trans[idx])[None])
        a, b = t(humanoid.CAPSULE_A[idx]), t(humanoid.CAPSULE_B[idx])
        beta = t(np.zeros(4) if self.beta is None else self.beta)
        u = q
        if bool((beta != 0).any()):
            for _ in range(self.unshape_iterations):
                u = q - _shape_displacement(u, beta, a, b)
        ab = b - a
        tt = (((u - a) * ab).sum(-1) / (ab * ab).sum(-1)).clamp(0.0, 1.0)
        d = torch.linalg.vector_norm(u - (a + tt[..., None] * ab), dim=-1) - t(self.base_r[idx])
        return d * (self.scale * self.girth)

    def part_sdf(self, points) -> torch.Tensor:
        p = torch.as_tensor(points, dtype=torch.float64).reshape(-1, 3)
        d = self.capsule_sdf(p)
        if self.skirt is not None:
            t = lambda x: torch.as_tensor(x, dtype=torch.float64)
            sa, sb, ra, rb = self.skirt
            d = torch.cat([d, capped_cone_sdf(p, t(sa), t(sb), ra, rb)[:, None]], dim=1)
        return d

    def sdf(self, points, chunk: int = 1 << 15) -> torch.Tensor:
        p = torch.as_tensor(points, dtype=torch.float64).reshape(-1, 3)
        if len(p) <= chunk or p.requires_grad:
            return self.part_sdf(p).min(1).values
        return torch.cat([self.part_sdf(p[i:i + chunk]).min(1).values for i in range(0, len(p), chunk)])

    def part_reach(self) -> np.ndarray:
        """Conservative world radius per capsule (the shape map can stretch the caps)."""
        stretch = 1.0 + 0.1 * (np.abs(self.beta).max() if self.beta is not None else 0.0)
        return self.r * stretch + 0.005 * self.scale

    def extent(self, pad: float = 0.0):
        reach = self.part_reach()[:, None]
        lo = (np.minimum(self.a, self.b) - reach).min(0) - pad
        hi = (np.maximum(self.a, self.b) + reach).max(0) + pad
        if self.skirt is not None:
            sa, sb, ra, rb = self.skirt
            m = max(ra, rb)
            lo = np.minimum(lo, np.minimum(sa, sb) - m - pad)
            hi = np.maximum(hi, np.maximum(sa, sb) + m + pad)
        return lo, hi

    def to_rest(self, points: np.ndarray, part: np.ndarray) -> np.ndarray:
        """Map world points into the (shaped) rest frame of the given owning parts."""
        q = (np.asarray(points) - self.translation) / self.scale - self.trans[part]
        return np.einsum("nji,nj->ni", self.rot[part], q)


def posed_shape(model: BodyModel, params: BodyParams, multipliers=None, skirt=None) -> PosedShape:
    """Pose the humanoid capsules with the body's shape/pose; ``multipliers`` inflate radii."""
    tb = TorchBody(model)
    shaped = tb.shaped(params.shape)
    g = tb.joint_transforms(params.pose, tb.joints(shaped)).numpy()
    beta = np.asarray(params.shape, dtype=np.float64)
    disp_a = np.einsum("k,knc->nc", beta, humanoid.shape_directions(humanoid.CAPSULE_A, humanoid.CAPSULE_A))
    disp_b = np.einsum("k,knc->nc", beta, humanoid.shape_directions(humanoid.CAPSULE_B, humanoid.CAPSULE_B))
    rest_a = humanoid.CAPSULE_A + disp_a
    rest_b = humanoid.CAPSULE_B + disp_b
    girth = 1.0 + 0.15 * (beta[1] if len(beta) > 1 else 0.0)
    mult = np.ones(len(humanoid.CAPSULE_R)) if multipliers is None else np.asarray(multipliers, dtype=np.float64)
    owner = np.asarray(humanoid.CAPSULE_OWNER)
    owners = np.concatenate([owner, [humanoid.J["pelvis"]]])
    rot, trans = g[owners, :3, :3], g[owners, :3, 3]
    s, t = params.global_scale, params.global_translation

    def world(x, k):
        return s * (np.einsum("nij,nj->ni", rot[k], x) + trans[k]) + t

    idx = np.arange(len(owner))
    a, b = world(rest_a, idx), world(rest_b, idx)
    r = s * humanoid.CAPSULE_R * girth * mult
    posed_skirt = skirt_rest = None
    if skirt is not None:
        top_y, length, r_top, r_bot = (float(x) for x in skirt)
        sa = np.array([0.0, top_y, 0.0])
        sb = np.array([0.0, top_y - length, 0.0])
        skirt_rest = (sa, sb, r_top * girth, r_bot * girth)
        k = np.array([len(owner)])
        posed_skirt = (world(sa[None], k)[0], world(sb[None], k)[0], s * r_top * girth, s * r_bot * girth)
    return PosedShape(a, b, r, rest_a, rest_b, rot, trans, s, np.asarray(t, dtype=np.float64),
                      posed_skirt, skirt_rest, beta.copy(), humanoid.CAPSULE_R * mult)


def subject_shape(subject: SyntheticSubject, model: BodyModel, params: BodyParams | None = None,
                  clothed: bool = True) -> PosedShape:
    params = subject.body_params_gt if params is None else params
    if not clothed:
        return posed_shape(model, params)
    return posed_shape(model, params, subject.radius_multipliers, subject.skirt)


def analytic_occupancy(subject: SyntheticSubject, p, model: BodyModel, params: BodyParams | None = None):
    """Exact membership (1 inside, 0 outside) in the subject's clothed capsule union."""
    shape = subject_shape(subject, model, params)
    pts = np.asarray(p, dtype=np.float64)
    single = pts.ndim == 1
    occ = (shape.sdf(pts.reshape(-1, 3)) <= 0).numpy().astype(np.int64)
    return int(occ[0]) if single else occ


def sdf_mesh(shape: PosedShape, resolution: int = MC_RESOLUTION, pad: float = 0.03) -> TriMesh:
    """Marching cubes of the union SDF on a cube grid enclosing the shape.

    Each part is evaluated only on the grid block around it; elsewhere the field is
    clamped to a positive band value, which leaves every cell near the surface exact.
    """
    lo, hi = shape.extent(pad)
    center = 0.5 * (lo + hi)
    half = 0.5 * float((hi - lo).max())
    lo, hi = center - half, center + half
    axes = [np.linspace(lo[k], hi[k], resolution) for k in range(3)]
    h = (hi - lo)[0] / (resolution - 1)
    band = 3.0 * h
    sdf = np.full((resolution,) * 3, band)
    reach = shape.part_reach()
    parts = [(shape.a[i], shape.b[i], reach[i], i) for i in range(len(shape.r))]
    if shape.skirt is not None:
        sa, sb, ra, rb = shape.skirt
        parts.append((sa, sb, max(ra, rb), None))
    for a, b, r, cap in parts:
        plo = np.minimum(a, b) - r - band
        phi = np.maximum(a, b) + r + band
        sl = tuple(slice(int(np.searchsorted(ax, plo[k])), int(np.searchsorted(ax, phi[k], side="right")))
                   for k, ax in enumerate(axes))
        sub = [ax[s_] for ax, s_ in zip(axes, sl)]
        if min(len(x) for x in sub) == 0:
            continue
        pts = torch.from_numpy(np.stack(np.meshgrid(*sub, indexing="ij"), -1).reshape(-1, 3))
        if cap is not None:
            d = torch.cat([shape.capsule_sdf(pts[i:i + (1 << 18)], [cap])[:, 0] for i in range(0, len(pts), 1 << 18)])
        else:
            sa, sb, ra, rb = shape.skirt
            d = capped_cone_sdf(pts, torch.from_numpy(np.asarray(sa)), torch.from_numpy(np.asarray(sb)), ra, rb)
        block = d.numpy().reshape(tuple(len(x) for x in sub))
        sdf[sl] = np.minimum(sdf[sl], block)
    mesh = iso_surface(-sdf, lo, hi, 0.0)
    mesh.meta["voxel"] = h
    return mesh


# ------------------------------------------------------------------ colour and shading

def albedo_at(subject: SyntheticSubject, shape: PosedShape, points) -> np.ndarray:
    """Unshaded colour of the closest part; back-panel parts switch colour behind their axis."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        return np.zeros((0, 3))
    part = shape.part_sdf(pts).argmin(1).numpy()
    rest = shape.to_rest(pts, part)
    n_caps = len(shape.r)
    axis_z = np.zeros(len(pts))
    caps = part < n_caps
    if caps.any():
        c = part[caps]
        axis_z[caps] = humanoid.closest_on_segment(rest[caps], shape.rest_a[c], shape.rest_b[c])[:, 2]
    back = rest[:, 2] < axis_z
    return np.where(back[:, None], subject.back_albedo[part], subject.albedo[part])


def surface_normals(shape: PosedShape, points) -> np.ndarray:
    """Unit SDF gradients (outward normals near the surface)."""
    p = torch.as_tensor(np.asarray(points, dtype=np.float64).reshape(-1, 3)).clone().requires_grad_(True)
    d = shape.sdf(p)
    (g,) = torch.autograd.grad(d.sum(), p)
    g = g.numpy()
    return g / np.maximum(np.linalg.norm(g, axis=1, keepdims=True), 1e-12)


def shaded_color(subject: SyntheticSubject, shape: PosedShape, points) -> np.ndarray:
    """Observed colour at near-surface points: albedo times SH irradiance of the local normal."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        return np.zeros((0, 3))
    e = sh_irradiance(surface_normals(shape, pts), LIGHTING[subject.lighting])
    return np.clip(albedo_at(subject, shape, pts) * e[:, None], 0.0, 1.0)


# ------------------------------------------------------------------ rendering

def pixel_grid(size: int) -> np.ndarray:
    """Normalized (u, v) of pixel centres, ``[size, size, 2]``; row 0 is the top (v = +1 side)."""
    c = -1.0 + (np.arange(size) + 0.5) * 2.0 / size
    u, v = np.meshgrid(c, -c, indexing="xy")
    return np.stack([u, v], axis=-1)


def rasterize(mesh: TriMesh, camera: Camera, size: int):
    """Depth-buffered orthographic rasterization.

    Returns ``(face_index [H, W] with -1 for background, barycentrics [H, W, 3])``.
    The nearest surface is the one with the largest z (the camera looks down -z).
    """
    face = -np.ones((size, size), dtype=np.int64)
    bary = np.zeros((size, size, 3))
    if mesh.is_empty:
        return face, bary
    uv = camera.scale * mesh.vertices[:, :2] + np.asarray(camera.offset)
    px = (uv[:, 0] + 1.0) * 0.5 * size - 0.5
    py = (1.0 - uv[:, 1]) * 0.5 * size - 0.5
    tx, ty = px[mesh.faces], py[mesh.faces]
    x0 = np.clip(np.ceil(tx.min(1)), 0, size).astype(np.int64)
    x1 = np.clip(np.floor(tx.max(1)), -1, size - 1).astype(np.int64)
    y0 = np.clip(np.ceil(ty.min(1)), 0, size).astype(np.int64)
    y1 = np.clip(np.floor(ty.max(1)), -1, size - 1).astype(np.int64)
    nx = np.maximum(x1 - x0 + 1, 0)
    ny = np.maximum(y1 - y0 + 1, 0)
    count = nx * ny
    tri = np.repeat(np.arange(len(mesh.faces)), count)
    local = np.arange(count.sum()) - np.repeat(np.cumsum(count) - count, count)
    ix = x0[tri] + local % nx[tri]
    iy = y0[tri] + local // nx[tri]
    ax, ay = tx[tri, 0], ty[tri, 0]
    e1x, e1y = tx[tri, 1] - ax, ty[tri, 1] - ay
    e2x, e2y = tx[tri, 2] - ax, ty[tri, 2] - ay
    det = e1x * e2y - e2x * e1y
    ok = np.abs(det) > 1e-14
    dx, dy = ix - ax, iy - ay
    with np.errstate(divide="ignore", invalid="ignore"):
        l1 = (dx * e2y - e2x * dy) / det
        l2 = (e1x * dy - dx * e1y) / det
        l0 = 1.0 - l1 - l2
        ok &= (l0 >= 0) & (l1 >= 0) & (l2 >= 0)
    tri, ix, iy, l0, l1, l2 = tri[ok], ix[ok], iy[ok], l0[ok], l1[ok], l2[ok]
    z = mesh.vertices[mesh.faces[tri], 2]
    depth = l0 * z[:, 0] + l1 * z[:, 1] + l2 * z[:, 2]
    pix = iy * size + ix
    order = np.lexsort((tri, -depth, pix))
    pix_sorted = pix[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = pix_sorted[1:] != pix_sorted[:-1]
    win = order[first]
    face.reshape(-1)[pix[win]] = tri[win]
    bary.reshape(-1, 3)[pix[win]] = np.stack([l0[win], l1[win], l2[win]], axis=1)
    return face, bary


def quantize(image: np.ndarray) -> np.ndarray:
    return (np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def render(subject: SyntheticSubject, camera: Camera | None = None, params: BodyParams | None = None,
           mesh: TriMesh | None = None, model: BodyModel | None = None, size: int | None = None) -> np.ndarray:
    """Lambertian SH-lit orthographic render ``[3, H, W]`` in [0, 1], white background.

    Values are quantized to 8 bits so an image survives a PNG round trip unchanged.
    """
    from .body import desk_model

    model = desk_model() if model is None else model
    camera = subject.camera if camera is None else camera
    size = subject.image_size if size is None else size
    shape = subject_shape(subject, model, params)
    if mesh is None:
        mesh = sdf_mesh(shape)
    face, bary = rasterize(mesh, camera, size)
    img = np.ones((size, size, 3))
    fg = face >= 0
    if fg.any():
        tri = mesh.faces[face[fg]]
        w = bary[fg]
        pts = np.einsum("nk,nkc->nc", w, mesh.vertices[tri])
        normals = np.einsum("nk,nkc->nc", w, mesh.vertex_normals()[tri])
        normals /= np.maximum(np.linalg.norm(normals, axis=1, keepdims=True), 1e-12)
        e = sh_irradiance(normals, LIGHTING[subject.lighting])
        img[fg] = np.clip(albedo_at(subject, shape, pts) * e[:, None], 0.0, 1.0)
    return quantize(img.transpose(2, 0, 1))


def silhouette(image: np.ndarray) -> np.ndarray:
    return np.any(np.asarray(image) < 1.0, axis=0)


def save_image(image: np.ndarray, path) -> None:
    arr = np.round(np.clip(np.asarray(image), 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def load_image(path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


# ------------------------------------------------------------------ subjects

def _palette(rng) -> np.ndarray:
    return rng.uniform(0.15, 0.85, size=3)


def generate_subject(seed: int, pose_library: dict | None = None, model: BodyModel | None = None,
                     clothing: bool = True, skirt: bool | None = None, constant_albedo=None,
                     n_views: int = 4, image_size: int = 64, lighting: str | None = None,
                     max_retries: int = 5):
    """Sample a clothed subject and its watertight outer mesh.

    Returns ``(subject, mesh)``. ``skirt=None`` lets the seed decide; ``constant_albedo``
    paints every part one colour under flat lighting.
    """
    from .body import desk_model

    model = desk_model() if model is None else model
    library = POSE_LIBRARY if pose_library is None else pose_library
    if not library:
        raise SyntheticDataError("pose library is empty")
    for attempt in range(max_retries):
        s = seed if attempt == 0 else seed + 7919 * attempt
        subject = _sample_subject(s, library, model, clothing, skirt, constant_albedo,
                                  n_views, image_size, lighting)
        mesh = sdf_mesh(subject_shape(subject, model))
        if is_watertight(mesh):
            return subject, mesh
    raise SyntheticDataError(f"could not generate a watertight subject from seed {seed} "
                             f"in {max_retries} attempts")


def _sample_subject(seed, library, model, clothing, skirt, constant_albedo, n_views, image_size, lighting):
    rng = np.random.default_rng([seed, 101])
    names = sorted(library)
    pose_name = names[int(rng.integers(len(names)))]
    pose = np.array(library[pose_name], dtype=np.float64)
    pose[1:] += rng.normal(0.0, 0.04, size=pose[1:].shape)
    shape = rng.uniform(-0.8, 0.8, size=model.n_shape)
    params = BodyParams(shape, pose)

    n_caps = len(humanoid.CAPSULE_NAMES)
    mult = np.ones(n_caps)
    if clothing:
        for i, name in enumerate(humanoid.CAPSULE_NAMES):
            if name in _TOP or name in _BOTTOM:
                mult[i] = 1.0 + rng.uniform(0.05, 0.25)
            elif name in _SHOES:
                mult[i] = 1.0 + rng.uniform(0.0, 0.15)
    want_skirt = skirt if skirt is not None else (clothing and rng.random() < 0.3)
    skirt_arr = None
    if want_skirt and pose_name in ("standing", "arms_raised"):
        skirt_arr = np.array([0.97, rng.uniform(0.35, 0.5), rng.uniform(0.15, 0.18), rng.uniform(0.24, 0.30)])

    albedo = np.zeros((n_caps + 1, 3))
    if constant_albedo is not None:
        albedo[:] = np.asarray(constant_albedo, dtype=np.float64)
        back = albedo.copy()
    else:
        colors = {g: _palette(rng) for g in ("top", "bottom", "skin", "shoes", "hair", "top_back")}
        for i, name in enumerate(humanoid.CAPSULE_NAMES):
            group = ("top" if name in _TOP else "bottom" if name in _BOTTOM
                     else "skin" if name in _SKIN else "shoes")
            albedo[i] = colors[group]
        albedo[n_caps] = colors["bottom"]
        back = albedo.copy()
        for i, name in enumerate(humanoid.CAPSULE_NAMES):
            if name == "head":
                back[i] = colors["hair"]
            elif name in _BACK_PANEL:
                back[i] = colors["top_back"]
    if lighting is None:
        lighting = "flat" if constant_albedo is not None else "frontal"

    subject = SyntheticSubject(seed, pose_name, params, mult, skirt_arr, albedo, back,
                               Camera(1.0), n_views, lighting, image_size)
    # fixed camera framing the base pose; later views turn about the vertical axis
    lo, hi = subject_shape(subject, model).extent()
    subject.camera = Camera.framing(Bounds.around(np.stack([lo, hi]), 1.2))
    return subject


def perturb_body(params: BodyParams, height: float, rng, pose_std: float = 0.1, max_joints: int = 3,
                 z_std_fraction: float = 0.05) -> BodyParams:
    """Stand-in for a body regressor: jitter up to ``max_joints`` joint rotations and the depth."""
    out = params.copy()
    n_j = len(out.pose)
    k = int(rng.integers(1, max_joints + 1))
    joints = rng.choice(np.arange(1, n_j), size=k, replace=False)
    out.pose[joints] += rng.normal(0.0, pose_std, size=(k, 3))
    out.global_translation[2] += rng.normal(0.0, z_std_fraction * height)
    return out


# ------------------------------------------------------------------ datasets

@dataclass
class ViewRecord:
    subject: int
    view: int
    image: np.ndarray           # [3, H, W] float32
    camera: Camera
    body_gt: BodyParams
    body_pred: BodyParams
    mesh: TriMesh               # clothed ground-truth surface of this view


@dataclass
class SyntheticDataset:
    subjects: list
    views: list
    root: Path | None = None

    def view(self, subject: int, k: int) -> ViewRecord:
        for v in self.views:
            if v.subject == subject and v.view == k:
                return v
        raise KeyError((subject, k))

    def subject_views(self, subject: int) -> list:
        return [v for v in self.views if v.subject == subject]


def make_views(subject: SyntheticSubject, index: int, model: BodyModel, n_views: int | None = None,
               base_mesh: TriMesh | None = None, seed: int = 0) -> list:
    n_views = subject.n_views if n_views is None else n_views
    views = []
    for k in range(n_views):
        gt = subject.view_params(k)
        mesh = base_mesh if (k == 0 and base_mesh is not None) else sdf_mesh(subject_shape(subject, model, gt))
        height = float(np.ptp(skin(model, gt).vertices[:, 1]))
        rng = np.random.default_rng([seed, index, k, 202])
        pred = perturb_body(gt, height, rng)
        image = render(subject, params=gt, mesh=mesh, model=model)
        views.append(ViewRecord(index, k, image, subject.camera, gt, pred, mesh))
    return views


def generate_dataset(n_subjects: int, views_per_subject: int = 4, seed: int = 0, model: BodyModel | None = None,
                     image_size: int = 64, **subject_kwargs) -> SyntheticDataset:
    """In-memory dataset; a pure function of its arguments."""
    from .body import desk_model

    model = desk_model() if model is None else model
    subjects, views = [], []
    for s in range(n_subjects):
        subject, mesh = generate_subject(seed * 100003 + s, model=model, n_views=views_per_subject,
                                         image_size=image_size, **subject_kwargs)
        subjects.append(subject)
        views.extend(make_views(subject, s, model, views_per_subject, mesh, seed))
    return SyntheticDataset(subjects, views)


def write_dataset(dataset: SyntheticDataset, out_dir, seed: int = 0) -> Path:
    """Write a dataset directory with a checksummed manifest; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []

    def add(rel: str, kind: str):
        entries.append(f"{rel} {kind} {file_checksum(out / rel)}")

    for s, subject in enumerate(dataset.subjects):
        sdir = f"subject_{s:03d}"
        (out / sdir).mkdir(exist_ok=True)
        subject.save(out / sdir / "subject.tc")
        add(f"{sdir}/subject.tc", "subject")
    for v in dataset.views:
        vdir = f"subject_{v.subject:03d}/view_{v.view:02d}"
        (out / vdir).mkdir(parents=True, exist_ok=True)
        save_image(v.image, out / vdir / "image.png")
        add(f"{vdir}/image.png", "image")
        save_tensors(out / vdir / "camera.tc", {"camera": v.camera.as_array()}, meta={"kind": "camera"})
        add(f"{vdir}/camera.tc", "camera")
        v.body_gt.save(out / vdir / "body_gt.tc")
        add(f"{vdir}/body_gt.tc", "body_gt")
        v.body_pred.save(out / vdir / "body_pred.tc")
        add(f"{vdir}/body_pred.tc", "body_pred")
        save_obj(v.mesh, out / vdir / "mesh.obj")
        add(f"{vdir}/mesh.obj", "mesh")
    header = {"version": DATASET_VERSION, "subjects": len(dataset.subjects),
              "views": len(dataset.views), "seed": seed}
    manifest = out / "manifest"
    manifest.write_text("# pamir-dataset " + json.dumps(header, sort_keys=True) + "\n"
                        + "\n".join(entries) + "\n")
    dataset.root = out
    return manifest


def build_dataset(n_subjects: int, views_per_subject: int, out_dir, seed: int = 0,
                  image_size: int = 64, model: BodyModel | None = None) -> Path:
    ds = generate_dataset(n_subjects, views_per_subject, seed, model, image_size)
    return write_dataset(ds, out_dir, seed)


def read_manifest(path) -> tuple[dict, list]:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest"
    header, entries = {}, []
    for line in path.read_text().splitlines():
        if line.startswith("# pamir-dataset "):
            header = json.loads(line[len("# pamir-dataset "):])
        elif line.strip() and not line.startswith("#"):
            rel, kind, checksum = line.split()
            entries.append((rel, kind, checksum))
    return header, entries


def load_dataset(root, verify: bool = True) -> SyntheticDataset:
    """Load a dataset directory; with ``verify`` every artifact's checksum is checked."""
    root = Path(root)
    header, entries = read_manifest(root)
    if verify:
        for rel, _, checksum in entries:
            if file_checksum(root / rel) != checksum:
                raise SyntheticDataError(f"checksum mismatch for {rel}")
    subjects, views = [], []
    for rel, kind, _ in entries:
        if kind == "subject":
            subjects.append(SyntheticSubject.load(root / rel))
        elif kind == "image":
            vdir = (root / rel).parent
            s = int(vdir.parent.name.split("_")[1])
            k = int(vdir.name.split("_")[1])
            cam, _ = load_tensors(vdir / "camera.tc")
            views.append(ViewRecord(s, k, load_image(vdir / "image.png"), Camera.from_array(cam["camera"]),
                                    BodyParams.load(vdir / "body_gt.tc"), BodyParams.load(vdir / "body_pred.tc"),
                                    load_obj(vdir / "mesh.obj")))
    return SyntheticDataset(subjects, views, root)

"""Parametric body model: blendshapes, skeleton joints and linear blend skinning.

The math lives in :class:`TorchBody` so that skinning is differentiable in shape,
pose, translation and scale; the module-level functions are numpy conveniences.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import torch

from . import humanoid
from .mesh import TriMesh, iso_surface, watertight_report
from .tensorio import load_tensors, save_tensors

BODY_MODEL_VERSION = 1


class BodyModelError(ValueError):
    pass


class BodyParamsError(ValueError):
    pass


@dataclass(frozen=True)
class BodyModel:
    template_vertices: np.ndarray          # [n_S, 3]
    faces: np.ndarray                      # [n_F, 3]
    shape_basis: np.ndarray                # [n_beta, n_S, 3]
    pose_basis: np.ndarray                 # [n_pose_feat, n_S, 3], may be empty
    joint_regressor: np.ndarray            # [n_J, n_S]
    skinning_weights: np.ndarray           # [n_S, n_J]
    kinematic_parents: np.ndarray          # [n_J], root = -1
    joint_names: tuple = field(default=())

    @property
    def n_vertices(self) -> int:
        return self.template_vertices.shape[0]

    @property
    def n_joints(self) -> int:
        return self.kinematic_parents.shape[0]

    @property
    def n_shape(self) -> int:
        return self.shape_basis.shape[0]

    def faces_mesh(self, vertices) -> TriMesh:
        return TriMesh(vertices, self.faces)

    def validate(self, check_mesh: bool = True) -> dict:
        """Check every model invariant; raise BodyModelError on the first failure."""
        n_s, n_j = self.n_vertices, self.n_joints
        if self.template_vertices.shape != (n_s, 3):
            raise BodyModelError("template_vertices must be [n_S, 3]")
        if self.shape_basis.ndim != 3 or self.shape_basis.shape[1:] != (n_s, 3):
            raise BodyModelError("shape_basis must be [n_beta, n_S, 3]")
        if self.pose_basis.size and self.pose_basis.shape != (9 * (n_j - 1), n_s, 3):
            raise BodyModelError("pose_basis must be empty or [9 (n_J - 1), n_S, 3]")
        if self.joint_regressor.shape != (n_j, n_s):
            raise BodyModelError("joint_regressor must be [n_J, n_S]")
        if self.skinning_weights.shape != (n_s, n_j):
            raise BodyModelError("skinning_weights must be [n_S, n_J]")
        w = self.skinning_weights
        if (w < 0).any() or np.abs(w.sum(1) - 1).max() > 1e-6:
            raise BodyModelError("skinning weight rows must be nonnegative and sum to 1")
        if np.abs(self.joint_regressor.sum(1) - 1).max() > 1e-6:
            raise BodyModelError("joint regressor rows must sum to 1")
        kinematic_order(self.kinematic_parents)
        if len(self.faces) == 0 or self.faces.min() < 0 or self.faces.max() >= n_s:
            raise BodyModelError("faces index invalid vertices")
        report = {"n_vertices": n_s, "n_faces": len(self.faces), "n_joints": n_j,
                  "n_shape": self.n_shape, "n_pose_basis": int(self.pose_basis.shape[0]) if self.pose_basis.size else 0}
        if check_mesh:
            wt = watertight_report(TriMesh(self.template_vertices, self.faces))
            if not wt["watertight"]:
                raise BodyModelError(f"template mesh is not watertight/consistently oriented: {wt}")
            if TriMesh(self.template_vertices, self.faces).signed_volume() <= 0:
                raise BodyModelError("template mesh faces are oriented inward")
            report["watertight"] = True
        return report

    def save(self, path) -> None:
        save_tensors(path, {
            "template_vertices": self.template_vertices, "faces": self.faces,
            "shape_basis": self.shape_basis, "pose_basis": self.pose_basis,
            "joint_regressor": self.joint_regressor, "skinning_weights": self.skinning_weights,
            "kinematic_parents": self.kinematic_parents,
        }, meta={"kind": "body_model", "version": BODY_MODEL_VERSION,
                 "joint_names": list(self.joint_names)})

    @classmethod
    def load(cls, path, check_mesh: bool = True) -> "BodyModel":
        arrays, meta = load_tensors(path)
        if meta.get("kind") != "body_model":
            raise BodyModelError(f"{path}: not a body model file")
        if meta.get("version") != BODY_MODEL_VERSION:
            raise BodyModelError(f"{path}: unsupported body model version {meta.get('version')}")
        try:
            model = cls(
                template_vertices=arrays["template_vertices"].astype(np.float64),
                faces=arrays["faces"].astype(np.int64),
                shape_basis=arrays["shape_basis"].astype(np.float64),
                pose_basis=arrays["pose_basis"].astype(np.float64),
                joint_regressor=arrays["joint_regressor"].astype(np.float64),
                skinning_weights=arrays["skinning_weights"].astype(np.float64),
                kinematic_parents=arrays["kinematic_parents"].astype(np.int64),
                joint_names=tuple(meta.get("joint_names", ())),
            )
        except KeyError as exc:
            raise BodyModelError(f"{path}: missing array {exc}") from exc
        model.validate(check_mesh=check_mesh)
        return model


@dataclass
class BodyParams:
    shape: np.ndarray
    pose: np.ndarray
    global_translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    global_scale: float = 1.0

    def __post_init__(self):
        self.shape = np.asarray(self.shape, dtype=np.float64).reshape(-1)
        self.pose = np.asarray(self.pose, dtype=np.float64).reshape(-1, 3)
        self.global_translation = np.asarray(self.global_translation, dtype=np.float64).reshape(3)
        self.global_scale = float(self.global_scale)
        if not (np.all(np.isfinite(self.shape)) and np.all(np.isfinite(self.pose))
                and np.all(np.isfinite(self.global_translation)) and np.isfinite(self.global_scale)):
            raise BodyParamsError("body parameters must be finite")
        if self.global_scale <= 0:
            raise BodyParamsError("global_scale must be positive")

    @classmethod
    def zeros(cls, model: BodyModel) -> "BodyParams":
        return cls(np.zeros(model.n_shape), np.zeros((model.n_joints, 3)))

    def copy(self, **changes) -> "BodyParams":
        base = replace(self, shape=self.shape.copy(), pose=self.pose.copy(),
                       global_translation=self.global_translation.copy())
        return replace(base, **changes) if changes else base

    def save(self, path) -> None:
        save_tensors(path, {"shape": self.shape, "pose": self.pose,
                            "global_translation": self.global_translation,
                            "global_scale": np.array([self.global_scale])},
                     meta={"kind": "body_params", "version": 1})

    @classmethod
    def load(cls, path) -> "BodyParams":
        arrays, meta = load_tensors(path)
        if meta.get("kind") != "body_params":
            raise BodyParamsError(f"{path}: not a body parameter file")
        return cls(arrays["shape"], arrays["pose"], arrays["global_translation"],
                   float(arrays["global_scale"][0]))


def check_params(model: BodyModel, params: BodyParams) -> None:
    if params.shape.shape != (model.n_shape,):
        raise BodyParamsError(f"shape has {params.shape.size} coefficients, model expects {model.n_shape}")
    if params.pose.shape != (model.n_joints, 3):
        raise BodyParamsError(f"pose must be [{model.n_joints}, 3], got {list(params.pose.shape)}")


def kinematic_order(parents) -> list[int]:
    """Breadth-first joint order; validates that ``parents`` is a tree rooted at 0."""
    parents = np.asarray(parents)
    n = len(parents)
    if n == 0 or parents[0] >= 0:
        raise BodyModelError("joint 0 must be the root (negative parent sentinel)")
    children = {i: [] for i in range(n)}
    for j in range(1, n):
        p = int(parents[j])
        if not 0 <= p < n or p == j:
            raise BodyModelError(f"joint {j} has invalid parent {p}")
        children[p].append(j)
    order, queue = [], [0]
    while queue:
        j = queue.pop(0)
        order.append(j)
        queue.extend(children[j])
    if len(order) != n:
        raise BodyModelError("kinematic_parents contains a cycle or a disconnected joint")
    return order


def rodrigues(aa: torch.Tensor) -> torch.Tensor:
    """Axis-angle ``[..., 3]`` to rotation matrices ``[..., 3, 3]``; exact identity at 0."""
    angle2 = (aa * aa).sum(-1, keepdim=True)
    angle = torch.sqrt(angle2 + 1e-30)
    x, y, z = aa.unbind(-1)
    zero = torch.zeros_like(x)
    k = torch.stack([zero, -z, y, z, zero, -x, -y, x, zero], dim=-1).reshape(aa.shape[:-1] + (3, 3))
    a = (torch.sin(angle) / angle)[..., None]
    b = ((1.0 - torch.cos(angle)) / (angle2 + 1e-30))[..., None]
    small = (angle2 < 1e-12)[..., None]
    # Taylor branch keeps (1 - cos)/a^2 accurate near zero
    b = torch.where(small, 0.5 - angle2[..., None] / 24.0, b)
    eye = torch.eye(3, dtype=aa.dtype).expand(k.shape)
    return eye + a * k + b * (k @ k)


class TorchBody:
    """Differentiable evaluation of a :class:`BodyModel`."""

    def __init__(self, model: BodyModel, dtype=torch.float64):
        self.model = model
        self.dtype = dtype
        t = lambda a: torch.as_tensor(np.asarray(a), dtype=dtype)
        self.template = t(model.template_vertices)
        self.shape_basis = t(model.shape_basis)
        self.pose_basis = t(model.pose_basis) if model.pose_basis.size else None
        self.regressor = t(model.joint_regressor)
        self.weights = t(model.skinning_weights)
        self.parents = [int(p) for p in model.kinematic_parents]
        self.order = kinematic_order(model.kinematic_parents)

    def tensor(self, x) -> torch.Tensor:
        if isinstance(x, torch.Tensor):
            return x
        return torch.as_tensor(np.asarray(x), dtype=self.dtype)

    def shaped(self, shape, pose=None) -> torch.Tensor:
        shape = self.tensor(shape)
        if shape.shape != (self.shape_basis.shape[0],):
            raise BodyParamsError("shape coefficient count does not match the model")
        v = self.template + torch.einsum("k,kvc->vc", shape, self.shape_basis)
        if self.pose_basis is not None and pose is not None:
            rot = rodrigues(self.tensor(pose))[1:]
            feat = (rot - torch.eye(3, dtype=rot.dtype)).reshape(-1)
            v = v + torch.einsum("k,kvc->vc", feat, self.pose_basis)
        return v

    def joints(self, shaped: torch.Tensor) -> torch.Tensor:
        if shaped.shape[0] != self.regressor.shape[1]:
            raise BodyParamsError("shaped vertices do not match the joint regressor")
        return self.regressor @ shaped

    def joint_transforms(self, pose, joints: torch.Tensor) -> torch.Tensor:
        """Per-joint world transforms relative to the rest pose, ``[n_J, 4, 4]``."""
        pose = self.tensor(pose)
        rot = rodrigues(pose)
        eye = torch.eye(3, dtype=rot.dtype)
        n = len(self.parents)
        # track d_k = (posed joint position) - (rest joint position) through (R - I)
        # terms so the rest pose yields exact identities
        world_r = [None] * n
        disp = [None] * n
        for j in self.order:
            p = self.parents[j]
            if p < 0:
                world_r[j] = rot[j]
                disp[j] = torch.zeros(3, dtype=rot.dtype)
            else:
                world_r[j] = world_r[p] @ rot[j]
                disp[j] = (world_r[p] - eye) @ (joints[j] - joints[p]) + disp[p]
        r = torch.stack(world_r)
        t = torch.stack(disp) - ((r - eye) @ joints[..., None])[..., 0]
        g = torch.cat([torch.cat([r, t[..., None]], dim=2),
                       torch.tensor([0.0, 0.0, 0.0, 1.0], dtype=r.dtype).expand(n, 1, 4)], dim=1)
        return g

    def blend(self, g: torch.Tensor) -> torch.Tensor:
        # I + sum_k w_k (G_k - I) equals sum_k w_k G_k for normalized weights and is
        # exactly the identity when every G_k is
        eye = torch.eye(4, dtype=g.dtype)
        return eye + torch.einsum("vk,kij->vij", self.weights, g - eye)

    def lbs_matrices(self, shape, pose) -> torch.Tensor:
        shaped = self.shaped(shape, pose)
        return self.blend(self.joint_transforms(pose, self.joints(shaped)))

    def vertices(self, shape, pose, translation=None, scale=None) -> torch.Tensor:
        shaped = self.shaped(shape, pose)
        m = self.blend(self.joint_transforms(pose, self.joints(shaped)))
        v = (m[:, :3, :3] @ shaped[..., None])[..., 0] + m[:, :3, 3]
        if scale is not None:
            v = self.tensor(scale) * v
        if translation is not None:
            v = v + self.tensor(translation)
        return v

    def params_vertices(self, params: BodyParams) -> torch.Tensor:
        return self.vertices(params.shape, params.pose, params.global_translation, params.global_scale)


# --------------------------------------------------------------- numpy API

def shaped_template(model: BodyModel, params: BodyParams) -> np.ndarray:
    check_params(model, params)
    return TorchBody(model).shaped(params.shape, params.pose).numpy()


def joint_locations(model: BodyModel, shaped) -> np.ndarray:
    shaped = np.asarray(shaped, dtype=np.float64)
    if shaped.shape != (model.n_vertices, 3):
        raise BodyParamsError("shaped vertices must be [n_S, 3]")
    return model.joint_regressor @ shaped


def joint_transforms(model: BodyModel, params: BodyParams) -> np.ndarray:
    check_params(model, params)
    tb = TorchBody(model)
    return tb.joint_transforms(params.pose, tb.joints(tb.shaped(params.shape, params.pose))).numpy()


def vertex_lbs_matrices(model: BodyModel, params: BodyParams) -> np.ndarray:
    check_params(model, params)
    return TorchBody(model).lbs_matrices(params.shape, params.pose).numpy()


def skin(model: BodyModel, params: BodyParams) -> TriMesh:
    check_params(model, params)
    v = TorchBody(model).params_vertices(params).numpy()
    return TriMesh(v, model.faces.copy())


# --------------------------------------------------------------- desk model

def _nnls_regressor(vertices: np.ndarray, joints: np.ndarray, k: int = 128) -> np.ndarray:
    """Convex vertex weights per joint that reproduce the rest joint positions."""
    from scipy.optimize import nnls

    reg = np.zeros((len(joints), len(vertices)))
    for j, c in enumerate(joints):
        idx = np.argsort(np.linalg.norm(vertices - c, axis=1), kind="stable")[:k]
        lam = 10.0
        a = np.vstack([vertices[idx].T, lam * np.ones((1, k))])
        b = np.concatenate([c, [lam]])
        w, _ = nnls(a, b)
        reg[j, idx] = w / w.sum()
    return reg


def build_desk_model(spacing: float = 0.04, blend_width: float = 0.012,
                     pose_correctives: bool = False) -> BodyModel:
    """Procedural 16-joint, 4-shape humanoid meshed from its rest-pose capsule union."""
    a, b, r = humanoid.CAPSULE_A, humanoid.CAPSULE_B, humanoid.CAPSULE_R
    lo = np.minimum(a, b).min(0) - r.max() - 2 * spacing
    hi = np.maximum(a, b).max(0) + r.max() + 2 * spacing
    res = np.ceil((hi - lo) / spacing).astype(int) + 1
    axes = [np.linspace(lo[k], lo[k] + (res[k] - 1) * spacing, res[k]) for k in range(3)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), -1)
    sdf = humanoid.capsule_sdf(torch.from_numpy(pts.reshape(-1, 3)), torch.from_numpy(a),
                               torch.from_numpy(b), torch.from_numpy(r)).min(1).values.numpy()
    hi_grid = lo + (res - 1) * spacing
    mesh = iso_surface(-sdf.reshape(tuple(res)), lo, hi_grid, 0.0)
    verts, faces = mesh.vertices, mesh.faces

    sd = humanoid.capsule_sdf(torch.from_numpy(verts), torch.from_numpy(a), torch.from_numpy(b),
                              torch.from_numpy(r)).numpy()
    n_j = len(humanoid.JOINT_NAMES)
    logits = np.exp(-(sd - sd.min(1, keepdims=True)) / blend_width)
    w = np.zeros((len(verts), n_j))
    for c, owner in enumerate(humanoid.CAPSULE_OWNER):
        w[:, owner] += logits[:, c]
    # keep the four strongest joints per vertex
    drop = np.argsort(-w, axis=1, kind="stable")[:, 4:]
    np.put_along_axis(w, drop, 0.0, axis=1)
    w /= w.sum(1, keepdims=True)

    nearest = sd.argmin(1)
    axis_pts = humanoid.closest_on_segment(verts, a[nearest], b[nearest])
    shape_basis = humanoid.shape_directions(verts, axis_pts)

    if pose_correctives:
        pose_basis = np.zeros((9 * (n_j - 1), len(verts), 3))
        normals = TriMesh(verts, faces).vertex_normals()
        for j in range(1, n_j):
            near = np.exp(-np.sum((verts - humanoid.REST_JOINTS[j]) ** 2, 1) / (2 * 0.05 ** 2))
            for d in range(3):
                # diagonal of (R - I) is <= 0, so a negative coefficient bulges outward
                pose_basis[9 * (j - 1) + 4 * d] = -0.02 * near[:, None] * normals
    else:
        pose_basis = np.zeros((0, len(verts), 3))

    model = BodyModel(
        template_vertices=verts,
        faces=faces,
        shape_basis=shape_basis,
        pose_basis=pose_basis,
        joint_regressor=_nnls_regressor(verts, humanoid.REST_JOINTS),
        skinning_weights=w,
        kinematic_parents=humanoid.PARENTS.copy(),
        joint_names=humanoid.JOINT_NAMES,
    )
    model.validate()
    return model


_DESK_MODEL = None


def desk_model() -> BodyModel:
    """Cached default desk-scale body model."""
    global _DESK_MODEL
    if _DESK_MODEL is None:
        _DESK_MODEL = build_desk_model()
    return _DESK_MODEL

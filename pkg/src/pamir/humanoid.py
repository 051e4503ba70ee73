"""Procedural capsule humanoid used for the desk-scale body model and synthetic subjects.

Rest pose is an A-pose, y-up, facing +z, feet near y = 0. Every capsule is owned by
one joint whose transform moves it rigidly.
"""

from __future__ import annotations

import numpy as np
import torch

JOINT_NAMES = (
    "pelvis", "spine", "chest", "head",
    "l_shoulder", "l_elbow", "l_wrist",
    "r_shoulder", "r_elbow", "r_wrist",
    "l_hip", "l_knee", "l_ankle",
    "r_hip", "r_knee", "r_ankle",
)
PARENTS = np.array([-1, 0, 1, 2, 2, 4, 5, 2, 7, 8, 0, 10, 11, 0, 13, 14], dtype=np.int64)
J = {n: i for i, n in enumerate(JOINT_NAMES)}

_ARM_DIR = np.array([np.cos(np.radians(40.0)), -np.sin(np.radians(40.0)), 0.0])


def _mirror(p):
    return np.array([-p[0], p[1], p[2]])


def _rest_joints() -> np.ndarray:
    j = np.zeros((16, 3))
    j[J["pelvis"]] = (0.0, 0.95, 0.0)
    j[J["spine"]] = (0.0, 1.12, 0.0)
    j[J["chest"]] = (0.0, 1.38, 0.0)
    j[J["head"]] = (0.0, 1.52, 0.0)
    j[J["l_shoulder"]] = (0.18, 1.40, 0.0)
    j[J["l_elbow"]] = j[J["l_shoulder"]] + 0.27 * _ARM_DIR
    j[J["l_wrist"]] = j[J["l_elbow"]] + 0.25 * _ARM_DIR
    j[J["l_hip"]] = (0.09, 0.90, 0.0)
    j[J["l_knee"]] = (0.10, 0.50, 0.0)
    j[J["l_ankle"]] = (0.10, 0.09, 0.0)
    for side in ("shoulder", "elbow", "wrist", "hip", "knee", "ankle"):
        j[J["r_" + side]] = _mirror(j[J["l_" + side]])
    return j


REST_JOINTS = _rest_joints()


def _capsules():
    j = REST_JOINTS
    caps = [
        # (name, a, b, radius, owner)
        ("hips", (-0.09, 0.92, 0.0), (0.09, 0.92, 0.0), 0.120, "pelvis"),
        ("belly", j[J["pelvis"]], j[J["spine"]], 0.130, "pelvis"),
        ("torso", j[J["spine"]], (0.0, 1.36, 0.0), 0.140, "spine"),
        ("shoulders", (-0.16, 1.38, 0.0), (0.16, 1.38, 0.0), 0.075, "chest"),
        ("neck", j[J["chest"]], j[J["head"]], 0.050, "chest"),
        ("head", (0.0, 1.58, 0.0), (0.0, 1.68, 0.0), 0.095, "head"),
    ]
    for s in ("l", "r"):
        m = (lambda p: np.asarray(p, dtype=np.float64)) if s == "l" else _mirror
        hand_end = m(REST_JOINTS[J["l_wrist"]] + 0.09 * _ARM_DIR)
        toe = m(np.array([0.10, 0.05, 0.13]))
        caps += [
            (s + "_upper_arm", j[J[s + "_shoulder"]], j[J[s + "_elbow"]], 0.050, s + "_shoulder"),
            (s + "_forearm", j[J[s + "_elbow"]], j[J[s + "_wrist"]], 0.040, s + "_elbow"),
            (s + "_hand", j[J[s + "_wrist"]], hand_end, 0.035, s + "_wrist"),
            (s + "_thigh", j[J[s + "_hip"]], j[J[s + "_knee"]], 0.075, s + "_hip"),
            (s + "_shin", j[J[s + "_knee"]], j[J[s + "_ankle"]], 0.055, s + "_knee"),
            (s + "_foot", j[J[s + "_ankle"]], toe, 0.040, s + "_ankle"),
        ]
    names = [c[0] for c in caps]
    a = np.array([c[1] for c in caps], dtype=np.float64)
    b = np.array([c[2] for c in caps], dtype=np.float64)
    r = np.array([c[3] for c in caps], dtype=np.float64)
    owner = np.array([J[c[4]] for c in caps], dtype=np.int64)
    return names, a, b, r, owner


CAPSULE_NAMES, CAPSULE_A, CAPSULE_B, CAPSULE_R, CAPSULE_OWNER = _capsules()


def segment_distance(p: torch.Tensor, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Distances from points ``[N, 3]`` to segments ``[C, 3]`` -> ``[N, C]``."""
    ab = b - a
    ap = p[:, None, :] - a[None]
    t = (ap * ab[None]).sum(-1) / (ab * ab).sum(-1).clamp_min(1e-18)[None]
    t = t.clamp(0.0, 1.0)
    closest = a[None] + t[..., None] * ab[None]
    return torch.linalg.vector_norm(p[:, None, :] - closest, dim=-1)


def capsule_sdf(p: torch.Tensor, a: torch.Tensor, b: torch.Tensor, r: torch.Tensor) -> torch.Tensor:
    """Per-capsule signed distances ``[N, C]``."""
    return segment_distance(p, a, b) - r[None]


def closest_on_segment(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    t = np.clip(((p - a) * ab).sum(-1) / (ab * ab).sum(-1), 0.0, 1.0)
    return a + t[..., None] * ab


def upper_body_weight(y):
    return np.clip((np.asarray(y) - 0.9) / 0.4, 0.0, 1.0)


def shape_directions(points: np.ndarray, axis_points: np.ndarray | None = None) -> np.ndarray:
    """Displacement of ``points`` per unit of each shape coefficient, ``[4, N, 3]``.

    0 height (y scaling about the floor), 1 limb girth (radial growth about the
    capsule axis, needs ``axis_points``), 2 shoulder width, 3 hip width.
    """
    points = np.asarray(points, dtype=np.float64)
    out = np.zeros((4,) + points.shape)
    out[0, :, 1] = 0.06 * points[:, 1]
    if axis_points is not None:
        out[1] = 0.15 * (points - axis_points)
    s = upper_body_weight(points[:, 1])
    out[2, :, 0] = 0.08 * points[:, 0] * s
    out[3, :, 0] = 0.08 * points[:, 0] * (1.0 - s)
    return out

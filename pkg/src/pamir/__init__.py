"""Desk-scale parametric-model-conditioned implicit human reconstruction.

The package couples pixel-aligned image features with voxel-aligned features of a
skinned body model, decodes them into an occupancy (or RGB-alpha) field and extracts
meshes with marching cubes. Everything needed for self-contained experiments ships
with it: a procedural humanoid body model, synthetic clothed subjects with analytic
inside/outside oracles and a tiny orthographic renderer.
"""

from .body import BodyModel, BodyParams, desk_model, skin, vertex_lbs_matrices
from .geometry import Bounds, Camera, FeatureMap, FeatureVolume, OccupancyVolume
from .mesh import TriMesh, load_mesh, save_mesh

__all__ = [
    "BodyModel", "BodyParams", "Bounds", "Camera", "FeatureMap", "FeatureVolume",
    "OccupancyVolume", "TriMesh", "desk_model", "load_mesh", "save_mesh", "skin",
    "vertex_lbs_matrices",
]

__version__ = "0.1.0"

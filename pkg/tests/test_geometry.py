import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from pamir.geometry import (Bounds, Camera, FeatureMap, FeatureVolume, SamplingError, VoxelizationError,
                            nearest_vertex_weights, point_in_mesh, project, sample_map, sample_training_points,
                            sample_volume, voxelize)
from pamir.mesh import TriMesh, box_mesh, grid_points, icosphere, marching_cubes
from pamir.testmodels import five_vertex_fixture


# ----------------------------------------------------------------- camera

def test_projection_ignores_depth():
    np.testing.assert_array_equal(project(np.array([0.3, -0.2, 5.0]), Camera(1.0)), [0.3, -0.2])


def test_projection_affine():
    np.testing.assert_allclose(project(np.array([0.1, 0.1, 0.0]), Camera(2.0, (0.5, 0.5))), [0.7, 0.7])


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=3, max_size=3), st.floats(-100, 100))
def test_projection_z_invariance(p, dz):
    cam = Camera(1.7, (0.2, -0.1))
    p = np.array(p)
    q = p + [0.0, 0.0, dz]
    assert np.array_equal(project(p, cam), project(q, cam))
    assert torch.equal(project(torch.tensor(p), cam), project(torch.tensor(q), cam))


def test_camera_roundtrip_and_framing():
    cam = Camera(2.5, (0.1, -0.3))
    assert Camera.from_array(cam.as_array()) == cam
    b = Bounds(np.array([-1.0, 0.0, -1.0]), np.array([1.0, 2.0, 1.0]))
    f = Camera.framing(b)
    np.testing.assert_allclose(project(b.lo, f), [-1, -1])
    np.testing.assert_allclose(project(b.hi, f), [1, 1])


# ----------------------------------------------------------------- feature sampling

def texel_uv(ix, iy, w, h):
    return np.array([(2 * ix + 1) / w - 1, -((2 * iy + 1) / h - 1)])


def test_map_at_texel_center():
    data = torch.arange(2 * 4 * 6, dtype=torch.float64).reshape(2, 4, 6)
    fm = FeatureMap(data)
    for iy, ix in [(0, 0), (3, 5), (1, 2)]:
        torch.testing.assert_close(sample_map(fm, texel_uv(ix, iy, 6, 4)), data[:, iy, ix])


def test_constant_map():
    fm = FeatureMap(torch.full((3, 5, 5), 0.25, dtype=torch.float64))
    uv = np.random.default_rng(0).uniform(-1.5, 1.5, (50, 2))
    assert torch.all(sample_map(fm, uv) == 0.25)


def test_linear_ramp_map_is_exact_between_texels():
    w = 8
    centres = (2 * np.arange(w) + 1) / w - 1
    fm = FeatureMap(torch.tensor(np.broadcast_to(centres, (1, 4, w)).copy()))
    u = np.random.default_rng(1).uniform(centres[0], centres[-1], 40)
    uv = np.column_stack([u, np.zeros_like(u)])
    np.testing.assert_allclose(sample_map(fm, uv)[:, 0].numpy(), u, atol=1e-12)


def test_volume_at_voxel_center_and_constant():
    b = Bounds(np.array([-1.0, -0.5, 0.0]), np.array([1.0, 1.5, 2.0]))
    data = torch.randn(3, 4, 4, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    fv = FeatureVolume(data, b)
    centers = b.voxel_centers(4)
    for idx in [(0, 0, 0), (3, 1, 2), (1, 3, 0)]:
        torch.testing.assert_close(sample_volume(fv, centers[idx]), data[(slice(None),) + idx])
    const = FeatureVolume(torch.full((2, 4, 4, 4), -1.5, dtype=torch.float64), b)
    pts = b.uniform(30, np.random.default_rng(2))
    # trilinear weights sum to one up to rounding
    np.testing.assert_allclose(sample_volume(const, pts).numpy(), -1.5, atol=1e-14)


def test_linear_volume_field_is_exact_inside():
    b = Bounds(np.zeros(3), np.ones(3))
    centers = b.voxel_centers(8)
    fv = FeatureVolume(torch.tensor(centers[..., 2][None]), b)
    lo, hi = centers[0, 0, 0], centers[-1, -1, -1]
    pts = lo + np.random.default_rng(3).random((60, 3)) * (hi - lo)
    np.testing.assert_allclose(sample_volume(fv, pts)[:, 0].numpy(), pts[:, 2], atol=1e-12)


# ----------------------------------------------------------------- voxelization / point in mesh

def test_sphere_occupied_fraction():
    mesh = icosphere(4)
    vol = voxelize(mesh, Bounds(-np.ones(3), np.ones(3)), 64)
    assert abs(vol.data.mean() - math.pi / 6) < 0.01


def test_mesh_outside_bounds_is_empty():
    mesh = icosphere(2, radius=0.2, center=(5.0, 5.0, 5.0))
    vol = voxelize(mesh, Bounds(-np.ones(3), np.ones(3)), 16)
    assert vol.data.sum() == 0


def test_box_occupancy_matches_membership():
    b = Bounds(-np.ones(3), np.ones(3))
    lo, hi = np.array([-0.5, -0.37, -0.61]), np.array([0.5, 0.63, 0.39])
    vol = voxelize(box_mesh(lo, hi), b, 32)
    c = b.voxel_centers(32)
    truth = np.all((c > lo) & (c < hi), axis=-1)
    assert (vol.data.astype(bool) == truth).mean() >= 0.999


def test_non_watertight_mesh_is_rejected():
    mesh = icosphere(2)
    torn = TriMesh(mesh.vertices, mesh.faces[: len(mesh.faces) // 2])
    with pytest.raises(VoxelizationError):
        voxelize(torn, Bounds(-np.ones(3), np.ones(3)), 16)


def test_point_in_sphere_basics():
    mesh = icosphere(3)
    assert point_in_mesh(mesh, np.zeros(3)) == 1
    assert point_in_mesh(mesh, np.array([2.0, 0.0, 0.0])) == 0


def test_point_in_mesh_agreement():
    mesh = icosphere(4)
    pts = np.random.default_rng(4).uniform(-1.2, 1.2, (10_000, 3))
    truth = np.linalg.norm(pts, axis=1) < 1.0
    assert (point_in_mesh(mesh, pts).astype(bool) == truth).mean() >= 0.995


def test_point_on_face_is_deterministic():
    mesh = box_mesh(-np.ones(3), np.ones(3))
    p = np.array([1.0, 0.2, 0.3])
    assert point_in_mesh(mesh, p) == point_in_mesh(mesh, p)


# ----------------------------------------------------------------- training points

def test_uniform_only_samples():
    b = Bounds(-np.ones(3), np.ones(3))
    pts, labels = sample_training_points(icosphere(3), b, 500, near_fraction=0.0, rng=0)
    assert pts.shape == (500, 3) and labels.shape == (500,)
    assert np.all(pts >= b.lo) and np.all(pts <= b.hi)


def test_training_labels_match_sphere():
    b = Bounds(-1.5 * np.ones(3), 1.5 * np.ones(3))
    pts, labels = sample_training_points(icosphere(5), b, 1000, rng=5)
    r = np.linalg.norm(pts, axis=1)
    clear = np.abs(r - 1.0) > 2e-3   # the polyhedral sphere deviates from the analytic one by < 2e-3
    assert np.array_equal(labels[clear].astype(bool), r[clear] < 1.0)


def test_training_points_are_seeded():
    b = Bounds(-np.ones(3), np.ones(3))
    a = sample_training_points(icosphere(2), b, 200, rng=7)
    c = sample_training_points(icosphere(2), b, 200, rng=7)
    assert np.array_equal(a[0], c[0]) and np.array_equal(a[1], c[1])


def test_sampling_needs_points():
    with pytest.raises(SamplingError):
        sample_training_points(icosphere(1), Bounds(-np.ones(3), np.ones(3)), 0)


# ----------------------------------------------------------------- blending weights

def test_coincident_vertex_dominates():
    verts = np.array([[0.0, 0, 0], [1.0, 0, 0], [0, 1.0, 0], [0, 0, 1.0], [1.0, 1, 1]])
    idx, w = nearest_vertex_weights(np.zeros(3), verts, k=4, sigma=0.05)
    assert idx[0] == 0 and w[0] > 0.99


def test_equidistant_vertices_share_weight():
    verts = np.array([[1.0, 0, 0], [-1.0, 0, 0], [0, 1.0, 0], [0, -1.0, 0], [3.0, 3, 3]])
    idx, w = nearest_vertex_weights(np.zeros(3), verts, k=4)
    assert sorted(idx) == [0, 1, 2, 3]
    np.testing.assert_allclose(w, 0.25, atol=1e-15)


def test_five_vertex_fixture_matches_formula():
    p, verts = five_vertex_fixture()
    sigma = 0.05
    idx, w = nearest_vertex_weights(p, verts, k=4, sigma=sigma)
    d = np.linalg.norm(verts - p, axis=1)
    order = np.argsort(d)[:4]
    raw = np.exp(-d[order] / (2 * sigma ** 2))
    np.testing.assert_array_equal(idx, order)
    np.testing.assert_allclose(w, raw / raw.sum(), rtol=1e-12)


def test_weights_validate_arguments():
    with pytest.raises(ValueError):
        nearest_vertex_weights(np.zeros(3), np.zeros((2, 3)), k=4)
    with pytest.raises(ValueError):
        nearest_vertex_weights(np.zeros(3), np.zeros((5, 3)), sigma=0.0)


# ----------------------------------------------------------------- marching cubes

def test_sphere_iso_surface_radius():
    r, res = 0.6, 48
    lo, hi = -np.ones(3), np.ones(3)
    d = np.linalg.norm(grid_points(lo, hi, res), axis=-1)
    field = np.clip(0.5 - (d - r) / 0.1, 0.0, 1.0)
    mesh = marching_cubes(field, lo, hi)
    voxel_diag = math.sqrt(3) * 2.0 / (res - 1)
    assert np.abs(np.linalg.norm(mesh.vertices, axis=1) - r).max() < 1.5 * voxel_diag
    assert mesh.signed_volume() > 0


def test_zero_field_gives_empty_mesh():
    assert marching_cubes(np.zeros((8, 8, 8)), -np.ones(3), np.ones(3)).is_empty


def test_bounds_around_is_centered_cube():
    pts = np.array([[0.0, 0, 0], [1.0, 2.0, 0.5]])
    b = Bounds.around(pts, 1.2)
    np.testing.assert_allclose(b.extent, [2.4, 2.4, 2.4])
    np.testing.assert_allclose(0.5 * (b.lo + b.hi), [0.5, 1.0, 0.25])
    with pytest.raises(ValueError):
        Bounds(np.zeros(3), np.zeros(3))

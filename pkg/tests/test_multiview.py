import numpy as np
import pytest
import torch

from pamir.body import BodyParams, skin
from pamir.geometry import Bounds, Camera
from pamir.multiview import (CorrespondenceWarp, Frame, FrameSet, FusionError, MultiviewConfig, encode_frames,
                             finetune_multiview, fuse_and_decode, pool_embeddings, reconstruct_multi, warp_point)
from pamir.network import NetworkConfig, PamirNet, ShapeError
from pamir.pipeline import ReconstructionConfig, reconstruct


@pytest.fixture(scope="module")
def net():
    torch.manual_seed(0)
    return PamirNet(NetworkConfig()).eval()


def posed(model, seed, scale=0.2):
    rng = np.random.default_rng(seed)
    pose = np.vstack([np.zeros(3), rng.normal(0, scale, (model.n_joints - 1, 3))])
    return BodyParams.zeros(model).copy(pose=pose)


def frame_for(model, body, seed):
    img = np.random.default_rng(seed).random((3, 64, 64)).astype(np.float32)
    cam = Camera.framing(Bounds.around(skin(model, body).vertices, 1.2))
    return Frame(img, body, cam)


# ----------------------------------------------------------------- warp

def test_identical_bodies_give_identity(model, rng):
    b = posed(model, 3)
    p = rng.normal(0, 0.5, (500, 3))
    w = CorrespondenceWarp(model, b, b)
    assert w.identity
    assert np.array_equal(w(p), p)


def test_global_translation_becomes_a_translation(model, rng):
    b = posed(model, 4)
    d = np.array([0.3, -0.1, 0.25])
    t = b.copy(global_translation=b.global_translation + d)
    p = rng.normal(0, 0.5, (500, 3))
    assert np.allclose(warp_point(p, model, b, t), p + d, atol=1e-10)


def test_bent_elbow_carries_child_bone_points(bone_model):
    rest = BodyParams.zeros(bone_model)
    pose = np.zeros((3, 3))
    pose[1] = [0.0, 0.0, np.pi / 2]
    bent = rest.copy(pose=pose)
    # points on the upper segment surface, away from the split elbow ring
    v_rest = skin(bone_model, rest).vertices
    v_bent = skin(bone_model, bent).vertices
    upper = np.arange(12, 20)
    bary = np.random.default_rng(0).dirichlet(np.ones(3), size=50)
    tri = np.array([[12, 13, 17], [13, 14, 18], [16, 17, 12], [14, 15, 19], [15, 12, 16]])[np.arange(50) % 5]
    p = np.einsum("nk,nkj->nj", bary, v_rest[tri])
    expected = np.einsum("nk,nkj->nj", bary, v_bent[tri])
    got = warp_point(p, bone_model, rest, bent)
    voxel = (v_rest.max(0) - v_rest.min(0)).max() * 1.2 / 32
    assert np.linalg.norm(got - expected, axis=1).max() < voxel
    assert set(upper) >= set(tri.ravel())


def test_warp_handles_single_point(model):
    a, b = posed(model, 5), posed(model, 6)
    w = CorrespondenceWarp(model, a, b)
    p = np.array([0.0, 0.1, 0.0])
    assert np.allclose(w(p), w(p[None])[0])


# ----------------------------------------------------------------- pooling

def test_pool_single_frame_is_the_frame():
    e = torch.randn(1, 10, 7)
    assert torch.equal(pool_embeddings(e), e[0])


def test_pool_identical_frames_is_bitwise():
    e = torch.randn(10, 7)
    assert torch.equal(pool_embeddings(torch.stack([e, e, e])), e)


def test_pool_ignores_order_of_non_reference_frames():
    e = torch.randn(5, 30, 8)
    perm = torch.tensor([0, 3, 1, 4, 2])
    assert torch.equal(pool_embeddings(e), pool_embeddings(e[perm]))


def test_pool_is_the_mean():
    e = torch.randn(4, 30, 8, dtype=torch.float64)
    assert torch.allclose(pool_embeddings(e), e.mean(0), atol=1e-12)


# ----------------------------------------------------------------- fusion

def test_single_frame_matches_single_view_reconstruction(model, net):
    f = frame_for(model, posed(model, 7), 1)
    cfg = ReconstructionConfig(grid_resolution=32, coarse_resolution=8, run_body_optimization=False)
    multi = reconstruct_multi(FrameSet([f]), model, net, cfg)
    single = reconstruct(f.image, f.body, model, net, f.camera, cfg).mesh
    assert np.array_equal(multi.vertices, single.vertices)
    assert np.array_equal(multi.faces, single.faces)


def test_duplicate_frames_match_single_frame(model, net, rng):
    f = frame_for(model, posed(model, 8), 2)
    p = rng.normal(0, 0.3, (300, 3))
    one = fuse_and_decode(net, encode_frames(net, FrameSet([f]), model), p)
    three = fuse_and_decode(net, encode_frames(net, FrameSet([f, f, f]), model), p)
    assert torch.equal(one, three)


def test_frame_order_after_reference_does_not_matter(model, net, rng):
    frames = [frame_for(model, posed(model, 10 + i), 20 + i) for i in range(4)]
    p = rng.normal(0, 0.3, (300, 3))
    a = fuse_and_decode(net, encode_frames(net, FrameSet(frames), model), p)
    b = fuse_and_decode(net, encode_frames(net, FrameSet([frames[0], frames[3], frames[1], frames[2]]), model), p)
    assert torch.equal(a, b)


def test_reference_index_selects_first_frame(model):
    frames = [frame_for(model, posed(model, 30 + i), i) for i in range(3)]
    fs = FrameSet(frames, reference_index=2)
    assert fs.ordered()[0] is frames[2]
    assert fs.ordered()[1:] == [frames[0], frames[1]]


def test_frame_set_errors():
    with pytest.raises(FusionError):
        FrameSet([])
    with pytest.raises(FusionError):
        FrameSet([object()], reference_index=1)


def test_fuse_without_frames_fails(net):
    with pytest.raises(FusionError):
        fuse_and_decode(net, [], np.zeros((1, 3)))


# ----------------------------------------------------------------- fine-tuning

def test_multiview_defaults():
    cfg = MultiviewConfig()
    assert cfg.learning_rate == 2e-5 and cfg.batch_size == 1 and cfg.n_views == 3


@pytest.mark.parametrize("kw", [{"n_views": 0}, {"batch_size": 0}, {"gt_mix_per_batch": 2}])
def test_multiview_config_rejects(kw):
    with pytest.raises(ValueError):
        MultiviewConfig(**kw)


def test_finetune_rejects_texture_heads(model):
    with pytest.raises(ShapeError):
        finetune_multiview(PamirNet(NetworkConfig.desk(4)), [None], model)


def test_finetune_updates_decoder(model):
    from pamir.synthetic import generate_dataset
    from pamir.training import TrainConfig, prepare_views

    ds = generate_dataset(1, 3, seed=11, model=model)
    views = prepare_views(ds, model, 32, TrainConfig(pool_size=1000, points_per_subject=200))
    torch.manual_seed(0)
    net = PamirNet(NetworkConfig())
    before = [p.detach().clone() for p in net.decoder.parameters()]
    cfg = MultiviewConfig(iterations=3, points_per_subject=200, learning_rate=1e-3)
    res = finetune_multiview(net, views, model, cfg, log_every=0)
    assert len(res.trace) == 3
    assert all(np.isfinite(r["geometry_loss"]) for r in res.trace)
    assert any(not torch.equal(a, b) for a, b in zip(before, net.decoder.parameters()))

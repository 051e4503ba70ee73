import numpy as np
import pytest
import torch

from gradutil import directional_errors
from pamir.geometry import Bounds, Camera, FeatureMap, FeatureVolume, OccupancyVolume
from pamir.network import (CheckpointError, NetworkConfig, PamirNet, ShapeError, condition, decode, decode_split,
                           encode_image, encode_volume, load_checkpoint, save_checkpoint)


@pytest.fixture(scope="module")
def net():
    return PamirNet(NetworkConfig())


def image(seed=0, size=64):
    return np.random.default_rng(seed).random((3, size, size)).astype(np.float32)


def volume(seed=0, r=32):
    data = (np.random.default_rng(seed).random((r, r, r)) > 0.5).astype(np.uint8)
    return OccupancyVolume(data, Bounds(-np.ones(3), np.ones(3)))


# ----------------------------------------------------------------- shapes and configs

def test_desk_image_features(net):
    fm = encode_image(net, image())
    assert tuple(fm.data.shape) == (64, 16, 16)


def test_full_scale_config_dimensions():
    cfg = NetworkConfig.full_scale()
    assert cfg.image_feat_channels == 256 and cfg.image_feat_resolution == 128
    assert (cfg.volume_feat_channels, cfg.volume_feat_resolution) == (32, 32)
    assert cfg.decoder_widths[0] == 288 == cfg.image_feat_channels + cfg.volume_feat_channels
    assert cfg.decoder_widths[:2] == [288, 1024]


def test_full_scale_encoder_output_shape():
    cfg = NetworkConfig.full_scale()
    net = PamirNet(cfg)
    with torch.no_grad():
        fmap = net.encode_images(torch.zeros(1, 3, 512, 512))
        fvol = net.encode_volumes(torch.zeros(1, 1, 128, 128, 128))
    assert tuple(fmap.shape) == (1, 256, 128, 128)
    assert tuple(fvol.shape) == (1, 32, 32, 32, 32)


def test_desk_volume_features(net):
    fv = encode_volume(net, volume())
    assert tuple(fv.data.shape) == (16, 8, 8, 8)


def test_identical_images_identical_maps(net):
    assert torch.equal(encode_image(net, image(3)).data, encode_image(net, image(3)).data)


def test_zero_volume_without_bias_gives_zero_features():
    net = PamirNet(NetworkConfig(normalization="none"))
    fv = encode_volume(net, OccupancyVolume(np.zeros((32,) * 3, np.uint8), Bounds(-np.ones(3), np.ones(3))))
    assert torch.count_nonzero(fv.data) == 0


@pytest.mark.parametrize("kw", [dict(decoder_widths=[81, 8, 1]), dict(embedding_split=0),
                                dict(normalization="batch"), dict(image_feat_resolution=12),
                                dict(decoder_out_channels=4)])
def test_invalid_configs(kw):
    with pytest.raises(CheckpointError):
        NetworkConfig(**kw)


def test_shape_errors(net):
    with pytest.raises(ShapeError):
        encode_image(net, np.zeros((3, 32, 32), np.float32))
    with pytest.raises(ShapeError):
        encode_volume(net, volume(r=16))


# ----------------------------------------------------------------- condition and decode

def test_condition_depth_behaviour(net):
    fm, fv = encode_image(net, image()), encode_volume(net, volume())
    cam = Camera(1.0)
    p = torch.tensor([[0.1, 0.2, -0.3]])
    a = condition(fm, fv, p, cam)
    b = condition(fm, fv, p + torch.tensor([0.0, 0.0, 0.5]), cam)
    assert a.shape == (1, 80)
    assert torch.equal(a[:, :64], b[:, :64])
    assert not torch.equal(a[:, 64:], b[:, 64:])


def test_constant_features_give_constant_condition():
    fm = FeatureMap(torch.full((4, 8, 8), 0.5, dtype=torch.float64))
    fv = FeatureVolume(torch.full((2, 4, 4, 4), -2.0, dtype=torch.float64), Bounds(-np.ones(3), np.ones(3)))
    c = condition(fm, fv, np.random.default_rng(0).uniform(-2, 2, (20, 3)), Camera(0.7))
    np.testing.assert_allclose(c.numpy(), np.tile([0.5] * 4 + [-2.0] * 2, (20, 1)), atol=1e-14)


def test_zero_decoder_outputs_one_half():
    net = PamirNet(NetworkConfig())
    with torch.no_grad():
        for p in net.decoder.parameters():
            p.zero_()
    out = decode(net, torch.randn(7, 80))
    assert torch.all(out == 0.5) and out.shape == (7, 1)


def test_decode_is_reproducible():
    a, b = PamirNet(NetworkConfig(seed=3)), PamirNet(NetworkConfig(seed=3))
    c = torch.randn(11, 80, generator=torch.Generator().manual_seed(1))
    assert torch.equal(decode(a, c), decode(b, c))
    assert torch.equal(decode(a, c), decode(a, c))


def test_split_composition_is_exact(net):
    c = torch.randn(9, 80, generator=torch.Generator().manual_seed(2))
    e, out = decode_split(net, c)
    assert torch.equal(out, decode(net, c))
    assert torch.equal(net.decoder.head(e), out)


def test_embedding_length_at_penultimate_split():
    cfg = NetworkConfig(embedding_split=4)
    e, _ = decode_split(PamirNet(cfg), torch.zeros(2, 80))
    assert e.shape[-1] == cfg.decoder_widths[-2]


def test_mean_of_one_embedding(net):
    e, _ = decode_split(net, torch.randn(5, 80))
    assert torch.equal(e[None].mean(0), e)


def test_outputs_are_probabilities(net):
    out = net(torch.rand(2, 3, 64, 64), torch.rand(2, 1, 32, 32, 32), torch.tensor([[[-1.0] * 3, [1.0] * 3]] * 2),
              torch.tensor([[1.0, 0.0, 0.0]] * 2), torch.rand(2, 50, 3) * 2 - 1)
    assert out.shape == (2, 50, 1) and torch.all((out > 0) & (out < 1))


def test_decoder_skips_need_condition():
    net = PamirNet(NetworkConfig(decoder_skips=True))
    e = net.decoder.embed(torch.zeros(1, 80))
    with pytest.raises(ValueError):
        net.decoder.head(e)


# ----------------------------------------------------------------- gradients

def test_decode_condition_gradients():
    torch.manual_seed(0)
    net = PamirNet(NetworkConfig()).double()
    img = torch.as_tensor(image(5), dtype=torch.float64)[None]
    vol = torch.as_tensor(volume(5).data, dtype=torch.float64)[None, None]
    bounds = torch.tensor([[[-1.0] * 3, [1.0] * 3]], dtype=torch.float64)
    cams = torch.tensor([[0.9, 0.05, -0.02]], dtype=torch.float64)
    pts = (torch.rand(1, 16, 3, dtype=torch.float64) * 1.6 - 0.8).requires_grad_(True)
    weights = torch.rand(16, dtype=torch.float64)

    def f():
        return (net(img, vol, bounds, cams, pts)[..., 0] * weights).sum()

    groups = {"image_encoder": list(net.image_encoder.parameters()),
              "volume_encoder": list(net.volume_encoder.parameters()),
              "decoder": list(net.decoder.parameters()), "points": [pts]}
    # the network is piecewise linear (leaky ReLU, bilinear sampling); a 1e-5 step keeps
    # central differences from straddling activation kinks, which a 1e-4 step often does
    for name, params in groups.items():
        errs = directional_errors(f, params, n_probes=10, h=1e-5)
        assert max(errs) < 1e-4, (name, errs)


# ----------------------------------------------------------------- checkpoints

def test_checkpoint_roundtrip(tmp_path, net):
    save_checkpoint(net, tmp_path / "c.tc", {"note": "x"})
    loaded = load_checkpoint(tmp_path / "c.tc")
    c = torch.randn(3, 80)
    assert torch.equal(decode(loaded, c), decode(net, c))
    assert loaded.cfg == net.cfg


def test_checkpoint_kind_is_checked(tmp_path):
    from pamir.tensorio import save_tensors

    save_tensors(tmp_path / "x.tc", {"a": np.zeros(2)}, meta={"kind": "other"})
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "x.tc")

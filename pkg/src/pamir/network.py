"""Image encoder, volume encoder, condition vector and the occupancy / RGB-alpha decoder.

The decoder is split as ``F = F2 o F1``: ``embed`` runs the first ``embedding_split``
layers and ``head`` the rest, and ``decode`` is literally ``head(embed(c))`` so the two
paths agree bitwise.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .geometry import (Bounds, Camera, FeatureMap, FeatureVolume, OccupancyVolume, project_batched,
                       sample_map_batched, sample_volume_batched, voxelize)
from .tensorio import load_tensors, save_tensors


class ShapeError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class NetworkConfig:
    image_size: int = 64
    image_feat_channels: int = 64
    image_feat_resolution: int = 16
    volume_in_resolution: int = 32
    volume_feat_channels: int = 16
    volume_feat_resolution: int = 8
    decoder_widths: list = field(default_factory=lambda: [80, 256, 128, 64, 32, 1])
    decoder_out_channels: int = 1
    embedding_split: int = 4
    normalization: str = "group"
    decoder_skips: bool = False
    chunk_size: int = 8192
    seed: int = 0

    def __post_init__(self):
        self.decoder_widths = [int(w) for w in self.decoder_widths]
        self.validate()

    def validate(self):
        w = self.decoder_widths
        if w[0] != self.image_feat_channels + self.volume_feat_channels:
            raise CheckpointError(f"decoder_widths[0] = {w[0]} must equal C_i + C_v = "
                                  f"{self.image_feat_channels + self.volume_feat_channels}")
        if self.decoder_out_channels not in (1, 4) or w[-1] != self.decoder_out_channels:
            raise CheckpointError("decoder output width must be 1 (geometry) or 4 (texture)")
        if not 1 <= self.embedding_split <= len(w) - 2:
            raise CheckpointError("embedding_split must leave at least one layer on each side")
        if self.normalization not in ("group", "none"):
            raise CheckpointError("normalization must be 'group' or 'none'")
        for size, res, what in ((self.image_size, self.image_feat_resolution, "image"),
                                (self.volume_in_resolution, self.volume_feat_resolution, "volume")):
            ratio = size // res
            if res * ratio != size or ratio & (ratio - 1):
                raise CheckpointError(f"{what} resolution ratio must be a power of two")
        if self.volume_in_resolution // self.volume_feat_resolution != 4:
            raise CheckpointError("the volume encoder downsamples by exactly 4 (two stride-2 convs)")

    @classmethod
    def full_scale(cls, out_channels: int = 1) -> "NetworkConfig":
        return cls(image_size=512, image_feat_channels=256, image_feat_resolution=128,
                   volume_in_resolution=128, volume_feat_channels=32, volume_feat_resolution=32,
                   decoder_widths=[288, 1024, 512, 256, 128, out_channels],
                   decoder_out_channels=out_channels)

    @classmethod
    def desk(cls, out_channels: int = 1, **kw) -> "NetworkConfig":
        return cls(decoder_widths=[80, 256, 128, 64, 32, out_channels], decoder_out_channels=out_channels, **kw)

    def to_dict(self) -> dict:
        return asdict(self)


def _norm(kind: str, channels: int) -> nn.Module:
    if kind == "group":
        return nn.GroupNorm(min(8, channels), channels)
    return nn.Identity()


class ConvBlock2d(nn.Sequential):
    def __init__(self, cin, cout, stride, norm):
        super().__init__(nn.Conv2d(cin, cout, 3, stride, 1), _norm(norm, cout), nn.LeakyReLU(0.01))


class ImageEncoder(nn.Module):
    """Four conv blocks; the leading ones use stride 2 until the target resolution is reached."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        n_down = int(math.log2(cfg.image_size // cfg.image_feat_resolution))
        c = cfg.image_feat_channels
        widths = [max(c // 2, 16), c, c, c]
        blocks, cin = [], 3
        for i, w in enumerate(widths):
            blocks.append(ConvBlock2d(cin, w, 2 if i < n_down else 1, cfg.normalization))
            cin = w
        for _ in range(max(0, n_down - len(widths))):
            blocks.append(ConvBlock2d(cin, c, 2, cfg.normalization))
        self.blocks = nn.Sequential(*blocks)

    def forward(self, x):
        return self.blocks(x)


class ResBlock3d(nn.Module):
    def __init__(self, c, norm):
        super().__init__()
        self.conv1 = nn.Conv3d(c, c, 3, 1, 1)
        self.norm1 = _norm(norm, c)
        self.conv2 = nn.Conv3d(c, c, 3, 1, 1)
        self.norm2 = _norm(norm, c)

    def forward(self, x):
        h = F.leaky_relu(self.norm1(self.conv1(x)), 0.01)
        h = self.norm2(self.conv2(h))
        return F.leaky_relu(x + h, 0.01)


class VolumeEncoder(nn.Module):
    """Two stride-2 3D convolutions followed by three residual blocks."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        c = cfg.volume_feat_channels
        self.conv1 = nn.Conv3d(1, max(c // 2, 8), 3, 2, 1)
        self.norm1 = _norm(cfg.normalization, max(c // 2, 8))
        self.conv2 = nn.Conv3d(max(c // 2, 8), c, 3, 2, 1)
        self.norm2 = _norm(cfg.normalization, c)
        self.res = nn.Sequential(*[ResBlock3d(c, cfg.normalization) for _ in range(3)])

    def forward(self, v):
        h = F.leaky_relu(self.norm1(self.conv1(v)), 0.01)
        h = F.leaky_relu(self.norm2(self.conv2(h)), 0.01)
        return self.res(h)


class Decoder(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        w = cfg.decoder_widths
        self.split = cfg.embedding_split
        self.skips = cfg.decoder_skips
        layers = []
        for i in range(len(w) - 1):
            extra = w[0] if (self.skips and 0 < i < len(w) - 2) else 0
            layers.append(nn.Linear(w[i] + extra, w[i + 1]))
        self.layers = nn.ModuleList(layers)

    def _run(self, h, c, start, stop):
        last = len(self.layers) - 1
        for i in range(start, stop):
            x = torch.cat([h, c], dim=-1) if (self.skips and 0 < i < last) else h
            h = self.layers[i](x)
            h = torch.sigmoid(h) if i == last else F.leaky_relu(h, 0.01)
        return h

    def embed(self, c):
        return self._run(c, c, 0, self.split)

    def head(self, e, c=None):
        if self.skips and c is None:
            raise ValueError("decoder skips need the condition vector in the head")
        return self._run(e, c, self.split, len(self.layers))

    def forward(self, c):
        return self.head(self.embed(c), c)


class PamirNet(nn.Module):
    def __init__(self, cfg: NetworkConfig | None = None):
        super().__init__()
        self.cfg = cfg or NetworkConfig()
        self.image_encoder = ImageEncoder(self.cfg)
        self.volume_encoder = VolumeEncoder(self.cfg)
        self.decoder = Decoder(self.cfg)
        self.reset_parameters(self.cfg.seed)

    def reset_parameters(self, seed: int) -> None:
        """Fan-in scaled uniform weights (He bound for leaky units), zero biases, seeded."""
        gen = torch.Generator().manual_seed(int(seed))
        for name, p in sorted(self.named_parameters()):
            with torch.no_grad():
                if name.endswith("bias"):
                    p.zero_()
                elif p.ndim == 1:
                    p.fill_(1.0)            # group-norm gains
                else:
                    fan_in = p[0].numel()
                    bound = math.sqrt(6.0 / ((1 + 0.01 ** 2) * fan_in))
                    p.copy_(torch.rand(p.shape, generator=gen, dtype=p.dtype) * 2 * bound - bound)

    @property
    def dtype(self):
        return next(self.parameters()).dtype

    def _check_image(self, images):
        s = self.cfg.image_size
        if images.ndim != 4 or images.shape[1:] != (3, s, s):
            raise ShapeError(f"expected images [B, 3, {s}, {s}], got {list(images.shape)}")

    def _check_volume(self, vols):
        r = self.cfg.volume_in_resolution
        if vols.ndim != 5 or vols.shape[1:] != (1, r, r, r):
            raise ShapeError(f"expected volumes [B, 1, {r}, {r}, {r}], got {list(vols.shape)}")

    def encode_images(self, images: torch.Tensor) -> torch.Tensor:
        self._check_image(images)
        return self.image_encoder(images)

    def encode_volumes(self, vols: torch.Tensor) -> torch.Tensor:
        self._check_volume(vols)
        return self.volume_encoder(vols)

    def condition(self, fmaps, fvols, bounds, cams, points, image_only: bool = False) -> torch.Tensor:
        """Batched condition vectors ``[B, N, C_i + C_v]``: image features first."""
        uv = project_batched(points, cams)
        fi = sample_map_batched(fmaps, uv)
        fv = sample_volume_batched(fvols, points, bounds)
        if image_only:
            fv = torch.zeros_like(fv)
        return torch.cat([fi, fv], dim=-1)

    def query(self, fmaps, fvols, bounds, cams, points) -> torch.Tensor:
        return self.decoder(self.condition(fmaps, fvols, bounds, cams, points))

    def forward(self, images, vols, bounds, cams, points):
        return self.query(self.encode_images(images), self.encode_volumes(vols), bounds, cams, points)


# ------------------------------------------------------------------ functional API

def _as_tensor(x, dtype):
    return torch.as_tensor(np.asarray(x) if not isinstance(x, torch.Tensor) else x, dtype=dtype)


def encode_image(net: PamirNet, image) -> FeatureMap:
    img = _as_tensor(image, net.dtype)
    if img.ndim != 3:
        raise ShapeError(f"expected an image [3, H, W], got {list(img.shape)}")
    return FeatureMap(net.encode_images(img[None])[0])


def volume_tensor(vol: OccupancyVolume, dtype=torch.float32) -> torch.Tensor:
    return torch.as_tensor(vol.data.astype(np.float32), dtype=dtype)[None]


def encode_volume(net: PamirNet, vol: OccupancyVolume) -> FeatureVolume:
    if vol.resolution != net.cfg.volume_in_resolution:
        raise ShapeError(f"volume resolution {vol.resolution} != configured {net.cfg.volume_in_resolution}")
    return FeatureVolume(net.encode_volumes(volume_tensor(vol, net.dtype)[None])[0], vol.bounds)


def condition(fmap: FeatureMap, fvol: FeatureVolume, p, camera: Camera) -> torch.Tensor:
    """C(p) = (image feature at the projection of p, volume feature at p); [N, C] or [C]."""
    dtype = fmap.data.dtype
    pts = _as_tensor(p, dtype)
    single = pts.ndim == 1
    pts = pts.reshape(1, -1, 3)
    cams = torch.as_tensor(camera.as_array(), dtype=dtype)[None]
    bounds = torch.as_tensor(fvol.bounds.as_array(), dtype=dtype)[None]
    uv = project_batched(pts, cams)
    c = torch.cat([sample_map_batched(fmap.data[None], uv),
                   sample_volume_batched(fvol.data[None], pts, bounds)], dim=-1)[0]
    return c[0] if single else c


def decode(net: PamirNet, c: torch.Tensor) -> torch.Tensor:
    return net.decoder(c)


def decode_split(net: PamirNet, c: torch.Tensor):
    """Return ``(embedding, output)`` with ``output = F2(embedding)``."""
    e = net.decoder.embed(c)
    return e, net.decoder.head(e, c)


def body_volume(model, body, resolution: int, margin: float = 1.2):
    """Voxelized skinned body in a cube around it (the volume-branch input)."""
    from .body import skin

    mesh = skin(model, body)
    bounds = Bounds.around(mesh.vertices, margin)
    return voxelize(mesh, bounds, resolution), mesh


class FieldEvaluator:
    """Occupancy (or RGB-alpha) evaluation for one image and one body, chunked over points."""

    def __init__(self, net: PamirNet, image, camera: Camera, volume: OccupancyVolume, fmap=None):
        self.net = net
        self.camera = camera
        with torch.no_grad():
            self.fmap = encode_image(net, image) if fmap is None else fmap
            self.fvol = encode_volume(net, volume)

    def __call__(self, points, grad: bool = False) -> torch.Tensor:
        pts = _as_tensor(points, self.net.dtype).reshape(-1, 3)
        chunk = self.net.cfg.chunk_size
        outs = []
        ctx = torch.enable_grad() if grad else torch.no_grad()
        with ctx:
            for i in range(0, len(pts), chunk):
                outs.append(decode(self.net, condition(self.fmap, self.fvol, pts[i:i + chunk], self.camera)))
        if not outs:
            return torch.zeros((0, self.net.cfg.decoder_out_channels), dtype=self.net.dtype)
        return torch.cat(outs)


def occupancy_field(image, body, model, points, net: PamirNet, camera: Camera) -> np.ndarray:
    """End to end: skin, voxelize, encode both branches, condition and decode every point."""
    vol, _ = body_volume(model, body, net.cfg.volume_in_resolution)
    ev = FieldEvaluator(net, image, camera, vol)
    return ev(points)[:, 0].double().numpy()


# ------------------------------------------------------------------ checkpoints

def save_checkpoint(net: PamirNet, path, extra: dict | None = None) -> None:
    arrays = {k: v.detach().cpu().numpy() for k, v in net.state_dict().items()}
    save_tensors(path, arrays, meta={"kind": "pamir_checkpoint", "version": 1,
                                     "config": net.cfg.to_dict(), "extra": extra or {}})


def load_checkpoint(path, dtype=torch.float32) -> PamirNet:
    arrays, meta = load_tensors(path)
    if meta.get("kind") != "pamir_checkpoint":
        raise CheckpointError(f"{path}: not a network checkpoint")
    cfg = NetworkConfig(**meta["config"])
    net = PamirNet(cfg)
    state = net.state_dict()
    missing = set(state) - set(arrays)
    if missing:
        raise CheckpointError(f"{path}: missing parameters {sorted(missing)}")
    net.load_state_dict({k: torch.from_numpy(np.array(arrays[k])) for k in state})
    return net.to(dtype)

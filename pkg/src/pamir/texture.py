"""RGB-alpha surface colour: the texture network predicts a colour and a visibility
weight that blends it with the colour observed in the input image at the projection.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .geometry import Camera, FeatureMap, FeatureVolume, project_batched, sample_map_batched
from .mesh import TriMesh
from .network import PamirNet, ShapeError, condition, decode


class HeadMismatchError(ValueError):
    pass


@dataclass
class ColorSample:
    blended: np.ndarray     # C
    raw: np.ndarray         # C'
    alpha: np.ndarray       # alpha
    observed: np.ndarray    # image sample at the projection

    def check_identity(self) -> float:
        """Largest deviation from ``blended = alpha * observed + (1 - alpha) * raw``."""
        a = np.asarray(self.alpha)[..., None]
        return float(np.abs(self.blended - (a * self.observed + (1 - a) * self.raw)).max(initial=0.0))


def _require_texture_head(net: PamirNet):
    if net.cfg.decoder_out_channels != 4:
        raise HeadMismatchError("colour queries need a texture checkpoint (4 output channels), "
                                f"got {net.cfg.decoder_out_channels}")


def blend(alpha, observed, raw):
    return alpha * observed + (1 - alpha) * raw


def blended_colors(net: PamirNet, fmaps, fvols, bounds, cams, images, points):
    """Batched ``(blended, raw, alpha)`` for points ``[B, N, 3]``."""
    _require_texture_head(net)
    out = net.query(fmaps, fvols, bounds, cams, points)
    raw, alpha = out[..., :3], out[..., 3:4]
    observed = sample_map_batched(images, project_batched(points, cams))
    return blend(alpha, observed, raw), raw, alpha[..., 0]


def color_at(p, image, fmap: FeatureMap, fvol: FeatureVolume, camera: Camera, net: PamirNet) -> ColorSample:
    """Colour samples at ``p`` ([3] or [N, 3])."""
    _require_texture_head(net)
    img = torch.as_tensor(np.asarray(image), dtype=net.dtype)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ShapeError("image must be [3, H, W]")
    pts = torch.as_tensor(np.asarray(p, dtype=np.float64), dtype=net.dtype)
    single = pts.ndim == 1
    pts = pts.reshape(-1, 3)
    chunk = net.cfg.chunk_size
    outs, obs = [], []
    cams = torch.as_tensor(camera.as_array(), dtype=net.dtype)[None]
    with torch.no_grad():
        for i in range(0, len(pts), chunk):
            q = pts[i:i + chunk]
            outs.append(decode(net, condition(fmap, fvol, q, camera)))
            obs.append(sample_map_batched(img[None], project_batched(q[None], cams))[0])
    out = torch.cat(outs) if outs else torch.zeros((0, 4), dtype=net.dtype)
    observed = torch.cat(obs) if obs else torch.zeros((0, 3), dtype=net.dtype)
    raw, alpha, observed = out[:, :3].double().numpy(), out[:, 3].double().numpy(), observed.double().numpy()
    # blended from the stored float64 fields, so the identity re-checks exactly
    sample = ColorSample(blend(alpha[:, None], observed, raw), raw, alpha, observed)
    if single:
        return ColorSample(sample.blended[0], sample.raw[0], sample.alpha[0], sample.observed[0])
    return sample


def colorize_mesh(mesh: TriMesh, image, body, model, net: PamirNet, camera: Camera) -> TriMesh:
    """Per-vertex blended colours (clamped to [0, 1]) from a texture network."""
    from .network import body_volume, encode_image, encode_volume

    _require_texture_head(net)
    if mesh.is_empty:
        return TriMesh(mesh.vertices.copy(), mesh.faces.copy(), np.zeros((0, 3)), dict(mesh.meta))
    vol, _ = body_volume(model, body, net.cfg.volume_in_resolution)
    with torch.no_grad():
        fmap = encode_image(net, image)
        fvol = encode_volume(net, vol)
    cs = color_at(mesh.vertices, image, fmap, fvol, camera, net)
    return TriMesh(mesh.vertices.copy(), mesh.faces.copy(), np.clip(cs.blended, 0.0, 1.0), dict(mesh.meta))

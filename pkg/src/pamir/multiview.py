"""Fusion of several uncalibrated images of one person.

Each frame has its own body fit. A query point in the reference frame is carried into
frame ``t`` by blending, over its nearest reference-body vertices, the vertex
transforms that map the reference pose onto frame ``t``'s pose. The per-frame
embeddings are mean-pooled and decoded once.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .body import BodyModel, BodyParams, TorchBody, check_params
from .geometry import Camera, FeatureMap, FeatureVolume, nearest_vertex_weights
from .network import PamirNet, ShapeError, body_volume, encode_image, encode_volume

log = logging.getLogger(__name__)


class FusionError(ValueError):
    pass


@dataclass
class Frame:
    image: np.ndarray            # [3, H, W]
    body: BodyParams
    camera: Camera


@dataclass
class FrameSet:
    frames: list
    reference_index: int = 0

    def __post_init__(self):
        if not self.frames:
            raise FusionError("a frame set needs at least one frame")
        if not 0 <= self.reference_index < len(self.frames):
            raise FusionError(f"reference index {self.reference_index} outside [0, {len(self.frames)})")

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    @property
    def reference(self) -> Frame:
        return self.frames[self.reference_index]

    def ordered(self) -> list:
        """Reference frame first, then the others in their given order."""
        r = self.reference_index
        return [self.frames[r]] + [f for i, f in enumerate(self.frames) if i != r]


def full_lbs_matrices(model: BodyModel, params: BodyParams) -> torch.Tensor:
    """Per-vertex 4x4 maps from the rest template to world, global scale and translation included."""
    check_params(model, params)
    tb = TorchBody(model)
    m = tb.lbs_matrices(params.shape, params.pose).clone()
    s = float(params.global_scale)
    m[:, :3, :] *= s
    m[:, :3, 3] += torch.as_tensor(params.global_translation, dtype=m.dtype)
    return m


def _same_body(a: BodyParams, b: BodyParams) -> bool:
    return (np.array_equal(a.shape, b.shape) and np.array_equal(a.pose, b.pose)
            and np.array_equal(a.global_translation, b.global_translation)
            and a.global_scale == b.global_scale)


class CorrespondenceWarp:
    """Maps reference-frame points into one target frame.

    ``matrices[j] = M_j(target) @ inv(M_j(reference))`` per body vertex; a point uses
    the blend of its k nearest reference vertices with the same weights as the depth
    shift. Identical bodies give the exact identity map.
    """

    def __init__(self, model: BodyModel, reference: BodyParams, target: BodyParams, target_frame: int = 0,
                 k: int = 4, sigma: float = 0.05, squared: bool = False):
        self.k, self.sigma, self.squared = k, sigma, squared
        self.target_frame = target_frame
        self.identity = _same_body(reference, target)
        m_ref = full_lbs_matrices(model, reference)
        self.reference_vertices = TorchBody(model).params_vertices(reference).numpy()
        if self.identity:
            self.matrices = np.broadcast_to(np.eye(4), (model.n_vertices, 4, 4)).copy()
            return
        m_t = full_lbs_matrices(model, target)
        det = torch.linalg.det(m_ref[:, :3, :3])
        if not bool((det.abs() > 1e-9).all()):
            raise FusionError("singular skinning matrix in the reference frame")
        self.matrices = (m_t @ torch.linalg.inv(m_ref)).numpy()

    def blended(self, points) -> np.ndarray:
        """Per-point blended 4x4 transforms ``[N, 4, 4]``."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        idx, w = nearest_vertex_weights(pts, self.reference_vertices, self.k, self.sigma, self.squared)
        return np.einsum("nk,nkij->nij", w, self.matrices[idx])

    def __call__(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        if self.identity:
            return pts.copy()
        single = pts.ndim == 1
        p = pts.reshape(-1, 3)
        m = self.blended(p)
        out = np.einsum("nij,nj->ni", m[:, :3, :3], p) + m[:, :3, 3]
        return out[0] if single else out


def warp_point(p, model: BodyModel, reference: BodyParams, target: BodyParams, k: int = 4,
               sigma: float = 0.05) -> np.ndarray:
    return CorrespondenceWarp(model, reference, target, k=k, sigma=sigma)(p)


# ------------------------------------------------------------------ fusion

def pool_embeddings(e: torch.Tensor) -> torch.Tensor:
    """Mean over the leading frame axis, anchored on frame 0.

    ``e0 + sum(sorted(e_t - e0)) / N`` is the arithmetic mean, but its value does not
    depend on the order of frames 1..N-1 and it returns ``e0`` bit for bit when all
    frames agree.
    """
    if e.shape[0] == 1:
        return e[0]
    delta = e - e[:1]
    delta, _ = torch.sort(delta, dim=0)
    return e[0] + delta.sum(0) / e.shape[0]


@dataclass
class EncodedFrame:
    fmap: FeatureMap
    fvol: FeatureVolume
    camera: Camera
    warp: CorrespondenceWarp


def encode_frames(net: PamirNet, frames: FrameSet, model: BodyModel, k: int = 4,
                  sigma: float = 0.05) -> list:
    """Encode every frame (reference first) and build its warp from the reference body."""
    ref = frames.reference.body
    out = []
    with torch.no_grad():
        for t, f in enumerate(frames.ordered()):
            vol, _ = body_volume(model, f.body, net.cfg.volume_in_resolution)
            out.append(EncodedFrame(encode_image(net, f.image), encode_volume(net, vol), f.camera,
                                    CorrespondenceWarp(model, ref, f.body, t, k, sigma)))
    return out


def fuse_and_decode(net: PamirNet, encoded: list, points) -> torch.Tensor:
    """Fused outputs ``[N, C_out]`` for reference-frame points ``[N, 3]``."""
    from .network import condition

    if not encoded:
        raise FusionError("no frames to fuse")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    chunk = net.cfg.chunk_size
    outs = []
    with torch.no_grad():
        for i in range(0, len(pts), chunk):
            p = pts[i:i + chunk]
            conds = [condition(f.fmap, f.fvol, f.warp(p), f.camera) for f in encoded]
            emb = torch.stack([net.decoder.embed(c) for c in conds])
            pooled = pool_embeddings(emb)
            c_skip = pool_embeddings(torch.stack(conds)) if net.cfg.decoder_skips else None
            outs.append(net.decoder.head(pooled, c_skip))
    if not outs:
        return torch.zeros((0, net.cfg.decoder_out_channels), dtype=net.dtype)
    return torch.cat(outs)


def fused_field(net: PamirNet, frames: FrameSet, model: BodyModel, k: int = 4, sigma: float = 0.05):
    encoded = encode_frames(net, frames, model, k, sigma)

    def f(points):
        return fuse_and_decode(net, encoded, points)[:, 0].double().numpy()

    return f


def reconstruct_multi(frames: FrameSet, model: BodyModel, net: PamirNet, config=None):
    """Fused occupancy on the reference body's grid, hierarchical querying, marching cubes."""
    from .mesh import empty_mesh, marching_cubes
    from .pipeline import ReconstructionConfig, hierarchical_field

    config = ReconstructionConfig(run_body_optimization=False) if config is None else config
    f = fused_field(net, frames, model)
    vol, _ = body_volume(model, frames.reference.body, net.cfg.volume_in_resolution, config.bounds_margin)
    h = hierarchical_field(f, vol.bounds, config)
    mesh = marching_cubes(h.values, vol.bounds.lo, vol.bounds.hi, config.iso)
    return empty_mesh() if mesh.is_empty else mesh


# ------------------------------------------------------------------ fine-tuning

@dataclass
class MultiviewConfig:
    learning_rate: float = 2e-5
    batch_size: int = 1
    n_views: int = 3
    iterations: int = 500
    points_per_subject: int = 5000
    gt_mix_per_batch: int = 1
    depth_aware: bool = True
    freeze_encoders: bool = False
    sigma_blend: float = 0.05
    k_neighbors: int = 4
    seed: int = 0
    lr_decay_factor: float = 0.1
    lr_decay_every_iters: int = 10000
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.n_views < 1:
            raise ValueError("n_views must be >= 1")
        if self.batch_size < 1 or self.iterations < 1:
            raise ValueError("batch_size and iterations must be >= 1")
        if not 0 <= self.gt_mix_per_batch <= self.batch_size:
            raise ValueError("gt_mix_per_batch must lie in [0, batch_size]")

    def train_config(self):
        from .training import TrainConfig

        return TrainConfig(learning_rate=self.learning_rate, batch_size=self.batch_size,
                           points_per_subject=self.points_per_subject, gt_mix_per_batch=self.gt_mix_per_batch,
                           sigma_blend=self.sigma_blend, k_neighbors=self.k_neighbors, seed=self.seed,
                           iterations=self.iterations, depth_aware=self.depth_aware,
                           lr_decay_factor=self.lr_decay_factor, lr_decay_every_iters=self.lr_decay_every_iters)

    def to_dict(self) -> dict:
        return asdict(self)


def _subject_groups(views) -> list:
    groups = {}
    for i, v in enumerate(views):
        groups.setdefault(v.subject, []).append(i)
    return [groups[s] for s in sorted(groups)]


def _warp_tensor(warp: CorrespondenceWarp, p: np.ndarray) -> torch.Tensor:
    return torch.as_tensor(warp(p), dtype=torch.float32)


class _MultiviewLoss:
    """Loss hook for :func:`training.train`: each batch member is one subject seen in ``n_views`` views."""

    def __init__(self, views, model: BodyModel, config: MultiviewConfig):
        self.views = views
        self.model = model
        self.cfg = config
        self.groups = _subject_groups(views)
        self._warps = {}
        self.calls = 0

    def warp(self, ref, tgt, use_gt):
        key = (ref, tgt, bool(use_gt))
        if key not in self._warps:
            a, b = self.views[ref], self.views[tgt]
            body = (lambda v: v.body_gt) if use_gt else (lambda v: v.body_pred)
            self._warps[key] = CorrespondenceWarp(self.model, body(a), body(b), k=self.cfg.k_neighbors,
                                                  sigma=self.cfg.sigma_blend)
        return self._warps[key]

    def __call__(self, net, views, batch, config):
        import torch.nn.functional as F

        rng = np.random.default_rng([self.cfg.seed, self.calls, 707])
        self.calls += 1
        losses = []
        for b, (gi, use_gt) in enumerate(zip(batch.indices, batch.use_gt)):
            group = self.groups[int(gi) % len(self.groups)]
            n = min(self.cfg.n_views, len(group))
            chosen = [group[i] for i in rng.choice(len(group), size=n, replace=False)]
            ref = views[chosen[0]]
            sel = rng.integers(len(ref.points), size=self.cfg.points_per_subject)
            p = ref.points[sel].copy()
            if not use_gt and self.cfg.depth_aware:
                p[:, 2] += ref.shift[sel]
            imgs = torch.stack([views[c].image for c in chosen])
            vols = torch.stack([views[c].vol_gt if use_gt else views[c].vol_pred for c in chosen])
            bnds = torch.stack([views[c].bounds_gt if use_gt else views[c].bounds_pred for c in chosen])
            cams = torch.stack([views[c].camera for c in chosen])
            pts = torch.stack([_warp_tensor(self.warp(chosen[0], c, use_gt), p) for c in chosen])
            fmaps = net.encode_images(imgs)
            fvols = net.encode_volumes(vols)
            cond = net.condition(fmaps, fvols, bnds, cams, pts)
            emb = net.decoder.embed(cond)
            pooled = emb.mean(0)
            c_skip = cond.mean(0) if net.cfg.decoder_skips else None
            pred = net.decoder.head(pooled, c_skip)[..., 0]
            labels = torch.as_tensor(ref.labels[sel], dtype=pred.dtype)
            losses.append(F.mse_loss(pred, labels))
        return {"geometry_loss": torch.stack(losses).mean(), "texture_loss": torch.zeros(())}


def finetune_multiview(net: PamirNet, views, model: BodyModel, config: MultiviewConfig | None = None,
                       out_dir=None, log_every: int = 100):
    """Fine-tune a single-view geometry network through the fusion path.

    ``views`` are prepared training views (see :func:`training.prepare_views`); each
    batch member draws ``n_views`` views of one subject, the first being the
    reference. Returns the :class:`training.TrainResult`.
    """
    from .training import TrainingError, train

    config = MultiviewConfig() if config is None else config
    if net.cfg.decoder_out_channels != 1:
        raise ShapeError("multi-view fine-tuning is implemented for the geometry head")
    if not views:
        raise TrainingError("no training views")
    groups = _subject_groups(views)
    # one pseudo-view per subject so that batches index subjects
    proxies = [views[g[0]] for g in groups]
    for p in (net.image_encoder.parameters(), net.volume_encoder.parameters()):
        for q in p:
            q.requires_grad_(not config.freeze_encoders)
    loss = _MultiviewLoss(views, model, config)
    result = train(proxies, net, config.train_config(), out_dir, log_every,
                   loss_fn=lambda n, _v, b, c: loss(n, views, b, c))
    for q in net.parameters():
        q.requires_grad_(True)
    return result

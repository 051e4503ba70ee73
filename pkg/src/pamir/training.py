"""Depth-ambiguity-aware supervision and the training loop.

A predicted body that sits at the wrong depth conditions the network on a shifted
volume. Instead of forcing the field to reproduce the ground-truth surface there, each
sample is queried at ``p + (0, 0, dz)`` where ``dz`` is the blended depth offset between
corresponding predicted and ground-truth body vertices near ``p``.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .geometry import Bounds, nearest_vertex_weights, sample_training_points, voxelize
from .network import PamirNet, save_checkpoint, volume_tensor

log = logging.getLogger(__name__)


class CorrespondenceError(ValueError):
    pass


class LossError(ValueError):
    pass


class TrainingError(RuntimeError):
    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}


@dataclass
class TrainingSample:
    point: np.ndarray
    gt_occupancy: float
    gt_color: np.ndarray | None = None
    shift: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.point = np.asarray(self.point, dtype=np.float64).reshape(3)
        self.shift = np.asarray(self.shift, dtype=np.float64).reshape(3)
        if self.shift[0] != 0 or self.shift[1] != 0:
            raise ValueError("a compensating shift moves along z only")
        if self.gt_color is not None:
            self.gt_color = np.asarray(self.gt_color, dtype=np.float64).reshape(3)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 3
    epochs: int = 10
    points_per_subject: int = 5000
    lr_decay_factor: float = 0.1
    lr_decay_every_iters: int = 10000
    gt_mix_per_batch: int = 1
    sigma_blend: float = 0.05
    k_neighbors: int = 4
    seed: int = 0
    iterations: int | None = None       # overrides epochs when set
    depth_aware: bool = True            # False gives the naive-loss ablation
    squared_weights: bool = False
    near_fraction: float = 0.8
    pool_size: int = 40000
    texture_jitter_fraction: float = 0.01
    checkpoint_every: int = 0

    def __post_init__(self):
        for name in ("learning_rate", "batch_size", "epochs", "points_per_subject", "lr_decay_factor",
                     "lr_decay_every_iters", "sigma_blend", "k_neighbors"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 <= self.gt_mix_per_batch <= self.batch_size:
            raise ValueError("gt_mix_per_batch must lie in [0, batch_size]")

    def total_iterations(self, n_views: int) -> int:
        if self.iterations is not None:
            return int(self.iterations)
        return self.epochs * math.ceil(n_views / self.batch_size)

    def to_dict(self) -> dict:
        return asdict(self)


# ------------------------------------------------------------------ losses

def depth_shift(p, pred_vertices, gt_vertices, k: int = 4, sigma: float = 0.05,
                squared: bool = False) -> np.ndarray:
    """Blended depth offset ``sum_j w_j (z(v_j) - z(v*_j))`` over the predicted body's k nearest vertices."""
    pred = np.asarray(pred_vertices, dtype=np.float64)
    gt = np.asarray(gt_vertices, dtype=np.float64)
    if pred.shape != gt.shape:
        raise CorrespondenceError(f"predicted body has {len(pred)} vertices, ground truth {len(gt)}")
    idx, w = nearest_vertex_weights(p, pred, k, sigma, squared)
    dz = pred[idx, 2] - gt[idx, 2]
    return (w * dz).sum(-1)


def _stack(samples):
    if not samples:
        raise LossError("no samples")
    pts = np.stack([s.point for s in samples])
    shifts = np.stack([s.shift for s in samples])
    return pts, shifts


def geometry_loss(samples, field_eval) -> torch.Tensor:
    """Mean squared occupancy error with the field evaluated at ``p + shift``.

    ``field_eval`` maps a ``[N, 3]`` tensor to probabilities ``[N]`` (or ``[N, 1]``).
    """
    pts, shifts = _stack(samples)
    labels = torch.tensor([float(s.gt_occupancy) for s in samples], dtype=torch.float64)
    q = torch.as_tensor(pts + shifts)
    pred = field_eval(q).reshape(-1)
    return F.mse_loss(pred, labels.to(pred.dtype))


def texture_loss(samples, color_eval) -> torch.Tensor:
    """Mean over samples of ``|C - C*|_1 + |C' - C*|_1`` (blended and raw colour)."""
    if any(s.gt_color is None for s in samples or [None]):
        raise LossError("texture loss needs a ground-truth colour on every sample")
    pts, shifts = _stack(samples)
    target = torch.as_tensor(np.stack([s.gt_color for s in samples]))
    blended, raw = color_eval(torch.as_tensor(pts + shifts))
    target = target.to(blended.dtype)
    return color_l1(blended, raw, target)


def color_l1(blended, raw, target):
    return ((blended - target).abs().sum(-1) + (raw - target).abs().sum(-1)).mean()


# ------------------------------------------------------------------ training data

@dataclass
class TrainingView:
    """Per-view tensors cached for training: both bodies' volumes and a labelled point pool."""

    subject: int
    view: int
    image: torch.Tensor          # [3, H, W]
    camera: torch.Tensor         # [3]
    vol_gt: torch.Tensor         # [1, R, R, R]
    bounds_gt: torch.Tensor      # [2, 3]
    vol_pred: torch.Tensor
    bounds_pred: torch.Tensor
    points: np.ndarray           # [P, 3] around the ground-truth surface
    labels: np.ndarray           # [P] occupancy, or [P, 3] colours for texture pools
    shift: np.ndarray            # [P] dz against the predicted body
    gt_vertices: np.ndarray
    pred_vertices: np.ndarray
    body_gt: object = None
    body_pred: object = None


def prepare_views(dataset, model, volume_resolution: int, config: TrainConfig, texture: bool = False,
                  views=None) -> list:
    """Voxelize both bodies and draw the labelled point pool of every view (seeded)."""
    from .body import skin
    from .synthetic import shaded_color, subject_shape

    out = []
    for v in (dataset.views if views is None else views):
        gt_mesh = skin(model, v.body_gt)
        pred_mesh = skin(model, v.body_pred)
        b_gt = Bounds.around(gt_mesh.vertices)
        b_pred = Bounds.around(pred_mesh.vertices)
        vol_gt = voxelize(gt_mesh, b_gt, volume_resolution)
        vol_pred = voxelize(pred_mesh, b_pred, volume_resolution)
        rng = np.random.default_rng([config.seed, v.subject, v.view, 303 if texture else 304])
        if texture:
            subject = dataset.subjects[v.subject]
            pts, _ = sample_training_points(v.mesh, b_gt, config.pool_size, near_fraction=1.0,
                                            jitter_sigma=config.texture_jitter_fraction * b_gt.edge, rng=rng)
            labels = shaded_color(subject, subject_shape(subject, model, v.body_gt), pts)
        else:
            pts, labels = sample_training_points(v.mesh, b_gt, config.pool_size,
                                                 near_fraction=config.near_fraction, rng=rng)
            labels = labels.astype(np.float64)
        shift = depth_shift(pts, pred_mesh.vertices, gt_mesh.vertices, config.k_neighbors,
                            config.sigma_blend, config.squared_weights)
        out.append(TrainingView(
            v.subject, v.view, torch.as_tensor(v.image, dtype=torch.float32),
            torch.as_tensor(v.camera.as_array(), dtype=torch.float32),
            volume_tensor(vol_gt), torch.as_tensor(b_gt.as_array(), dtype=torch.float32),
            volume_tensor(vol_pred), torch.as_tensor(b_pred.as_array(), dtype=torch.float32),
            pts, labels, shift, gt_mesh.vertices, pred_mesh.vertices, v.body_gt, v.body_pred))
    return out


@dataclass
class Batch:
    indices: np.ndarray          # [B] view indices
    use_gt: np.ndarray           # [B] bool, ground-truth body instead of the predicted one
    point_index: np.ndarray      # [B, n] rows into each view's pool


def make_batch(views, iteration: int, config: TrainConfig, rng=None) -> Batch:
    """Seeded batch: ``gt_mix_per_batch`` members use the ground-truth body, the rest the predicted one."""
    if not views:
        raise ValueError("empty dataset")
    rng = np.random.default_rng([config.seed, iteration, 505]) if rng is None else rng
    n = len(views)
    b = config.batch_size
    idx = rng.choice(n, size=b, replace=b > n)
    use_gt = np.zeros(b, dtype=bool)
    use_gt[rng.choice(b, size=config.gt_mix_per_batch, replace=False)] = True
    pool = np.array([len(views[i].points) for i in idx])
    point_index = np.stack([rng.integers(pool[j], size=config.points_per_subject) for j in range(b)])
    return Batch(idx, use_gt, point_index)


def batch_tensors(views, batch: Batch, config: TrainConfig):
    """Assemble network inputs; the query point of a predicted-body sample is ``p + dz``."""
    imgs, cams, vols, bnds, pts, labels, dzs = [], [], [], [], [], [], []
    for i, use_gt, sel in zip(batch.indices, batch.use_gt, batch.point_index):
        v = views[i]
        p = v.points[sel].copy()
        dz = np.zeros(len(sel)) if (use_gt or not config.depth_aware) else v.shift[sel]
        p[:, 2] += dz
        imgs.append(v.image)
        cams.append(v.camera)
        vols.append(v.vol_gt if use_gt else v.vol_pred)
        bnds.append(v.bounds_gt if use_gt else v.bounds_pred)
        pts.append(torch.as_tensor(p, dtype=torch.float32))
        labels.append(torch.as_tensor(v.labels[sel], dtype=torch.float32))
        dzs.append(dz)
    return (torch.stack(imgs), torch.stack(vols), torch.stack(bnds), torch.stack(cams),
            torch.stack(pts), torch.stack(labels))


# ------------------------------------------------------------------ loop

@dataclass
class TrainResult:
    net: PamirNet
    trace: list
    checkpoints: list = field(default_factory=list)


def write_trace(trace, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iter", "geometry_loss", "texture_loss", "lr"])
        for row in trace:
            w.writerow([row["iter"], "%.10g" % row["geometry_loss"], "%.10g" % row["texture_loss"],
                        "%.10g" % row["lr"]])


def read_trace(path) -> list:
    with open(path) as fh:
        return [{"iter": int(r["iter"]), "geometry_loss": float(r["geometry_loss"]),
                 "texture_loss": float(r["texture_loss"]), "lr": float(r["lr"])}
                for r in csv.DictReader(fh)]


def batch_loss(net: PamirNet, views, batch: Batch, config: TrainConfig):
    imgs, vols, bnds, cams, pts, labels = batch_tensors(views, batch, config)
    if net.cfg.decoder_out_channels == 4:
        from .texture import blended_colors

        fmaps = net.encode_images(imgs)
        fvols = net.encode_volumes(vols)
        blended, raw, _ = blended_colors(net, fmaps, fvols, bnds, cams, imgs, pts)
        return {"texture_loss": color_l1(blended, raw, labels), "geometry_loss": torch.zeros(())}
    pred = net(imgs, vols, bnds, cams, pts)[..., 0]
    return {"geometry_loss": F.mse_loss(pred, labels), "texture_loss": torch.zeros(())}


def train(views, net: PamirNet, config: TrainConfig, out_dir=None, log_every: int = 100,
          loss_fn=None) -> TrainResult:
    """Adam with step decay; returns the trained net and the per-iteration loss trace.

    ``loss_fn(net, views, batch, config) -> {"geometry_loss", "texture_loss"}`` can
    replace the single-view loss (multi-view fine-tuning does).
    """
    loss_fn = batch_loss if loss_fn is None else loss_fn
    opt = torch.optim.Adam(net.parameters(), lr=config.learning_rate)
    sched = torch.optim.lr_scheduler.StepLR(opt, step_size=config.lr_decay_every_iters,
                                            gamma=config.lr_decay_factor)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    trace, ckpts = [], []
    n_iter = config.total_iterations(len(views))
    net.train()
    for it in range(n_iter):
        batch = make_batch(views, it, config)
        losses = loss_fn(net, views, batch, config)
        total = losses["geometry_loss"] + losses["texture_loss"]
        lr = opt.param_groups[0]["lr"]
        if not torch.isfinite(total):
            snapshot = {"iter": it, "batch_indices": batch.indices.tolist(), "use_gt": batch.use_gt.tolist(),
                        **{k: float(v.detach()) for k, v in losses.items()}, "lr": lr}
            if out is not None:
                (out / "diagnostic.json").write_text(json.dumps(snapshot, indent=2))
            raise TrainingError(f"non-finite loss at iteration {it}: {snapshot}", snapshot)
        opt.zero_grad(set_to_none=True)
        total.backward()
        opt.step()
        sched.step()
        trace.append({"iter": it, "geometry_loss": float(losses["geometry_loss"].detach()),
                      "texture_loss": float(losses["texture_loss"].detach()), "lr": lr})
        if log_every and it % log_every == 0:
            log.info("iter %d geometry %.5f texture %.5f lr %.2g", it, trace[-1]["geometry_loss"],
                     trace[-1]["texture_loss"], lr)
        if out is not None and config.checkpoint_every and (it + 1) % config.checkpoint_every == 0:
            path = out / f"checkpoint_{it + 1:06d}.tc"
            save_checkpoint(net, path, {"iter": it + 1})
            ckpts.append(path)
    net.eval()
    if out is not None:
        save_checkpoint(net, out / "checkpoint.tc", {"iter": n_iter, "train": config.to_dict()})
        write_trace(trace, out / "loss_trace.csv")
    return TrainResult(net, trace, ckpts)

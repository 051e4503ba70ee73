"""End-to-end reconstruction with coarse-to-fine field querying."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .body import BodyModel, BodyParams
from .geometry import Bounds, Camera
from .mesh import TriMesh, empty_mesh, marching_cubes
from .network import FieldEvaluator, PamirNet, body_volume

log = logging.getLogger(__name__)


@dataclass
class ReconstructionConfig:
    grid_resolution: int = 128
    coarse_resolution: int = 32
    iso: float = 0.5
    refine_band: int = 2
    band_margin: float = 0.05
    run_body_optimization: bool = True
    bounds_margin: float = 1.2

    def __post_init__(self):
        if not 2 <= self.coarse_resolution <= self.grid_resolution:
            raise ValueError("coarse_resolution must lie in [2, grid_resolution]")
        if not 0.0 < self.iso < 1.0:
            raise ValueError("iso must lie in (0, 1)")


@dataclass
class HierarchicalResult:
    values: np.ndarray       # [R, R, R] on grid_points(lo, hi, R)
    evaluated: np.ndarray    # [R, R, R] bool, exactly evaluated samples
    n_queries: int
    n_refined_blocks: int


def _block_reduce(arr, starts, ends, ufunc):
    """Reduce ``arr`` over the closed index ranges ``[starts[a], ends[a]]`` on every axis."""
    idx = np.empty(2 * len(starts), dtype=np.int64)
    idx[0::2] = starts
    idx[1::2] = ends + 1
    n = arr.shape[0]
    out = arr
    for axis in range(3):
        pad = np.take(out, [n - 1], axis=axis)      # reduceat needs valid indices; ends + 1 may equal n
        ext = np.concatenate([out, pad], axis=axis)
        out = np.take(ufunc.reduceat(ext, idx, axis=axis), np.arange(0, 2 * len(starts), 2), axis=axis)
    return out


def _expand_blocks(block_mask, coarse_idx, resolution):
    """Dense mask of every grid sample that belongs to a flagged block (closed ranges)."""
    i = np.arange(resolution)
    lb = np.clip(np.searchsorted(coarse_idx, i, side="right") - 1, 0, len(coarse_idx) - 2)
    alt = np.where(np.isin(i, coarse_idx[1:-1]), lb - 1, lb)
    out = np.zeros((resolution,) * 3, dtype=bool)
    for ax in (lb, alt):
        for ay in (lb, alt):
            for az in (lb, alt):
                out |= block_mask[np.ix_(ax, ay, az)]
    return out


def hierarchical_field(field_eval, bounds: Bounds, config: ReconstructionConfig) -> HierarchicalResult:
    """Coarse-to-fine evaluation on ``grid_points(bounds.lo, bounds.hi, R)``.

    Blocks between neighbouring coarse samples are refined to full resolution unless
    every exactly known value in them lies on one side of ``iso`` by more than
    ``band_margin``. Unrefined blocks are filled by trilinear interpolation of their
    corners, so they never contain a crossing; every cell the surface passes through
    holds exact values.
    """
    r, rc, iso, m = config.grid_resolution, config.coarse_resolution, config.iso, config.band_margin
    ci = np.unique(np.round(np.linspace(0, r - 1, rc)).astype(np.int64))
    axes = [np.linspace(bounds.lo[k], bounds.hi[k], r) for k in range(3)]
    values = np.zeros((r, r, r))
    known = np.zeros((r, r, r), dtype=bool)

    def evaluate(mask):
        todo = mask & ~known
        ii = np.nonzero(todo)
        if len(ii[0]):
            pts = np.stack([axes[0][ii[0]], axes[1][ii[1]], axes[2][ii[2]]], axis=1)
            values[ii] = np.asarray(field_eval(pts), dtype=np.float64).reshape(-1)
            known[ii] = True

    coarse = np.zeros((r, r, r), dtype=bool)
    coarse[np.ix_(ci, ci, ci)] = True
    evaluate(coarse)
    starts, ends = ci[:-1], ci[1:]
    refined = np.zeros((len(ci) - 1,) * 3, dtype=bool)
    while True:
        hi_vals = np.where(known, values, -np.inf)
        lo_vals = np.where(known, values, np.inf)
        kmax = _block_reduce(hi_vals, starts, ends, np.maximum)
        kmin = _block_reduce(lo_vals, starts, ends, np.minimum)
        settled = (kmin > iso + m) | (kmax < iso - m)
        new = ~settled & ~refined
        if not new.any():
            break
        refined |= new
        evaluate(_expand_blocks(new, ci, r))

    # trilinear fill of the unrefined blocks from their corners
    i = np.arange(r)
    a = np.clip(np.searchsorted(ci, i, side="right") - 1, 0, len(ci) - 2)
    t = (i - ci[a]) / (ci[a + 1] - ci[a])
    vc = values[np.ix_(ci, ci, ci)]
    fill = np.zeros((r, r, r))
    for dx in (0, 1):
        wx = (t if dx else 1 - t)[:, None, None]
        for dy in (0, 1):
            wy = (t if dy else 1 - t)[None, :, None]
            for dz in (0, 1):
                wz = (t if dz else 1 - t)[None, None, :]
                fill += wx * wy * wz * vc[np.ix_(a + dx, a + dy, a + dz)]
    out = np.where(known, values, fill)
    return HierarchicalResult(out, known, int(known.sum()), int(refined.sum()))


def dense_field(field_eval, bounds: Bounds, resolution: int) -> np.ndarray:
    from .mesh import grid_points

    pts = grid_points(bounds.lo, bounds.hi, resolution).reshape(-1, 3)
    return np.asarray(field_eval(pts), dtype=np.float64).reshape((resolution,) * 3)


@dataclass
class ReconstructionResult:
    mesh: TriMesh
    body: BodyParams
    timing: dict
    n_queries: int
    optim_trace: list = field(default_factory=list)


def network_field(net: PamirNet, image, camera: Camera, model: BodyModel, body: BodyParams, margin: float = 1.2):
    """Numpy field evaluator for one image and body, plus the grid bounds around the body."""
    vol, mesh = body_volume(model, body, net.cfg.volume_in_resolution, margin)
    ev = FieldEvaluator(net, image, camera, vol)

    def f(points):
        return ev(points)[:, 0].double().numpy()

    return f, vol.bounds


def reconstruct(image, init_body: BodyParams, model: BodyModel, geo_net: PamirNet, camera: Camera,
                config: ReconstructionConfig | None = None, tex_net: PamirNet | None = None,
                optim_config=None) -> ReconstructionResult:
    """Optional body optimization, hierarchical querying, marching cubes, optional colouring."""
    config = ReconstructionConfig() if config is None else config
    timing = {}
    body = init_body
    trace = []
    if config.run_body_optimization:
        from .body_optim import NetworkField, OptimConfig, optimize_body

        t0 = time.perf_counter()
        field_ = NetworkField(geo_net, image, camera, model)
        body, trace = optimize_body(init_body, model, field_, optim_config or OptimConfig())
        timing["optimize"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    f, bounds = network_field(geo_net, image, camera, model, body, config.bounds_margin)
    timing["encode"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    h = hierarchical_field(f, bounds, config)
    timing["query"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    mesh = marching_cubes(h.values, bounds.lo, bounds.hi, config.iso)
    timing["march"] = time.perf_counter() - t0
    if mesh.is_empty:
        log.warning("the occupancy field has no iso-surface; returning an empty mesh")
        mesh = empty_mesh()
    if tex_net is not None:
        from .texture import colorize_mesh

        t0 = time.perf_counter()
        mesh = colorize_mesh(mesh, image, body, model, tex_net, camera)
        timing["colorize"] = time.perf_counter() - t0
    return ReconstructionResult(mesh, body, timing, h.n_queries, trace)

"""Inference-time body refinement against an occupancy field.

The skinned body's vertices should sit on the field's 0.5 level set. Vertices whose
field value says "outside the surface" are penalized ``eta`` times harder than
vertices that sank inside, so the body may shrink under loose clothing but is pulled
back when it pokes out. A quadratic term keeps the parameters near their initial
estimate.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .body import BodyModel, BodyParams, TorchBody, check_params
from .geometry import Camera

log = logging.getLogger(__name__)


class OptimizationError(RuntimeError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace or []


@dataclass
class OptimConfig:
    iterations: int = 50
    step_size: float = 0.01
    lambda_reg: float = 0.2
    eta: float = 5.0
    revoxelize_every: int = 10
    seed: int = 0
    literal_eq11: bool = False       # apply q to (F - 0.5) as printed instead of (0.5 - F)
    max_halvings: int = 5
    optimize_global: bool = True
    direction: str = "adam"          # "adam" (moment-normalized gradient) or "gradient"
    beta1: float = 0.9
    beta2: float = 0.999
    keypoint_weight: float = 0.0     # optional 2D joint term, off by default

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if self.revoxelize_every < 1:
            raise ValueError("revoxelize_every must be >= 1")
        if self.direction not in ("adam", "gradient"):
            raise ValueError(f"unknown direction {self.direction!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def penalty(x, eta: float = 5.0):
    """``|x|`` for ``x >= 0`` and ``|x| / eta`` below zero; works on floats, arrays and tensors."""
    if isinstance(x, torch.Tensor):
        return torch.relu(x) + torch.relu(-x) / eta
    x = np.asarray(x, dtype=np.float64)
    out = np.where(x >= 0, x, -x / eta)
    return float(out) if out.ndim == 0 else out


# ------------------------------------------------------------------ fields

class AnalyticField:
    """Smooth occupancy ``sigmoid(-sdf / tau)`` of a posed capsule union (independent of the body)."""

    def __init__(self, shape, tau: float = 0.01):
        self.shape = shape
        self.tau = tau

    def refresh(self, params: BodyParams) -> None:
        pass

    def __call__(self, points: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(-self.shape.sdf(points) / self.tau)


class MeshField:
    """Smooth occupancy ``sigmoid(-sd / tau)`` from the exact signed distance to a closed mesh.

    The closest surface point is found in numpy and held fixed; the gradient of
    ``|p - c|`` with respect to ``p`` is then exact wherever the distance is smooth.
    Every vertex of ``mesh`` lies on the 0.5 level set.
    """

    def __init__(self, mesh, tau: float = 0.02):
        from .mesh import MeshDistance

        self.mesh = mesh
        self.tau = tau
        self.on_surface_tol = 1e-9
        self._dist = MeshDistance(mesh)

    def refresh(self, params: BodyParams) -> None:
        pass

    def signed_distance(self, points: torch.Tensor) -> torch.Tensor:
        from .geometry import point_in_mesh

        p_np = points.detach().cpu().numpy().astype(np.float64).reshape(-1, 3)
        _, cp, _ = self._dist.closest(p_np)
        sign = np.where(point_in_mesh(self.mesh, p_np), -1.0, 1.0)
        diff = points.reshape(-1, 3) - torch.as_tensor(cp, dtype=points.dtype)
        # points within round-off of the surface get exactly zero distance (and zero gradient)
        on = torch.as_tensor(np.linalg.norm(p_np - cp, axis=1) < self.on_surface_tol)
        diff = torch.where(on[:, None], torch.ones_like(diff), diff)
        d = torch.where(on, torch.zeros_like(diff[:, 0]), torch.linalg.vector_norm(diff, dim=-1))
        return (torch.as_tensor(sign, dtype=points.dtype) * d).reshape(points.shape[:-1])

    def __call__(self, points: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(-self.signed_distance(points) / self.tau)


class ConstantField:
    def __init__(self, value: float = 0.5):
        self.value = value

    def refresh(self, params):
        pass

    def __call__(self, points):
        return torch.full(points.shape[:-1], self.value, dtype=points.dtype) + 0.0 * points.sum(-1)


class NetworkField:
    """Geometry network field; the volume branch is rebuilt from the body on ``refresh``.

    Gradients flow through the query positions only: the image and volume features
    stay fixed between refreshes.
    """

    def __init__(self, net, image, camera: Camera, model: BodyModel, margin: float = 1.2):
        from .network import encode_image

        self.net = net
        self.camera = camera
        self.model = model
        self.margin = margin
        with torch.no_grad():
            self.fmap = encode_image(net, image)
        self.fvol = None
        self.n_refresh = 0

    def refresh(self, params: BodyParams) -> None:
        from .network import body_volume, encode_volume

        vol, _ = body_volume(self.model, params, self.net.cfg.volume_in_resolution, self.margin)
        with torch.no_grad():
            self.fvol = encode_volume(self.net, vol)
        self.n_refresh += 1

    def __call__(self, points: torch.Tensor) -> torch.Tensor:
        from .network import condition, decode

        if self.fvol is None:
            raise OptimizationError("NetworkField.refresh must be called before querying")
        out = decode(self.net, condition(self.fmap, self.fvol, points.to(self.net.dtype), self.camera))
        return out[:, 0].to(points.dtype)


# ------------------------------------------------------------------ losses

def fitting_loss(body: BodyParams, model: BodyModel, field, eta: float = 5.0,
                 literal_eq11: bool = False) -> torch.Tensor:
    """Mean vertex penalty; with the default convention a vertex at F = 0.4 costs 0.1 and at F = 0.6 costs 0.02."""
    check_params(model, body)
    v = TorchBody(model).params_vertices(body)
    return _fit_term(field(v), eta, literal_eq11)


def _fit_term(f, eta, literal):
    arg = (f - 0.5) if literal else (0.5 - f)
    return penalty(arg, eta).mean()


def reg_loss(body: BodyParams, init: BodyParams, include_global: bool = False) -> float:
    """``|beta - beta0|^2 + |theta - theta0|^2`` (plus translation and scale when requested)."""
    if body.shape.shape != init.shape.shape or body.pose.shape != init.pose.shape:
        raise ValueError("body and init parameters have different dimensions")
    out = float(np.sum((body.shape - init.shape) ** 2) + np.sum((body.pose - init.pose) ** 2))
    if include_global:
        out += float(np.sum((body.global_translation - init.global_translation) ** 2)
                     + (body.global_scale - init.global_scale) ** 2)
    return out


# ------------------------------------------------------------------ optimizer

class _Objective:
    def __init__(self, model, init: BodyParams, field, config: OptimConfig, keypoints=None, camera=None):
        self.tb = TorchBody(model)
        self.init = init
        self.field = field
        self.cfg = config
        self.n_beta = model.n_shape
        self.n_j = model.n_joints
        self.x0 = self.pack(init)
        self.keypoints = None if keypoints is None else torch.as_tensor(np.asarray(keypoints, dtype=np.float64))
        self.camera = camera

    def pack(self, p: BodyParams) -> torch.Tensor:
        return torch.cat([torch.as_tensor(p.shape), torch.as_tensor(p.pose.reshape(-1)),
                          torch.as_tensor(p.global_translation), torch.tensor([p.global_scale])]).double()

    def unpack(self, x: torch.Tensor) -> BodyParams:
        x = x.detach().numpy()
        nb, nj = self.n_beta, self.n_j
        scale = float(x[nb + 3 * nj + 3])
        if not scale > 0:
            raise OptimizationError(f"global scale became non-positive ({scale})")
        return BodyParams(x[:nb], x[nb:nb + 3 * nj].reshape(nj, 3), x[nb + 3 * nj:nb + 3 * nj + 3], scale)

    def __call__(self, x: torch.Tensor):
        nb, nj = self.n_beta, self.n_j
        beta, theta = x[:nb], x[nb:nb + 3 * nj].reshape(nj, 3)
        t, s = x[nb + 3 * nj:nb + 3 * nj + 3], x[nb + 3 * nj + 3]
        v = self.tb.vertices(beta, theta, t, s)
        fit = _fit_term(self.field(v), self.cfg.eta, self.cfg.literal_eq11)
        d = x - self.x0
        if self.cfg.optimize_global:
            reg = (d * d).sum()
        else:
            reg = (d[:nb + 3 * nj] ** 2).sum()
        total = fit + self.cfg.lambda_reg * reg
        if self.keypoints is not None and self.cfg.keypoint_weight > 0:
            joints = self.tb.joints(self.tb.shaped(beta, theta))
            g = self.tb.joint_transforms(theta, joints)
            posed = s * (joints + g[:, :3, 3]
                         + ((g[:, :3, :3] - torch.eye(3, dtype=x.dtype)) @ joints[..., None])[..., 0]) + t
            uv = self.camera.scale * posed[:, :2] + torch.as_tensor(self.camera.offset, dtype=x.dtype)
            total = total + self.cfg.keypoint_weight * ((uv - self.keypoints) ** 2).sum(-1).mean()
        return total, fit, reg

    def vertices(self, x):
        nb, nj = self.n_beta, self.n_j
        return self.tb.vertices(x[:nb], x[nb:nb + 3 * nj].reshape(nj, 3), x[nb + 3 * nj:nb + 3 * nj + 3],
                                x[nb + 3 * nj + 3])

    def value_and_grad(self, x: torch.Tensor):
        x = x.detach().clone().requires_grad_(True)
        total, fit, reg = self(x)
        (g,) = torch.autograd.grad(total, x)
        if not self.cfg.optimize_global:
            g[-4:] = 0.0
        return float(total.detach()), float(fit.detach()), float(reg.detach()), g


def optimize_body(init: BodyParams, model: BodyModel, field, config: OptimConfig | None = None,
                  keypoints=None, camera: Camera | None = None):
    """Descent with backtracking on ``fit + lambda_reg * reg``.

    The search direction is the gradient normalized per coordinate by running first
    and second moment estimates (``direction="adam"``), or the raw gradient. A trial
    step that increases the objective is halved up to ``max_halvings`` times; if none
    succeeds the iterate is kept. The next iteration starts from twice the
    last accepted step (capped at ``step_size``). The field is refreshed from the
    current body every ``revoxelize_every`` iterations; the objective is re-evaluated
    after each refresh, so monotonicity holds between refreshes.

    Returns ``(params, trace)``; ``trace`` rows hold ``iter, objective, fitting, reg,
    step, accepted, halvings``.
    """
    config = OptimConfig() if config is None else config
    check_params(model, init)
    obj = _Objective(model, init, field, config, keypoints, camera)
    x = obj.x0.clone()
    trace = []
    step = config.step_size
    initial = best = None
    best_x = x.clone()
    blowups = 0
    m1 = torch.zeros_like(x)
    m2 = torch.zeros_like(x)
    for it in range(config.iterations):
        if it % config.revoxelize_every == 0:
            field.refresh(obj.unpack(x))
        total, fit, reg, g = obj.value_and_grad(x)
        if not np.isfinite(total):
            raise OptimizationError(f"non-finite objective at iteration {it}", trace)
        if initial is None:
            initial = best = total
        accepted = False
        halvings = 0
        trial = min(2.0 * step, config.step_size) if it else config.step_size
        if config.direction == "adam":
            m1 = config.beta1 * m1 + (1 - config.beta1) * g
            m2 = config.beta2 * m2 + (1 - config.beta2) * g * g
            direction = (m1 / (1 - config.beta1 ** (it + 1))) / (
                torch.sqrt(m2 / (1 - config.beta2 ** (it + 1))) + 1e-12)
        else:
            direction = g
        for halvings in range(config.max_halvings + 1):
            xt = x - trial * direction
            with torch.no_grad():
                t_total, t_fit, t_reg = obj(xt)
            if torch.isfinite(t_total) and float(t_total) <= total and float(xt[-1]) > 0:
                accepted = True
                break
            trial *= 0.5
        step = trial
        if accepted:
            x, total, fit, reg = xt.detach(), float(t_total), float(t_fit), float(t_reg)
        trace.append({"iter": it, "objective": total, "fitting": fit, "reg": reg,
                      "step": trial, "accepted": accepted, "halvings": halvings})
        if total < best:
            best, best_x = total, x.clone()
        blowups = blowups + 1 if total > 10.0 * initial else 0
        if blowups >= 5:
            log.warning("body optimization diverged at iteration %d; returning the best iterate", it)
            return obj.unpack(best_x), trace
    return obj.unpack(x), trace


def write_optim_trace(trace, path) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iter", "objective", "fitting", "reg", "step", "accepted", "halvings"])
        for r in trace:
            w.writerow([r["iter"], "%.10g" % r["objective"], "%.10g" % r["fitting"], "%.10g" % r["reg"],
                        "%.10g" % r["step"], int(r["accepted"]), r["halvings"]])

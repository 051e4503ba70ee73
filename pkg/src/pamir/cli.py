"""Command-line entry point ``pamir``.

Every command exits with 0 on success. Failures print one line to stderr of the form
``pamir-error {"command": ..., "type": ..., "message": ...}`` (JSON after the prefix)
and exit with a nonzero code: 1 for runtime failures, 3 for missing or invalid inputs.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("pamir")

ERROR_PREFIX = "pamir-error"


class InputError(ValueError):
    """A user-supplied file or argument is missing or malformed."""


# ------------------------------------------------------------------ helpers

def _setup_torch(threads: int) -> None:
    import torch

    torch.set_num_threads(max(1, threads))
    torch.use_deterministic_algorithms(True)


def _require(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise InputError(f"no such file: {p}")
    return p


def _split(arg: str) -> list:
    return [s for s in (x.strip() for x in arg.split(",")) if s]


def _model(path):
    from .body import BodyModel, desk_model

    return desk_model() if path is None else BodyModel.load(_require(path))


def _network(path, head: str | None = None):
    from .network import load_checkpoint

    net = load_checkpoint(_require(path))
    out = net.cfg.decoder_out_channels
    if head == "geometry" and out != 1:
        raise InputError(f"{path}: expected a geometry checkpoint, found {out} output channels")
    if head == "texture" and out != 4:
        raise InputError(f"{path}: expected a texture checkpoint, found {out} output channels")
    net.eval()
    return net


def _image(path):
    from .synthetic import load_image

    return load_image(_require(path))


def _body(path):
    from .body import BodyParams

    return BodyParams.load(_require(path))


def _camera(path, image_path, model, body):
    """An explicit camera file, else ``camera.tc`` beside the image, else a framing of the body."""
    from .body import skin
    from .geometry import Bounds, Camera
    from .tensorio import load_tensors

    candidate = Path(path) if path else Path(image_path).with_name("camera.tc")
    if path or candidate.exists():
        arrays, _ = load_tensors(_require(candidate))
        return Camera.from_array(arrays["camera"])
    return Camera.framing(Bounds.around(skin(model, body).vertices, 1.2))


def _print_json(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def _sibling(path, suffix: str) -> Path:
    p = Path(path)
    return p.with_name(p.stem + suffix)


def _load_config(path) -> dict:
    text = _require(path).read_text()
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON config ({exc})") from exc
    unknown = set(cfg) - {"train", "network"}
    if unknown:
        raise InputError(f"{path}: unknown config sections {sorted(unknown)}")
    return cfg


# ------------------------------------------------------------------ commands

def cmd_generate_data(args) -> None:
    from .synthetic import generate_dataset, write_dataset

    model = _model(args.body_model)
    ds = generate_dataset(args.subjects, args.views, args.seed, model, args.image_size)
    manifest = write_dataset(ds, args.out, args.seed)
    model.save(Path(args.out) / "body_model.tc")
    _print_json({"manifest": str(manifest), "subjects": len(ds.subjects), "views": len(ds.views)})


def cmd_train(args) -> None:
    from .network import NetworkConfig, PamirNet
    from .plotting import plot_loss_trace
    from .synthetic import load_dataset
    from .training import TrainConfig, prepare_views, train

    cfg = _load_config(args.config) if args.config else {}
    tcfg = TrainConfig(**cfg.get("train", {}))
    if args.iters is not None:
        tcfg.iterations = args.iters
    ncfg_dict = dict(cfg.get("network", {}))
    if args.texture:
        ncfg_dict.setdefault("decoder_out_channels", 4)
        widths = ncfg_dict.get("decoder_widths", list(NetworkConfig().decoder_widths))
        ncfg_dict["decoder_widths"] = widths[:-1] + [4]
    ncfg = NetworkConfig(**ncfg_dict)
    texture = ncfg.decoder_out_channels == 4
    ds = load_dataset(_require(args.data))
    model = _model(args.body_model or (Path(args.data) / "body_model.tc"
                                       if (Path(args.data) / "body_model.tc").exists() else None))
    views = prepare_views(ds, model, ncfg.volume_in_resolution, tcfg, texture=texture)
    net = PamirNet(ncfg)
    result = train(views, net, tcfg, out_dir=args.out, log_every=args.log_every)
    out = Path(args.out)
    (out / "config.json").write_text(json.dumps({"train": tcfg.to_dict(), "network": ncfg.to_dict()},
                                                indent=2, sort_keys=True) + "\n")
    png = plot_loss_trace(result.trace, out / "loss_trace.png")
    last = result.trace[-1] if result.trace else {}
    _print_json({"checkpoint": str(out / "checkpoint.tc"), "trace": str(out / "loss_trace.csv"),
                 "plot": str(png), "iterations": len(result.trace),
                 "final_loss": last.get("texture_loss" if texture else "geometry_loss")})


def _optim_config(args):
    from .body_optim import OptimConfig

    kw = {}
    if getattr(args, "iters", None) is not None:
        kw["iterations"] = args.iters
    if getattr(args, "lambda_reg", None) is not None:
        kw["lambda_reg"] = args.lambda_reg
    if getattr(args, "literal_eq11", False):
        kw["literal_eq11"] = True
    return OptimConfig(**kw)


def _write_optim_outputs(trace, csv_path) -> dict:
    from .body_optim import write_optim_trace
    from .plotting import plot_optim_trace

    csv_path = Path(csv_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    write_optim_trace(trace, csv_path)
    out = {"trace": str(csv_path)}
    if trace:
        out["plot"] = str(plot_optim_trace(trace, csv_path.with_suffix(".png")))
    return out


def cmd_reconstruct(args) -> None:
    from .mesh import save_mesh
    from .pipeline import ReconstructionConfig, reconstruct

    model = _model(args.body_model)
    net = _network(args.ckpt, "geometry")
    tex = _network(args.tex_ckpt, "texture") if args.tex_ckpt else None
    image = _image(args.image)
    body = _body(args.body)
    camera = _camera(args.camera, args.image, model, body)
    rcfg = ReconstructionConfig(grid_resolution=args.resolution, coarse_resolution=args.coarse,
                                run_body_optimization=not args.no_body_opt)
    res = reconstruct(image, body, model, net, camera, rcfg, tex_net=tex, optim_config=_optim_config(args))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_mesh(res.mesh, args.out)
    report = {"mesh": str(args.out), "vertices": int(len(res.mesh.vertices)),
              "faces": int(len(res.mesh.faces)), "queries": res.n_queries,
              "timing": {k: round(v, 4) for k, v in res.timing.items()}}
    if rcfg.run_body_optimization:
        body_out = Path(args.body_out) if args.body_out else _sibling(args.out, "_body.tc")
        res.body.save(body_out)
        report["body"] = str(body_out)
        report.update(_write_optim_outputs(res.optim_trace, _sibling(args.out, "_optim_trace.csv")))
    _print_json(report)


def cmd_optimize_body(args) -> None:
    from .body_optim import NetworkField, optimize_body

    model = _model(args.body_model)
    net = _network(args.ckpt, "geometry")
    image = _image(args.image)
    init = _body(args.init_body)
    camera = _camera(args.camera, args.image, model, init)
    body, trace = optimize_body(init, model, NetworkField(net, image, camera, model), _optim_config(args))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    body.save(args.out)
    report = {"body": str(args.out), "iterations": len(trace),
              "initial_objective": trace[0]["objective"] if trace else None,
              "final_objective": trace[-1]["objective"] if trace else None}
    report.update(_write_optim_outputs(trace, Path(args.trace) if args.trace else _sibling(args.out, "_trace.csv")))
    _print_json(report)


def cmd_colorize(args) -> None:
    from .body_optim import NetworkField, optimize_body
    from .mesh import load_mesh, save_mesh
    from .texture import colorize_mesh

    model = _model(args.body_model)
    geo = _network(args.geo_ckpt, "geometry")
    tex = _network(args.tex_ckpt, "texture")
    image = _image(args.image)
    body = _body(args.body)
    camera = _camera(args.camera, args.image, model, body)
    if args.optimize_body:
        body, _ = optimize_body(body, model, NetworkField(geo, image, camera, model), _optim_config(args))
    mesh = colorize_mesh(load_mesh(_require(args.mesh)), image, body, model, tex, camera)
    if Path(args.out).suffix.lower() not in (".obj", ".ply"):
        raise InputError("--out must end in .obj or .ply")
    save_mesh(mesh, args.out)
    _print_json({"mesh": str(args.out), "vertices": int(len(mesh.vertices))})


def cmd_reconstruct_multi(args) -> None:
    from .mesh import save_mesh
    from .multiview import Frame, FrameSet, reconstruct_multi
    from .pipeline import ReconstructionConfig

    images, bodies = _split(args.images), _split(args.bodies)
    if len(images) != len(bodies) or not images:
        raise InputError(f"need one body per image, got {len(images)} images and {len(bodies)} bodies")
    cameras = _split(args.cameras) if args.cameras else [None] * len(images)
    if len(cameras) != len(images):
        raise InputError("need one camera per image")
    model = _model(args.body_model)
    net = _network(args.ckpt, "geometry")
    frames = []
    for img, b, c in zip(images, bodies, cameras):
        body = _body(b)
        frames.append(Frame(_image(img), body, _camera(c, img, model, body)))
    rcfg = ReconstructionConfig(grid_resolution=args.resolution, coarse_resolution=args.coarse,
                                run_body_optimization=False)
    mesh = reconstruct_multi(FrameSet(frames, args.reference), model, net, rcfg)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_mesh(mesh, args.out)
    _print_json({"mesh": str(args.out), "frames": len(frames), "vertices": int(len(mesh.vertices))})


def cmd_body_info(args) -> None:
    from .body import BodyModel, BodyModelError, desk_model

    if args.file is None:
        model, source = desk_model(), "built-in desk model"
    else:
        model, source = BodyModel.load(_require(args.file), check_mesh=False), str(args.file)
    info = {"source": source, "n_vertices": model.n_vertices, "n_faces": int(len(model.faces)),
            "n_joints": model.n_joints, "n_shape": model.n_shape, "joint_names": list(model.joint_names)}
    try:
        info["checks"] = model.validate(check_mesh=True)
        info["valid"] = True
    except BodyModelError as exc:
        info["valid"] = False
        info["checks"] = {"error": str(exc)}
    _print_json(info)
    if not info["valid"]:
        raise InputError(f"body model fails validation: {info['checks']['error']}")


def cmd_eval(args) -> None:
    from .mesh import MeshDistance, load_mesh, mesh_metrics, sample_surface

    pred, gt = load_mesh(_require(args.pred)), load_mesh(_require(args.gt))
    metrics = mesh_metrics(pred, gt, n=args.samples, seed=args.seed)
    if args.plot:
        from .plotting import plot_distance_histogram

        pts, _, _ = sample_surface(pred, args.samples, np.random.default_rng(args.seed))
        metrics["plot"] = str(plot_distance_histogram(MeshDistance(gt)(pts), args.plot))
    if args.out:
        Path(args.out).write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    _print_json(metrics)


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pamir", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=1, help="torch CPU threads (default 1, deterministic)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.set_defaults(func=func)
        return sp

    def body_model_arg(sp):
        sp.add_argument("--body-model", help="body model container (default: built-in desk model)")

    def optim_args(sp):
        sp.add_argument("--iters", type=int, help="body optimization iterations (default 50)")
        sp.add_argument("--lambda-reg", type=float, help="pose regularization weight (default 0.2)")
        sp.add_argument("--literal-eq11", action="store_true",
                        help="penalize inside vertices more heavily (the printed sign convention)")

    sp = add("generate-data", cmd_generate_data, "write a seeded synthetic dataset directory")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--subjects", type=int, default=4)
    sp.add_argument("--views", type=int, default=4, help="views per subject")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--image-size", type=int, default=64)
    body_model_arg(sp)

    sp = add("train", cmd_train, "train a geometry (or texture) network on a dataset directory")
    sp.add_argument("--config", help="JSON file with optional 'train' and 'network' sections")
    sp.add_argument("--data", required=True, help="dataset directory written by generate-data")
    sp.add_argument("--out", required=True, help="checkpoint directory")
    sp.add_argument("--iters", type=int, help="override the number of iterations")
    sp.add_argument("--texture", action="store_true", help="train the RGB-alpha texture head")
    sp.add_argument("--log-every", type=int, default=100)
    body_model_arg(sp)

    sp = add("reconstruct", cmd_reconstruct, "reconstruct a mesh from one image and an initial body")
    sp.add_argument("--ckpt", required=True, help="geometry checkpoint")
    sp.add_argument("--image", required=True)
    sp.add_argument("--body", required=True, help="initial body parameters")
    sp.add_argument("--out", required=True, help="output mesh (.obj or .ply)")
    sp.add_argument("--camera", help="camera container (default: camera.tc next to the image)")
    sp.add_argument("--tex-ckpt", help="texture checkpoint; colours the output vertices")
    sp.add_argument("--no-body-opt", action="store_true", help="skip body optimization")
    sp.add_argument("--body-out", help="where to write the optimized body")
    sp.add_argument("--resolution", type=int, default=128, help="marching-cubes grid resolution")
    sp.add_argument("--coarse", type=int, default=32, help="coarse query resolution")
    optim_args(sp)
    body_model_arg(sp)

    sp = add("optimize-body", cmd_optimize_body, "refine body parameters against a trained network")
    sp.add_argument("--ckpt", required=True, help="geometry checkpoint")
    sp.add_argument("--image", required=True)
    sp.add_argument("--init-body", required=True)
    sp.add_argument("--out", required=True, help="optimized body container")
    sp.add_argument("--camera")
    sp.add_argument("--trace", help="trace CSV (default: <out>_trace.csv); a PNG is written beside it")
    optim_args(sp)
    body_model_arg(sp)

    sp = add("colorize", cmd_colorize, "colour mesh vertices with a texture network")
    sp.add_argument("--geo-ckpt", required=True, help="geometry checkpoint")
    sp.add_argument("--tex-ckpt", required=True, help="texture checkpoint")
    sp.add_argument("--image", required=True)
    sp.add_argument("--mesh", required=True)
    sp.add_argument("--body", required=True, help="body the mesh was reconstructed with")
    sp.add_argument("--out", required=True, help="coloured mesh (.obj or .ply)")
    sp.add_argument("--camera")
    sp.add_argument("--optimize-body", action="store_true", help="refine the body with the geometry network first")
    optim_args(sp)
    body_model_arg(sp)

    sp = add("reconstruct-multi", cmd_reconstruct_multi, "fuse several images of one subject into a mesh")
    sp.add_argument("--ckpt", required=True, help="geometry checkpoint")
    sp.add_argument("--images", required=True, help="comma-separated image files")
    sp.add_argument("--bodies", required=True, help="comma-separated body files, one per image")
    sp.add_argument("--cameras", help="comma-separated camera files (default: camera.tc next to each image)")
    sp.add_argument("--out", required=True)
    sp.add_argument("--reference", type=int, default=0, help="index of the reference frame")
    sp.add_argument("--resolution", type=int, default=128)
    sp.add_argument("--coarse", type=int, default=32)
    body_model_arg(sp)

    sp = add("body-info", cmd_body_info, "print body model dimensions and invariant checks")
    sp.add_argument("file", nargs="?", help="body model container (default: built-in desk model)")

    sp = add("eval", cmd_eval, "Chamfer and point-to-surface distances between two meshes")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--samples", type=int, default=10_000, help="surface samples per side")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", help="write the metrics as JSON")
    sp.add_argument("--plot", help="write a histogram of pred-to-gt distances (PNG)")
    return p


def _error_code(exc: BaseException) -> int:
    from .body import BodyModelError, BodyParamsError
    from .network import CheckpointError
    from .tensorio import ContainerError

    inputs = (InputError, FileNotFoundError, ContainerError, CheckpointError, BodyModelError, BodyParamsError)
    return 3 if isinstance(exc, inputs) else 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        _setup_torch(args.threads)
        args.func(args)
    except Exception as exc:   # report every failure as one parseable line
        line = {"command": args.command, "type": type(exc).__name__, "message": str(exc)}
        print(f"{ERROR_PREFIX} {json.dumps(line)}", file=sys.stderr)
        if args.verbose:
            log.exception("command failed")
        return _error_code(exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())

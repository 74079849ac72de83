"""Command-line entry point: ``photosdf <command> [options]``.

Commands: make-synthetic, train, render, gradcheck, extract-mesh,
bake-textures, eval. Run ``photosdf <command> -h`` for options.
The thread count honors ``PHOTOSDF_THREADS``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .config import Config, config_from_dict, config_to_dict
from .field import FieldStack
from .io import load_dataset, preview_png, write_pfm
from .optim import TrainingDiverged

log = logging.getLogger("photosdf")

GRADCHECK_TOL = 1e-3
RUN_KEYS = ("dataset", "stages")


class UsageError(Exception):
    pass


def load_run_config(path: str | None, profile: str | None, seed: int | None, no_edges: bool) -> tuple[Config, dict]:
    """Module config plus run-level keys (``dataset``, ``stages``)."""
    data: dict = {}
    if path:
        p = Path(path)
        if not p.exists():
            raise UsageError(f"config file {path} not found")
        try:
            data = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(data, dict):
            raise UsageError(f"{path}: config root must be an object")
    run = {k: data.pop(k) for k in RUN_KEYS if k in data}
    try:
        cfg = config_from_dict(data, profile)
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from exc
    if seed is not None:
        cfg.train.seed = seed
    if no_edges:
        cfg.shade.edges = False
    return cfg, run


def _dataset(args, run: dict):
    path = getattr(args, "dataset", None) or run.get("dataset")
    if not path:
        raise UsageError("no dataset given (use --dataset or the config's 'dataset' key)")
    try:
        return load_dataset(path)
    except (FileNotFoundError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def _load_field(path: str):
    if not Path(path).exists():
        raise UsageError(f"checkpoint {path} not found")
    try:
        return load_checkpoint(path)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


# --------------------------------------------------------------------------
# commands


def cmd_make_synthetic(args, cfg: Config, run: dict) -> int:
    from .synthetic import SCENES, make_synthetic

    if args.scene not in SCENES:
        raise UsageError(f"unknown scene {args.scene!r}; choose from {', '.join(SCENES)}")
    if args.views < 1:
        raise UsageError("--views must be >= 1")
    ds = make_synthetic(args.out, args.scene, args.views, args.resolution, cfg.train.seed, cfg)
    print(f"wrote {len(ds)} views to {args.out}")
    return 0


def cmd_train(args, cfg: Config, run: dict) -> int:
    from .train import train_stage2
    from .volrend import stage1_fit

    ds = _dataset(args, run)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(config_to_dict(cfg), indent=1))
    train_views, held_out = ds.split(cfg.train.seed)
    (out / "split.json").write_text(json.dumps({"train": train_views, "held_out": held_out}))
    stages = run.get("stages", {"stage1": True, "stage2": True})
    if args.checkpoint:
        field, extras = _load_field(args.checkpoint)
        sharp = float(torch.exp(extras["log_sharpness"][0])) if "log_sharpness" in extras else None
    else:
        field, sharp = FieldStack(cfg.field, seed=cfg.train.seed), None
    if stages.get("stage1", True):
        field, sharp = stage1_fit(field, ds, cfg, views=train_views, out_dir=out, sharpness=sharp)
        print(f"stage 1 done (sharpness {sharp:.1f})")
    if stages.get("stage2", True):
        field, records = train_stage2(field, ds, cfg, views=train_views, out_dir=out)
        if records:
            print(f"stage 2 done: final loss {records[-1]['total']:.5f}, L = {records[-1]['L']:.4f}")
    save_checkpoint(out / "final.ckpt", field)
    print(f"checkpoint: {out / 'final.ckpt'}")
    return 0


def cmd_render(args, cfg: Config, run: dict) -> int:
    from .shade import render_image

    field, _ = _load_field(args.checkpoint)
    ds = _dataset(args, run)
    out = Path(args.out)
    views = args.views or list(range(len(ds)))
    for i in views:
        if not 0 <= i < len(ds):
            raise UsageError(f"view {i} out of range")
        img, _, _ = render_image(field, ds.views[i].camera, cfg.shade, cfg.trace, cfg.edges)
        arr = img.detach().numpy()
        write_pfm(out / f"render_{i:04d}.pfm", arr)
        preview_png(out / f"render_{i:04d}.png", arr)
    print(f"rendered {len(views)} view(s) to {out}")
    return 0


def cmd_gradcheck(args, cfg: Config, run: dict) -> int:
    from .synthetic import render_views, sample_cameras, scene_field
    from .train import gradcheck

    if args.checkpoint:
        field, _ = _load_field(args.checkpoint)
    else:
        field = FieldStack(cfg.field, seed=cfg.train.seed)
        field.params[-1] = 10.0
    if getattr(args, "dataset", None) or run.get("dataset"):
        view = _dataset(args, run).views[0]
        cam, image = view.camera, view.image
    else:
        cam = sample_cameras(1, 64, cfg.train.seed)[0]
        image = torch.as_tensor(render_views(scene_field("two_tone_sphere"), [cam], cfg)[0])
    report = gradcheck(field, cam, image, cfg, n_coords=args.coords, seed=cfg.train.seed)
    ok = report.max_rel_error <= GRADCHECK_TOL
    print(f"checked {report.coords.size} coordinates, loss {report.loss:.6g}")
    print(f"max relative gradient error: {report.max_rel_error:.3e} ({'ok' if ok else 'FAIL'}, tol {GRADCHECK_TOL:g})")
    return 0 if ok else 1


def cmd_extract_mesh(args, cfg: Config, run: dict) -> int:
    from .export import marching_cubes, write_obj

    field, _ = _load_field(args.checkpoint)
    mesh = marching_cubes(field, args.res or cfg.export.grid_res, cfg.export.bounds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_obj(out / "mesh.obj", mesh)
    print(f"mesh: {len(mesh.vertices)} vertices, {len(mesh.faces)} faces -> {out / 'mesh.obj'}")
    return 0


def cmd_bake_textures(args, cfg: Config, run: dict) -> int:
    from .export import bake_textures, make_uv_atlas, marching_cubes, read_obj, write_asset

    field, _ = _load_field(args.checkpoint)
    if args.mesh:
        mesh = read_obj(args.mesh)
    else:
        mesh = marching_cubes(field, cfg.export.grid_res, cfg.export.bounds)
    asset = bake_textures(field, make_uv_atlas(mesh), args.res or cfg.export.texture_res, cfg.export.samples_per_texel)
    path = write_asset(args.out, asset)
    print(f"asset written to {path}")
    return 0


def cmd_eval(args, cfg: Config, run: dict) -> int:
    from .export import marching_cubes, read_obj
    from .metrics import chamfer_l1, image_psnr, image_ssim
    from .shade import render_image

    result: dict = {}
    ds = None
    if getattr(args, "dataset", None) or run.get("dataset"):
        ds = _dataset(args, run)
    if args.mesh:
        pred_mesh = read_obj(args.mesh)
        field = None
    elif args.checkpoint:
        field, _ = _load_field(args.checkpoint)
        pred_mesh = marching_cubes(field, cfg.export.grid_res, cfg.export.bounds)
    else:
        raise UsageError("eval needs --checkpoint or --mesh")
    gt_path = Path(args.gt_mesh) if args.gt_mesh else (ds.root / "gt_mesh.obj" if ds else None)
    if gt_path is not None:
        if not gt_path.exists():
            raise UsageError(f"ground-truth mesh {gt_path} not found")
        result["chamfer_l1"] = chamfer_l1(pred_mesh, read_obj(gt_path), args.samples, cfg.train.seed)
    if field is not None and ds is not None:
        _, held_out = ds.split(cfg.train.seed)
        per_view = []
        for i in held_out:
            img, _, _ = render_image(field, ds.views[i].camera, cfg.shade, cfg.trace, cfg.edges)
            pred, target = img.detach().numpy(), ds.views[i].image.numpy()
            per_view.append({"view": i, "psnr": image_psnr(pred, target), "ssim": image_ssim(pred, target)})
        result["views"] = per_view
        if per_view:
            result["mean_psnr"] = float(np.mean([v["psnr"] for v in per_view]))
            result["mean_ssim"] = float(np.mean([v["ssim"] for v in per_view]))
    text = json.dumps(result, indent=1)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "eval.json").write_text(text)
    print(text)
    return 0


COMMANDS = {
    "make-synthetic": cmd_make_synthetic,
    "train": cmd_train,
    "render": cmd_render,
    "gradcheck": cmd_gradcheck,
    "extract-mesh": cmd_extract_mesh,
    "bake-textures": cmd_bake_textures,
    "eval": cmd_eval,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config (module sections plus optional 'dataset' and 'stages')")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--profile", choices=["desk", "paper"], default=None, help="size profile (default: desk)")
    common.add_argument("--seed", type=int, default=None, help="overrides train.seed")
    common.add_argument("--no-edges", action="store_true", help="disable edge sampling (ablation)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="photosdf", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-synthetic", parents=[common], help="render a synthetic dataset")
    p.add_argument("--scene", required=True)
    p.add_argument("--views", type=int, default=32)
    p.add_argument("--resolution", type=int, default=96)

    p = sub.add_parser("train", parents=[common], help="two-stage training")
    p.add_argument("--dataset")
    p.add_argument("--checkpoint", help="start from this checkpoint")

    p = sub.add_parser("render", parents=[common], help="render dataset views from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset")
    p.add_argument("--views", type=int, nargs="*")

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the stage-2 loss")
    p.add_argument("--checkpoint")
    p.add_argument("--dataset")
    p.add_argument("--coords", type=int, default=64)

    p = sub.add_parser("extract-mesh", parents=[common], help="marching cubes to OBJ")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--res", type=int)

    p = sub.add_parser("bake-textures", parents=[common], help="mesh + UV atlas + baked textures")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mesh", help="OBJ to bake onto (default: extract one)")
    p.add_argument("--res", type=int)

    p = sub.add_parser("eval", parents=[common], help="held-out PSNR/SSIM and Chamfer-L1")
    p.add_argument("--checkpoint")
    p.add_argument("--mesh", help="evaluate this OBJ instead of a checkpoint's mesh")
    p.add_argument("--dataset")
    p.add_argument("--gt-mesh")
    p.add_argument("--samples", type=int, default=50_000)
    p.set_defaults(out=None)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    threads = os.environ.get("PHOTOSDF_THREADS")
    if threads:
        torch.set_num_threads(int(threads))
    try:
        cfg, run = load_run_config(args.config, args.profile, args.seed, args.no_edges)
        return COMMANDS[args.command](args, cfg, run)
    except UsageError as exc:
        print(f"photosdf {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"photosdf {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"photosdf {args.command}: {exc}; last good parameters were checkpointed", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

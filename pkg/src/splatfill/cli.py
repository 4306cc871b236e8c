"""Command-line entry point: ``splatfill <command> --scene DIR --out DIR [...]``.

Exit status: 0 on success, 1 on invalid input or usage, 2 on numeric failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .config import load_config
from .errors import NumericError, ValidationError
from .metrics import eval_metrics
from .pipeline import (build_stage_model, cluster_views, initial_cloud, load_cloud, run_coarse,
                       run_fine, run_pipeline, save_cloud, write_manifest, _write_renders)
from .renderer import rasterize
from .scene_io import (View, load_scene, read_image_dir, write_depth_pfm, write_mask,
                       write_png)
from .view_select import format_cluster_report
from .warp import build_conditions, make_depth_estimator


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise _UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="splatfill", description="Multi-view consistent 3D inpainting.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--scene", required=True, help="scene directory")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--config", help="config file (defaults to the bundled config)")
        p.add_argument("--seed", type=int, help="override the config seed")
        return p

    common(sub.add_parser("cluster", help="cluster cameras and pick reference views"))
    w = common(sub.add_parser("warp", help="warp a reference view into a target view"))
    w.add_argument("--ref", type=int, required=True)
    w.add_argument("--target", type=int, required=True)
    common(sub.add_parser("coarse", help="multi-view inpainting and coarse fit"))
    f = common(sub.add_parser("fine", help="TG-SDS refinement of a coarse result"))
    f.add_argument("--coarse", help="coarse output directory (default: --out)")
    r = common(sub.add_parser("render", help="render every view of a cloud"))
    r.add_argument("--cloud", help="cloud.bin to render (default: --out/cloud.bin, else the scene's)")
    e = common(sub.add_parser("eval", help="PSNR/SSIM of renders against references"))
    e.add_argument("--renders", help="directory of {id}.png (default: --out/renders)")
    e.add_argument("--references", help="directory of {id}.png (default: the scene images)")
    common(sub.add_parser("run", help="coarse then fine in one go"))
    return parser


def _cmd_cluster(args, cfg, scene, out):
    assignment, refs = cluster_views(scene, cfg)
    path = out / "clusters.txt"
    path.write_text(format_cluster_report(assignment, refs))
    return [path]


def _cmd_warp(args, cfg, scene, out):
    ref, target = scene.view(args.ref), scene.view(args.target)
    if ref.depth is not None:
        ref_depth = ref.depth
    else:
        cloud = initial_cloud(args.scene, scene, cfg)
        ref_depth = rasterize(cloud, ref.pose, ref.intrinsics).depth
    conds = build_conditions(View(ref.id, ref.intrinsics, ref.pose, ref.image, ref.mask),
                             target, ref_depth, make_depth_estimator(cfg.depth_estimator),
                             cfg.depth_condition_source)
    t = target.id
    paths = [out / f"warped_{t}.png", out / f"edges_{t}.png", out / f"depthcond_{t}.pfm",
             out / f"valid_{t}.png"]
    write_png(paths[0], conds.warp.warped_image)
    write_mask(paths[1], conds.edges)
    write_depth_pfm(paths[2], conds.depth)
    write_mask(paths[3], conds.validity)
    return paths


def _cmd_coarse(args, cfg, scene, out):
    source = initial_cloud(args.scene, scene, cfg)
    model = build_stage_model(cfg, args.scene, scene, source)
    _, report = run_coarse(scene, source, model, cfg, out)
    return report.artifacts


def _cmd_fine(args, cfg, scene, out):
    source = initial_cloud(args.scene, scene, cfg)
    model = build_stage_model(cfg, args.scene, scene, source)
    coarse = Path(args.coarse) if args.coarse else out
    _, report = run_fine(scene, coarse, model, cfg, out)
    return report.artifacts


def _cmd_render(args, cfg, scene, out):
    if args.cloud:
        cloud = load_cloud(args.cloud)
    elif (out / "cloud.bin").exists():
        cloud = load_cloud(out / "cloud.bin")
    else:
        cloud = initial_cloud(args.scene, scene, cfg)
        return save_cloud(cloud, out) + _write_renders(cloud, scene, out)
    return _write_renders(cloud, scene, out)


def _cmd_eval(args, cfg, scene, out):
    renders = read_image_dir(args.renders or out / "renders")
    refs = read_image_dir(args.references) if args.references else {v.id: v.image for v in scene.views}
    masks = {v.id: v.mask for v in scene.views}
    report = eval_metrics(renders, refs, masks)
    path = out / "metrics.txt"
    path.write_text(report.to_text())
    print(f"mean psnr {report.mean_psnr:.4f} ssim {report.mean_ssim:.6f}")
    return [path]


def _cmd_run(args, cfg, scene, out):
    reports = run_pipeline(args.scene, cfg, out)
    return [a for r in reports for a in r.artifacts]


_COMMANDS = {"cluster": _cmd_cluster, "warp": _cmd_warp, "coarse": _cmd_coarse,
             "fine": _cmd_fine, "render": _cmd_render, "eval": _cmd_eval, "run": _cmd_run}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError:
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.replace(seed=args.seed)
        scene = load_scene(args.scene)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        artifacts = _COMMANDS[args.command](args, cfg, scene, out)
        write_manifest(out, args.command, cfg, artifacts)
    except NumericError as exc:
        print(f"splatfill: numeric failure: {exc}", file=sys.stderr)
        return 2
    except (ValidationError, KeyError, OSError) as exc:
        print(f"splatfill: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

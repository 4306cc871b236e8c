"""Coarse-to-fine inpainting over a Gaussian cloud, stage by stage through disk."""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .config import PipelineConfig
from .diffusion import Condition, NoiseSchedule, inpaint_multiview
from .errors import NumericError, SceneError, ValidationError
from .losses import LossWeights, depth_loss, rgb_loss, tg_sds_grad, total_loss
from .optim import OptimState, prune_transparent, step_cloud
from .renderer import GaussianCloud, rasterize, render_backward
from .scene_io import (SceneBundle, View, camera_center, load_scene, read_depth_pfm,
                       read_image_dir, read_png, write_depth_pfm, write_png)
from .score_models import PointTarget, TinyAttentionUNet
from .view_select import (ClusterAssignment, ReferenceSet, format_cluster_report, kmeans,
                          select_references)
from .warp import build_conditions, make_depth_estimator

CLOUD_MAGIC = b"GSPC"
CLOUD_VERSION = 1
CLOUD_STRIDE = 14  # xyz, quaternion wxyz, log-scale xyz, opacity logit, rgb


# ------------------------------------------------------------------ cloud io


def save_cloud(cloud: GaussianCloud, out_dir) -> list[Path]:
    """Write ``cloud.txt`` (``x y z r g b`` with 0-255 colours) and the ``cloud.bin`` sidecar."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rgb = np.rint(np.clip(cloud.colors, 0, 1) * 255).astype(int)
    lines = [f"{x:.6f} {y:.6f} {z:.6f} {r} {g} {b}"
             for (x, y, z), (r, g, b) in zip(cloud.positions, rgb)]
    txt = out_dir / "cloud.txt"
    txt.write_text("\n".join(lines) + "\n")
    flat = np.concatenate([cloud.positions, cloud.rotations, cloud.log_scales,
                           cloud.opacity_logits[:, None], cloud.colors], axis=1)
    binp = out_dir / "cloud.bin"
    with open(binp, "wb") as fh:
        fh.write(struct.pack("<4sIII", CLOUD_MAGIC, CLOUD_VERSION, len(cloud), CLOUD_STRIDE))
        fh.write(np.ascontiguousarray(cloud.background, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(flat, dtype="<f4").tobytes())
    return [txt, binp]


def load_cloud(path) -> GaussianCloud:
    """Read a ``cloud.bin`` sidecar."""
    data = Path(path).read_bytes()
    if len(data) < 16:
        raise ValidationError(f"{path}: truncated cloud header")
    magic, version, n, stride = struct.unpack_from("<4sIII", data, 0)
    if magic != CLOUD_MAGIC:
        raise ValidationError(f"{path}: bad cloud magic {magic!r}")
    if version != CLOUD_VERSION or stride != CLOUD_STRIDE:
        raise ValidationError(f"{path}: unsupported cloud version {version} / stride {stride}")
    expected = 16 + 4 * (3 + n * stride)
    if len(data) != expected:
        raise ValidationError(f"{path}: expected {expected} bytes, found {len(data)}")
    bg = np.frombuffer(data, "<f4", 3, 16).astype(np.float64)
    flat = np.frombuffer(data, "<f4", n * stride, 28).astype(np.float64).reshape(n, stride)
    return GaussianCloud(flat[:, 0:3], flat[:, 3:7], flat[:, 7:10], flat[:, 10], flat[:, 11:14], bg)


def load_points_txt(path) -> tuple[np.ndarray, np.ndarray]:
    pts = []
    for no, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 6:
            raise ValidationError(f"{path}:{no}: expected 'x y z r g b'")
        pts.append([float(p) for p in parts])
    if not pts:
        raise ValidationError(f"{path}: no points")
    arr = np.array(pts)
    return arr[:, :3], arr[:, 3:] / 255.0


def cloud_from_points(points, colors, background=(0.0, 0.0, 0.0)) -> GaussianCloud:
    """Isotropic Gaussians sized by the mean distance to their three nearest neighbours."""
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if n == 0:
        raise ValidationError("cannot build a cloud from zero points")
    if n > 1:
        k = min(4, n)
        d, _ = cKDTree(points).query(points, k=k)
        scale = np.maximum(d[:, 1:].mean(axis=1), 1e-4)
    else:
        scale = np.full(1, 0.01)
    return GaussianCloud(
        positions=points,
        rotations=np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        log_scales=np.repeat(np.log(scale)[:, None], 3, axis=1),
        opacity_logits=np.zeros(n),
        colors=np.clip(colors, 0.0, 1.0),
        background=background,
    )


def unproject_view(view: View, stride: int) -> tuple[np.ndarray, np.ndarray]:
    """World points and colours of every ``stride``-th pixel of ``view.depth``."""
    if view.depth is None:
        raise SceneError("no depth map to initialise the cloud from", view.id)
    H, W = view.depth.shape
    v, u = np.mgrid[0:H:stride, 0:W:stride]
    d = view.depth[v, u]
    ok = np.isfinite(d) & (d > 0)
    u, v, d = u[ok], v[ok], d[ok]
    pix = np.stack([u, v, np.ones_like(u)]).astype(np.float64)
    cam = np.linalg.inv(view.intrinsics.matrix) @ pix * d
    R, t = view.pose.rotation, view.pose.translation
    world = (R.T @ (cam - t[:, None])).T
    return world, view.image[v, u]


def initial_cloud(scene_dir, scene: SceneBundle, config: PipelineConfig) -> GaussianCloud:
    """Source Gaussians: ``cloud.bin``, else ``points.txt``, else unprojected depth of the first view."""
    root = Path(scene_dir)
    if (root / "cloud.bin").exists():
        return load_cloud(root / "cloud.bin")
    if (root / "points.txt").exists():
        return cloud_from_points(*load_points_txt(root / "points.txt"))
    return cloud_from_points(*unproject_view(scene.views[0], config.init_stride))


# -------------------------------------------------------------- model setup


def constant_fill_targets(rendered: dict, masks: dict, fill: float = 0.5) -> dict:
    return {vid: np.where(np.asarray(masks[vid])[..., None] > 0, fill, img)
            for vid, img in rendered.items()}


def make_score_model(config: PipelineConfig, scene_dir, rendered: dict, masks: dict):
    """Build the configured noise predictor.

    ``point_target`` reads ``x0*`` from ``point_target_image`` (a PNG file
    used for every view, or a directory of ``{id}.png``; relative paths are
    resolved against the scene directory). An empty path selects the
    constant-fill target: the source render with masked pixels set to 0.5.
    """
    schedule = NoiseSchedule(config.num_train_timesteps)
    if config.score_model == "tiny_attention_unet":
        if config.tiny_unet_weights:
            path = Path(scene_dir) / config.tiny_unet_weights
            return TinyAttentionUNet.from_file(path, schedule)
        return TinyAttentionUNet(schedule=schedule)
    if config.score_model != "point_target":
        raise ValidationError(f"unknown score model {config.score_model!r}")
    if not config.point_target_image:
        return PointTarget(constant_fill_targets(rendered, masks), schedule)
    path = Path(scene_dir) / config.point_target_image
    if path.is_dir():
        return PointTarget(read_image_dir(path), schedule)
    if not path.exists():
        raise ValidationError(f"point_target image {path} does not exist")
    return PointTarget(read_png(path), schedule)


def cluster_views(scene: SceneBundle, config: PipelineConfig) -> tuple[ClusterAssignment, ReferenceSet]:
    centers = np.array([camera_center(v.pose) for v in scene.views])
    assignment = kmeans(centers, config.k_clusters, config.seed, view_ids=scene.ids)
    return assignment, select_references(assignment, centers)


# ------------------------------------------------------------------- stages


@dataclass
class StageReport:
    stage: str
    iterations: int
    losses: dict = field(default_factory=dict)
    wall_time: float = 0.0
    artifacts: list = field(default_factory=list)


def _log_line(it, l_rgb, l_depth, gradnorm, total) -> str:
    return f"{it:6d} {l_rgb:14.8e} {l_depth:14.8e} {gradnorm:14.8e} {total:14.8e}"


def _render_all(cloud, scene: SceneBundle):
    outs = {v.id: rasterize(cloud, v.pose, v.intrinsics) for v in scene.views}
    return {k: o.color for k, o in outs.items()}, {k: o.depth for k, o in outs.items()}


def _write_renders(cloud, scene, out_dir) -> list[Path]:
    colors, depths = _render_all(cloud, scene)
    paths = []
    for vid in scene.ids:
        p = out_dir / "renders" / f"{vid}.png"
        q = out_dir / "depths" / f"{vid}.pfm"
        p.parent.mkdir(parents=True, exist_ok=True)
        q.parent.mkdir(parents=True, exist_ok=True)
        write_png(p, np.clip(colors[vid], 0.0, 1.0))
        write_depth_pfm(q, depths[vid])
        paths += [p, q]
    return paths


def _photometric_step(cloud, view, target, depth_target, weights):
    """Forward pass plus rgb/depth losses and their raster gradients."""
    out = rasterize(cloud, view.pose, view.intrinsics)
    l_rgb, g_rgb = rgb_loss(out.color, target, weights.lambda_dssim)
    valid = np.isfinite(depth_target) & (depth_target > 0)
    if weights.lambda_depth > 0:
        l_d, g_d, _ = depth_loss(out.depth, depth_target, valid)
    else:
        l_d, g_d = 0.0, np.zeros(out.depth.shape)
    return out, l_rgb, g_rgb, l_d, g_d


def run_coarse(scene: SceneBundle, cloud: GaussianCloud, model, config: PipelineConfig,
               out_dir, clusters=None) -> tuple[GaussianCloud, StageReport]:
    """Multi-view inpainting of the source renders, then fit the cloud to them.

    Writes ``inpainted/``, ``depth_targets/``, ``renders/``, ``depths/``,
    ``cloud.txt``/``cloud.bin``, ``clusters.txt`` and ``coarse_log.txt``.
    """
    start = time.perf_counter()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    assignment, refs = clusters or cluster_views(scene, config)
    schedule = NoiseSchedule(config.num_train_timesteps)
    estimator = make_depth_estimator(config.depth_estimator)
    weights = LossWeights.from_config(config)

    src_colors, src_depths = _render_all(cloud, scene)
    masks = {v.id: v.mask for v in scene.views}
    inpainted = inpaint_multiview(
        src_colors, masks, refs.reference_view_ids, model, schedule, config.ddim_steps,
        config.lambda_a, scene.prompts.positive, scene.prompts.negative, config.guidance_scale)

    artifacts = []
    cl = out_dir / "clusters.txt"
    cl.write_text(format_cluster_report(assignment, refs))
    artifacts.append(cl)
    targets, depth_targets = {}, {}
    for vid in scene.ids:
        p = out_dir / "inpainted" / f"{vid}.png"
        p.parent.mkdir(exist_ok=True)
        write_png(p, np.clip(inpainted[vid], 0.0, 1.0))
        # targets go through the same 8-bit/float32 files the fine stage reads
        targets[vid] = read_png(p)
        q = out_dir / "depth_targets" / f"{vid}.pfm"
        q.parent.mkdir(exist_ok=True)
        write_depth_pfm(q, estimator.estimate(targets[vid], src_depths[vid]))
        depth_targets[vid] = read_depth_pfm(q)
        artifacts += [p, q]

    cloud = cloud.copy()
    state = OptimState.for_cloud(config)
    log = []
    comps = {"rgb": 0.0, "depth": 0.0, "tgsds": 0.0}
    views = scene.views
    for it in range(config.coarse_iters):
        view = views[it % len(views)]
        out, l_rgb, g_rgb, l_d, g_d = _photometric_step(
            cloud, view, targets[view.id], depth_targets[view.id], weights)
        comps = {"rgb": l_rgb, "depth": l_d, "tgsds": 0.0}
        total = total_loss(comps, weights)
        if not np.isfinite(total):
            raise NumericError(f"coarse: non-finite loss at iteration {it}")
        grads = render_backward(cloud, view.pose, view.intrinsics, weights.lambda_rgb * g_rgb,
                                weights.lambda_depth * g_d, forward=out)
        step_cloud(cloud, state, grads)
        if config.prune_interval and (it + 1) % config.prune_interval == 0:
            cloud = prune_transparent(cloud, state, config.prune_opacity)
        log.append(_log_line(it, l_rgb, l_d, 0.0, total))

    artifacts += _finish(cloud, scene, out_dir, "coarse", log)
    report = StageReport("coarse", config.coarse_iters, {**comps, "total": total_loss(comps, weights)},
                         time.perf_counter() - start, artifacts)
    return cloud, report


def _finish(cloud, scene, out_dir, stage, log) -> list[Path]:
    paths = save_cloud(cloud, out_dir)
    paths += _write_renders(cloud, scene, out_dir)
    lp = out_dir / f"{stage}_log.txt"
    lp.write_text("\n".join(log) + ("\n" if log else ""))
    return paths + [lp]


def run_fine(scene: SceneBundle, coarse_dir, model, config: PipelineConfig, out_dir,
             clusters=None) -> tuple[GaussianCloud, StageReport]:
    """Refine the coarse cloud with TG-SDS plus the photometric and depth losses.

    Reads ``cloud.bin``, ``inpainted/`` and ``depth_targets/`` from
    ``coarse_dir``. Views are visited round-robin by id; each is conditioned
    on edges and depth warped from its cluster's reference view.
    """
    start = time.perf_counter()
    coarse_dir, out_dir = Path(coarse_dir), Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    assignment, refs = clusters or cluster_views(scene, config)
    schedule = NoiseSchedule(config.num_train_timesteps)
    estimator = make_depth_estimator(config.depth_estimator)
    weights = LossWeights.from_config(config)
    try:
        cloud = load_cloud(coarse_dir / "cloud.bin")
        targets = {vid: read_png(coarse_dir / "inpainted" / f"{vid}.png") for vid in scene.ids}
        depth_targets = {vid: read_depth_pfm(coarse_dir / "depth_targets" / f"{vid}.pfm")
                         for vid in scene.ids}
    except FileNotFoundError as exc:
        raise ValidationError(f"coarse output incomplete: {exc.filename} missing") from None

    rng = np.random.default_rng([config.seed, 1])
    state = OptimState.for_cloud(config)
    log = []
    comps = {"rgb": 0.0, "depth": 0.0, "tgsds": 0.0}
    views = scene.views
    for it in range(config.fine_iters):
        view = views[it % len(views)]
        out, l_rgb, g_rgb, l_d, g_d = _photometric_step(
            cloud, view, targets[view.id], depth_targets[view.id], weights)
        g_color = weights.lambda_rgb * g_rgb
        gradnorm = 0.0
        if weights.lambda_tgsds > 0 and view.mask.any():
            ref_id = refs.reference_for(assignment.assign_cluster(view.id))
            ref = scene.view(ref_id)
            ref_view = View(ref.id, ref.intrinsics, ref.pose, targets[ref_id], ref.mask)
            ref_depth = (out.depth if ref_id == view.id
                         else rasterize(cloud, ref.pose, ref.intrinsics).depth)
            conds = build_conditions(ref_view, view, ref_depth, estimator,
                                     config.depth_condition_source)
            cond = Condition(text=scene.prompts.positive, negative_text=scene.prompts.negative,
                             guidance_scale=config.guidance_scale,
                             cond_scale_texture=config.cond_scale_texture,
                             cond_scale_depth=config.cond_scale_depth, view_id=view.id)
            g_sds, _ = tg_sds_grad(out.color, view.mask, conds.edges, conds.depth, conds.validity,
                                   model, cond, schedule, rng, config.t_min_frac,
                                   config.t_max_frac, config.sds_weighting)
            gradnorm = float(np.abs(g_sds).mean())
            g_color = g_color + weights.lambda_tgsds * g_sds
        comps = {"rgb": l_rgb, "depth": l_d, "tgsds": gradnorm}
        total = total_loss(comps, weights)
        if not np.isfinite(total):
            raise NumericError(f"fine: non-finite loss at iteration {it}")
        grads = render_backward(cloud, view.pose, view.intrinsics, g_color,
                                weights.lambda_depth * g_d, forward=out)
        step_cloud(cloud, state, grads)
        if config.prune_interval and (it + 1) % config.prune_interval == 0:
            cloud = prune_transparent(cloud, state, config.prune_opacity)
        log.append(_log_line(it, l_rgb, l_d, gradnorm, total))

    artifacts = _finish(cloud, scene, out_dir, "fine", log)
    report = StageReport("fine", config.fine_iters, {**comps, "total": total_loss(comps, weights)},
                         time.perf_counter() - start, artifacts)
    return cloud, report


def run_pipeline(scene_dir, config: PipelineConfig, out_dir) -> list[StageReport]:
    """One-shot run: coarse into ``out_dir/coarse``, then fine into ``out_dir``."""
    scene = load_scene(scene_dir)
    out_dir = Path(out_dir)
    coarse_dir = out_dir / "coarse"
    source = initial_cloud(scene_dir, scene, config)
    model = build_stage_model(config, scene_dir, scene, source)
    clusters = cluster_views(scene, config)
    _, coarse = run_coarse(scene, source, model, config, coarse_dir, clusters)
    _, fine = run_fine(scene, coarse_dir, model, config, out_dir, clusters)
    return [coarse, fine]


def build_stage_model(config, scene_dir, scene: SceneBundle, source: GaussianCloud):
    """Score model for a scene; the constant-fill oracle is built from the source renders."""
    colors, _ = _render_all(source, scene)
    return make_score_model(config, scene_dir, colors, {v.id: v.mask for v in scene.views})


def write_manifest(out_dir, command: str, config: PipelineConfig, artifacts) -> Path:
    """Record config hash, seed and artifacts in ``run.json``, merging earlier commands."""
    out_dir = Path(out_dir)
    path = out_dir / "run.json"
    manifest = {"commands": {}}
    if path.exists():
        try:
            manifest = json.loads(path.read_text())
        except json.JSONDecodeError:
            manifest = {"commands": {}}
    rel = sorted({str(Path(a).resolve().relative_to(out_dir.resolve())) for a in artifacts})
    manifest.setdefault("commands", {})[command] = {
        "config_sha256": config.digest(),
        "seed": config.seed,
        "artifacts": rel,
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path

"""Synthetic scenes with known ground truth: a textured plane plus an occluder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .renderer import GaussianCloud, rasterize
from .scene_io import CameraIntrinsics, CameraPose, InpaintPrompts, SceneBundle, View


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0)) -> CameraPose:
    """World-to-camera pose for a camera at ``eye`` looking at ``target`` (+z forward, +y down)."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    return CameraPose(R, -R @ eye)


def plane_cloud(n: int = 16, half_extent: float = 1.2, amplitude: float = 0.1,
                background=(0.5, 0.5, 0.5)) -> GaussianCloud:
    """``n x n`` flat Gaussians tiling the z = 0 plane with a smooth colour texture."""
    xs = np.linspace(-half_extent, half_extent, n)
    X, Y = np.meshgrid(xs, xs)
    pos = np.c_[X.ravel(), Y.ravel(), np.zeros(n * n)]
    spacing = xs[1] - xs[0]
    phase = np.stack([np.sin(2.1 * pos[:, 0] + 0.3), np.cos(1.7 * pos[:, 1] - 0.5),
                      np.sin(1.3 * (pos[:, 0] + pos[:, 1]))], axis=1)
    colors = 0.5 + amplitude * phase
    return GaussianCloud(
        positions=pos,
        rotations=np.tile([1.0, 0.0, 0.0, 0.0], (n * n, 1)),
        log_scales=np.tile(np.log([0.6 * spacing, 0.6 * spacing, 0.01]), (n * n, 1)),
        opacity_logits=np.full(n * n, 4.0),
        colors=colors,
        background=background,
    )


def occluder_cloud(center=(0.0, 0.0, 0.8), color=(0.85, 0.25, 0.25), spacing=0.08,
                   sigma=0.06) -> GaussianCloud:
    """A compact 3x3x2 block of opaque Gaussians."""
    g = np.arange(3) - 1.0
    gx, gy, gz = np.meshgrid(g, g, [0.0, 1.0], indexing="ij")
    pos = np.c_[gx.ravel(), gy.ravel(), gz.ravel()] * spacing + np.asarray(center)
    n = len(pos)
    return GaussianCloud(
        positions=pos,
        rotations=np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        log_scales=np.full((n, 3), np.log(sigma)),
        opacity_logits=np.full(n, 4.0),
        colors=np.tile(color, (n, 1)),
    )


def concat_clouds(a: GaussianCloud, b: GaussianCloud) -> GaussianCloud:
    return GaussianCloud(
        positions=np.r_[a.positions, b.positions],
        rotations=np.r_[a.rotations, b.rotations],
        log_scales=np.r_[a.log_scales, b.log_scales],
        opacity_logits=np.r_[a.opacity_logits, b.opacity_logits],
        colors=np.r_[a.colors, b.colors],
        background=a.background,
    )


@dataclass(frozen=True, eq=False)
class ToyScene:
    scene: SceneBundle
    cloud: GaussianCloud  # source Gaussians, plane + occluder
    source_renders: dict  # {id: (H, W, 3)}
    source_depths: dict  # {id: (H, W)}
    oracle_targets: dict  # source renders with the mask filled by ``fill``


def toy_scene(n_views: int = 8, size: int = 32, focal: float = 40.0, radius: float = 0.5,
              distance: float = 3.0, mask_threshold: float = 0.02, fill: float = 0.5,
              plane_n: int = 16) -> ToyScene:
    """Cameras on a ring facing a textured plane with an occluder in front of it.

    Masks cover pixels where the occluder's accumulated opacity exceeds
    ``mask_threshold``; oracle targets replace those pixels by ``fill``.
    """
    plane = plane_cloud(plane_n)
    occ = occluder_cloud()
    cloud = concat_clouds(plane, occ)
    intr = CameraIntrinsics(size, size, focal, focal, size / 2, size / 2)
    views, renders, depths, targets = [], {}, {}, {}
    for i in range(n_views):
        a = 2 * np.pi * i / n_views
        eye = (radius * np.cos(a), radius * np.sin(a), distance)
        pose = look_at(eye)
        out = rasterize(cloud, pose, intr)
        occ_alpha = 1.0 - rasterize(occ, pose, intr).final_transmittance
        mask = (occ_alpha > mask_threshold).astype(np.uint8)
        image = np.clip(out.color, 0.0, 1.0)
        renders[i] = image
        depths[i] = out.depth
        targets[i] = np.where(mask[..., None] > 0, fill, image)
        views.append(View(i, intr, pose, image, mask, out.depth))
    prompts = InpaintPrompts("a plain grey wall", "red box", "the red box")
    return ToyScene(SceneBundle(tuple(views), prompts), cloud, renders, depths, targets)

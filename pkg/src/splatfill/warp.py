"""Reference-to-target forward warping, edge maps and depth alignment."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np
from scipy import ndimage

from .errors import NumericError, ValidationError
from .scene_io import CameraIntrinsics, CameraPose, View

NEAR_PLANE = 0.01


@dataclass(frozen=True, eq=False)
class WarpResult:
    warped_image: np.ndarray  # (H, W, 3), zero where invalid
    validity: np.ndarray  # (H, W) uint8
    warped_depth: np.ndarray  # (H, W), target-camera z, zero where invalid
    source_index: np.ndarray  # (H, W) flat source pixel index, -1 where invalid


@dataclass(frozen=True)
class AlignmentParams:
    scale: float
    shift: float

    def apply(self, depth):
        return self.scale * np.asarray(depth) + self.shift


def project_pixels(depth: np.ndarray, src_pose: CameraPose, src_intr: CameraIntrinsics,
                   dst_pose: CameraPose, dst_intr: CameraIntrinsics):
    """Map every source pixel with its depth into the destination camera.

    Returns continuous destination coordinates ``(u, v)`` and destination
    camera depth ``z``, each flattened in row-major source order.
    """
    H, W = depth.shape
    v, u = np.mgrid[0:H, 0:W]
    d = depth.ravel().astype(np.float64)
    pix = np.stack([u.ravel(), v.ravel(), np.ones(H * W)]).astype(np.float64)
    cam = np.linalg.inv(src_intr.matrix) @ pix * d  # K^-1 [q, D]
    rel = dst_pose.matrix @ np.linalg.inv(src_pose.matrix)  # P_i P_ref^-1
    cam_dst = rel[:3, :3] @ cam + rel[:3, 3:4]
    z = cam_dst[2]
    with np.errstate(divide="ignore", invalid="ignore"):
        proj = dst_intr.matrix @ cam_dst
        u_dst = proj[0] / z
        v_dst = proj[1] / z
    return u_dst, v_dst, z


def warp_view(ref: View, ref_depth: np.ndarray, target_pose: CameraPose,
              target_intr: CameraIntrinsics) -> WarpResult:
    """Forward-splat ``ref`` into the target camera with a nearest-pixel z-buffer."""
    ref_depth = np.asarray(ref_depth, dtype=np.float64)
    if ref_depth.shape != ref.intrinsics.shape:
        raise ValidationError(f"reference depth shape {ref_depth.shape} does not match view {ref.id}")
    src_ok = np.isfinite(ref_depth) & (ref_depth > 0)
    if not src_ok.any():
        raise ValidationError(f"view {ref.id}: no valid source depth to warp")
    u, v, z = project_pixels(np.where(src_ok, ref_depth, 0.0), ref.pose, ref.intrinsics,
                             target_pose, target_intr)
    H, W = target_intr.height, target_intr.width
    col = np.floor(u + 0.5)
    row = np.floor(v + 0.5)
    keep = (src_ok.ravel() & np.isfinite(z) & (z > NEAR_PLANE)
            & (col >= 0) & (col < W) & (row >= 0) & (row < H))
    src = np.flatnonzero(keep)
    dst = (row[src] * W + col[src]).astype(np.int64)
    zk = z[src]
    # nearest depth first, earlier scan order breaks ties; first hit per pixel wins
    order = np.lexsort((src, zk))
    dst_sorted = dst[order]
    _, first = np.unique(dst_sorted, return_index=True)
    winners = order[first]

    image = np.zeros((H * W, 3))
    depth = np.zeros(H * W)
    valid = np.zeros(H * W, dtype=np.uint8)
    source_index = np.full(H * W, -1, dtype=np.int64)
    image[dst[winners]] = ref.image.reshape(-1, 3)[src[winners]]
    depth[dst[winners]] = zk[winners]
    valid[dst[winners]] = 1
    source_index[dst[winners]] = src[winners]
    return WarpResult(image.reshape(H, W, 3), valid.reshape(H, W), depth.reshape(H, W),
                      source_index.reshape(H, W))


# --------------------------------------------------------------------- canny

def _gaussian_kernel5(sigma=1.4):
    x = np.arange(-2, 3, dtype=np.float64)
    g = np.exp(-(x**2) / (2 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


_SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)


def _neighbors(mag, dr, dc):
    """``mag[r + dr, c + dc]`` with zero padding outside the image."""
    padded = np.pad(mag, 1)
    H, W = mag.shape
    return padded[1 + dr:1 + dr + H, 1 + dc:1 + dc + W]


def canny_edges(image: np.ndarray, low: float = 0.1, high: float = 0.2) -> np.ndarray:
    """Binary Canny edge map (uint8) with thresholds relative to the peak gradient."""
    image = np.asarray(image, dtype=np.float64)
    gray = image @ np.array([0.299, 0.587, 0.114]) if image.ndim == 3 else image
    blurred = ndimage.correlate(gray, _gaussian_kernel5(), mode="reflect")
    gx = ndimage.correlate(blurred, _SOBEL_X, mode="nearest")
    gy = ndimage.correlate(blurred, _SOBEL_X.T, mode="nearest")
    mag = np.hypot(gx, gy)
    peak = mag.max()
    # rounding noise on a flat image is not an edge; relative floor keeps scale invariance
    if peak <= 1e-10 * np.abs(gray).max():
        return np.zeros(gray.shape, dtype=np.uint8)

    angle = np.rad2deg(np.arctan2(gy, gx)) % 180.0
    horiz = (angle < 22.5) | (angle >= 157.5)
    diag = (angle >= 22.5) & (angle < 67.5)
    vert = (angle >= 67.5) & (angle < 112.5)
    anti = (angle >= 112.5) & (angle < 157.5)
    # keep if >= the neighbour behind and > the neighbour ahead, so plateaus
    # two pixels wide thin to one; tol absorbs rounding noise in ties
    tol = 1e-9 * peak
    keep = np.zeros(gray.shape, dtype=bool)
    for sel, (dr, dc) in ((horiz, (0, 1)), (vert, (1, 0)), (diag, (1, 1)), (anti, (1, -1))):
        behind = _neighbors(mag, -dr, -dc)
        ahead = _neighbors(mag, dr, dc)
        keep |= sel & (mag >= behind - tol) & (mag > ahead + tol)
    thin = np.where(keep, mag, 0.0)

    strong = thin >= high * peak
    candidate = thin >= low * peak
    labels, n = ndimage.label(candidate, structure=np.ones((3, 3)))
    if n == 0:
        return np.zeros(gray.shape, dtype=np.uint8)
    linked = np.zeros(n + 1, dtype=bool)
    linked[np.unique(labels[strong])] = True
    linked[0] = False
    return linked[labels].astype(np.uint8)


# ----------------------------------------------------------------- alignment


def align_depth_least_squares(mono, rendered, valid=None) -> AlignmentParams:
    """Closed-form ``(s, b)`` minimising ``sum (s * mono + b - rendered)^2`` over valid pixels."""
    mono = np.asarray(mono, dtype=np.float64)
    rendered = np.asarray(rendered, dtype=np.float64)
    if mono.shape != rendered.shape:
        raise ValidationError("mono and rendered depth shapes differ")
    sel = np.ones(mono.shape, bool) if valid is None else np.asarray(valid).astype(bool)
    m = mono[sel]
    r = rendered[sel]
    if m.size < 2:
        raise NumericError("depth alignment needs at least two valid pixels")
    # normal equations [[Smm, Sm], [Sm, n]] [s, b] = [Smr, Sr], solved centred
    m_mean, r_mean = m.mean(), r.mean()
    dm = m - m_mean
    smm = float(dm @ dm)
    if smm <= 1e-24 * max(1.0, m_mean**2) * m.size:
        raise NumericError("depth alignment is degenerate: monocular depth is constant")
    s = float(dm @ (r - r_mean)) / smm
    b = float(r_mean - s * m_mean)
    return AlignmentParams(s, b)


# ----------------------------------------------------------- depth estimators


class DepthEstimator(Protocol):
    def estimate(self, image: np.ndarray, hint: np.ndarray | None = None) -> np.ndarray: ...


class RenderedPassthrough:
    """Returns the geometric depth handed in as ``hint`` (e.g. a rendered depth).

    Non-positive hint pixels (holes) are filled with the mean positive depth so
    the output stays strictly positive.
    """

    name = "rendered_passthrough"

    def estimate(self, image, hint=None):
        if hint is None:
            raise ValidationError("rendered_passthrough needs a depth hint")
        hint = np.asarray(hint, dtype=np.float64)
        if hint.shape != np.asarray(image).shape[:2]:
            raise ValidationError("depth hint does not match the image size")
        ok = np.isfinite(hint) & (hint > 0)
        if not ok.any():
            raise ValidationError("depth hint has no positive pixels")
        return np.where(ok, hint, hint[ok].mean())


class ConstantPlane:
    """Depth as an affine function of the pixel row, ``offset + slope * row``."""

    name = "constant_plane"

    def __init__(self, offset: float = 1.0, slope: float = 0.01):
        if offset <= 0:
            raise ValidationError("constant_plane offset must be positive")
        self.offset = offset
        self.slope = slope

    def estimate(self, image, hint=None):
        H, W = np.asarray(image).shape[:2]
        rows = np.arange(H, dtype=np.float64)[:, None]
        out = np.broadcast_to(self.offset + self.slope * rows, (H, W)).copy()
        if np.any(out <= 0):
            raise NumericError("constant_plane produced non-positive depth")
        return out


def make_depth_estimator(name: str) -> DepthEstimator:
    if name == "rendered_passthrough":
        return RenderedPassthrough()
    if name == "constant_plane":
        return ConstantPlane()
    raise ValidationError(f"unknown depth estimator {name!r}")


@dataclass(frozen=True, eq=False)
class Conditions:
    edges: np.ndarray  # C'_i, uint8
    depth: np.ndarray  # D'_i
    validity: np.ndarray  # uint8
    warp: WarpResult


def build_conditions(ref: View, target: View, rendered_ref_depth: np.ndarray,
                     estimator: DepthEstimator, depth_source: str = "estimator") -> Conditions:
    """Texture and depth conditions for ``target`` warped from its cluster reference.

    The reference is warped with its monocular depth aligned to the rendered
    depth. ``depth_source`` picks ``D'`` from the estimator run on the warped
    image (``"estimator"``) or the exact warped depth (``"warped"``).
    """
    rendered_ref_depth = np.asarray(rendered_ref_depth, dtype=np.float64)
    mono = estimator.estimate(ref.image, rendered_ref_depth)
    ok = np.isfinite(rendered_ref_depth) & (rendered_ref_depth > 0)
    try:
        params = align_depth_least_squares(mono, rendered_ref_depth, ok)
        ref_depth = params.apply(mono)
    except NumericError:
        # a constant monocular map carries no relative depth; fall back to rendered depth
        ref_depth = rendered_ref_depth
    warp = warp_view(ref, ref_depth, target.pose, target.intrinsics)
    edges = canny_edges(warp.warped_image)
    if depth_source == "warped":
        depth = warp.warped_depth
    elif depth_source == "estimator":
        depth = estimator.estimate(warp.warped_image, warp.warped_depth)
    else:
        raise ValidationError(f"unknown depth condition source {depth_source!r}")
    return Conditions(edges, depth, warp.validity, warp)

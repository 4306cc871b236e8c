"""Photometric, depth and score-distillation losses with analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .diffusion import Condition, NoiseSchedule, ScoreModel, guided_noise
from .errors import ValidationError
from .warp import AlignmentParams, align_depth_least_squares

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


@dataclass(frozen=True)
class LossWeights:
    lambda_rgb: float = 1.0
    lambda_depth: float = 0.05
    lambda_tgsds: float = 0.01
    lambda_dssim: float = 0.2

    def __post_init__(self):
        for name in ("lambda_rgb", "lambda_depth", "lambda_tgsds", "lambda_dssim"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValidationError(f"{name} must be finite and non-negative")
        if self.lambda_dssim > 1:
            raise ValidationError("lambda_dssim must lie in [0, 1]")

    @classmethod
    def from_config(cls, cfg) -> "LossWeights":
        return cls(cfg.lambda_rgb, cfg.lambda_depth, cfg.lambda_tgsds, cfg.lambda_dssim)


@dataclass(frozen=True, eq=False)
class SdsSample:
    t: int
    epsilon: np.ndarray
    predicted: np.ndarray
    weight: float


def _as_pixel_mask(mask, shape):
    m = np.asarray(mask).astype(bool)
    if m.shape != shape[:2]:
        raise ValidationError(f"mask shape {m.shape} does not match raster {shape}")
    return m


# ------------------------------------------------------------------------ L1


def l1_loss(a, b, mask=None) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch {a.shape} vs {b.shape}")
    diff = np.abs(a - b)
    if mask is None:
        return float(diff.mean())
    m = _as_pixel_mask(mask, a.shape)
    if not m.any():
        raise ValidationError("l1_loss over an empty mask")
    return float(diff[m].mean())


def l1_grad(a, b, mask=None) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    g = np.sign(a - np.asarray(b, dtype=np.float64))
    if mask is None:
        return g / a.size
    m = _as_pixel_mask(mask, a.shape)
    n = m.sum() * (a.size // m.size)
    m = m.reshape(m.shape + (1,) * (a.ndim - 2))
    return g * m / n


# ---------------------------------------------------------------------- SSIM


def _gauss1d(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(x, g):
    """Separable 'valid' correlation over the first two axes."""
    y = sliding_window_view(x, len(g), axis=0) @ g
    return sliding_window_view(y, len(g), axis=1) @ g


def _filter_valid_adjoint(m, g):
    k = len(g) - 1
    pad = [(k, k), (k, k)] + [(0, 0)] * (m.ndim - 2)
    return _filter_valid(np.pad(m, pad), g[::-1])


def _as_hwc(x):
    x = np.asarray(x, dtype=np.float64)
    return x[..., None] if x.ndim == 2 else x


def _ssim_terms(a, b):
    g = _gauss1d()
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ValidationError(f"image {a.shape[:2]} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    saa = _filter_valid(a * a, g) - mu_a**2
    sbb = _filter_valid(b * b, g) - mu_b**2
    sab = _filter_valid(a * b, g) - mu_a * mu_b
    num1 = 2 * mu_a * mu_b + SSIM_C1
    num2 = 2 * sab + SSIM_C2
    den1 = mu_a**2 + mu_b**2 + SSIM_C1
    den2 = saa + sbb + SSIM_C2
    return g, mu_a, mu_b, num1, num2, den1, den2


def ssim_map(a, b) -> np.ndarray:
    """SSIM at every valid window position and channel, shape (H-10, W-10, C)."""
    _, _, _, num1, num2, den1, den2 = _ssim_terms(_as_hwc(a), _as_hwc(b))
    return (num1 * num2) / (den1 * den2)


def window_center_mask(mask) -> np.ndarray:
    """Restrict a pixel mask to the centres of valid SSIM windows."""
    r = SSIM_WINDOW // 2
    return np.asarray(mask).astype(bool)[r:-r, r:-r]


def ssim(a, b, mask=None) -> float:
    """Mean SSIM over window positions (and channels); ``mask`` keeps windows whose centre is masked."""
    smap = ssim_map(a, b)
    if mask is None:
        return float(smap.mean())
    m = window_center_mask(mask)
    if not m.any():
        raise ValidationError("no SSIM window centre inside the mask")
    return float(smap[m].mean())


def dssim_loss(a, b) -> float:
    return (1.0 - ssim(a, b)) / 2.0


def dssim_grad(a, b) -> np.ndarray:
    """Gradient of :func:`dssim_loss` with respect to ``a``."""
    a_in = np.asarray(a)
    a, b = _as_hwc(a), _as_hwc(b)
    g, mu_a, mu_b, num1, num2, den1, den2 = _ssim_terms(a, b)
    n = num1.size
    # d mean(S) / d (per-window statistic); S = num1 num2 / (den1 den2)
    inv = 1.0 / (den1 * den2)
    d_mu_a = (2 * mu_b * num2 * den1 - 2 * mu_a * num1 * num2) * inv / den1
    d_saa = -num1 * num2 * inv / den2
    d_sab = 2 * num1 * inv
    # statistics as functions of raw moments m1 = F(a), m2 = F(a^2), m12 = F(ab)
    d_m1 = d_mu_a - 2 * mu_a * d_saa - mu_b * d_sab
    d_m2 = d_saa
    d_m12 = d_sab
    grad_ssim = (_filter_valid_adjoint(d_m1, g)
                 + 2 * a * _filter_valid_adjoint(d_m2, g)
                 + b * _filter_valid_adjoint(d_m12, g)) / n
    return (-0.5 * grad_ssim).reshape(a_in.shape)


# ------------------------------------------------------------ stage losses


def rgb_loss(rendered, target, lambda_dssim: float = 0.2):
    """``(1 - lambda) L1 + lambda D-SSIM`` and its gradient w.r.t. ``rendered``."""
    loss = 0.0
    grad = np.zeros(np.shape(rendered))
    if lambda_dssim < 1.0:
        loss += (1.0 - lambda_dssim) * l1_loss(rendered, target)
        grad += (1.0 - lambda_dssim) * l1_grad(rendered, target)
    if lambda_dssim > 0.0:
        loss += lambda_dssim * dssim_loss(rendered, target)
        grad += lambda_dssim * dssim_grad(rendered, target)
    return loss, grad


def depth_loss(rendered_depth, mono_depth, valid=None):
    """L1 between rendered depth and least-squares aligned monocular depth.

    Returns ``(loss, grad, params)``; the alignment is held fixed in the gradient.
    """
    rendered_depth = np.asarray(rendered_depth, dtype=np.float64)
    valid = np.ones(rendered_depth.shape, bool) if valid is None else np.asarray(valid).astype(bool)
    params: AlignmentParams = align_depth_least_squares(mono_depth, rendered_depth, valid)
    aligned = params.apply(mono_depth)
    return l1_loss(rendered_depth, aligned, valid), l1_grad(rendered_depth, aligned, valid), params


def sample_timestep(rng, schedule: NoiseSchedule, t_min_frac=0.02, t_max_frac=0.98) -> int:
    lo = max(1, int(np.ceil(t_min_frac * schedule.T)))
    hi = int(np.floor(t_max_frac * schedule.T))
    return int(rng.integers(lo, hi + 1))


def sds_weight(schedule: NoiseSchedule, t: int, weighting: str = "one_minus_alpha_bar") -> float:
    if weighting == "constant":
        return 1.0
    if weighting == "one_minus_alpha_bar":
        return float(1.0 - schedule.alpha_bar[t])
    raise ValidationError(f"unknown SDS weighting {weighting!r}")


def sds_grad(x, model: ScoreModel, cond: Condition, schedule: NoiseSchedule, rng,
             t_min_frac=0.02, t_max_frac=0.98, weighting="one_minus_alpha_bar"):
    """Score-distillation gradient ``w(t) (eps_hat - eps)`` with respect to ``x``."""
    x = np.asarray(x, dtype=np.float64)
    t = sample_timestep(rng, schedule, t_min_frac, t_max_frac)
    eps = rng.standard_normal(x.shape)
    ab = schedule.alpha_bar[t]
    x_t = np.sqrt(ab) * x + np.sqrt(1.0 - ab) * eps
    eps_hat = guided_noise(model, x_t, t, cond)
    w = sds_weight(schedule, t, weighting)
    return w * (eps_hat - eps), SdsSample(t, eps, eps_hat, w)


def tg_sds_grad(x, mask, edge_map, depth_map, validity, model: ScoreModel, cond: Condition,
                schedule: NoiseSchedule, rng, t_min_frac=0.02, t_max_frac=0.98,
                weighting="one_minus_alpha_bar"):
    """SDS conditioned on warped edges/depth, backpropagated through masked pixels only."""
    x = np.asarray(x, dtype=np.float64)
    m = _as_pixel_mask(mask, x.shape)
    valid = np.ones(m.shape) if validity is None else np.asarray(validity, dtype=np.float64)
    edges = None if edge_map is None else np.asarray(edge_map, dtype=np.float64) * valid
    depth = None if depth_map is None else np.asarray(depth_map, dtype=np.float64) * valid
    full = cond.replace(mask=m.astype(np.float64), edge_map=edges, depth_map=depth,
                        validity=None if validity is None else valid)
    grad, sample = sds_grad(x, model, full, schedule, rng, t_min_frac, t_max_frac, weighting)
    grad = np.where(m.reshape(m.shape + (1,) * (x.ndim - 2)), grad, 0.0)
    return grad, sample


def total_loss(components: dict, weights: LossWeights) -> float:
    """Weighted sum of ``rgb``, ``depth`` and ``tgsds`` components (missing ones count as 0)."""
    return (weights.lambda_rgb * components.get("rgb", 0.0)
            + weights.lambda_depth * components.get("depth", 0.0)
            + weights.lambda_tgsds * components.get("tgsds", 0.0))

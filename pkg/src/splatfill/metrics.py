"""Image quality metrics: PSNR and SSIM, globally and restricted to a mask."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .losses import ssim, window_center_mask

PSNR_CAP = 99.0
MSE_FLOOR = 1e-10


def psnr(a, b, mask=None) -> float:
    """``10 log10(1 / MSE)`` on [0, 1] images, capped at 99 dB."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch {a.shape} vs {b.shape}")
    sq = (a - b) ** 2
    if mask is not None:
        m = np.asarray(mask).astype(bool)
        if m.shape != a.shape[:2]:
            raise ValidationError("mask does not match the image size")
        if not m.any():
            raise ValidationError("masked PSNR over an empty mask")
        sq = sq[m]
    mse = float(sq.mean())
    if mse < MSE_FLOOR:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


@dataclass(frozen=True)
class ViewMetrics:
    view_id: int
    psnr: float
    ssim: float
    masked_psnr: float | None
    masked_ssim: float | None


@dataclass(frozen=True)
class MetricsReport:
    views: tuple[ViewMetrics, ...]

    def _mean(self, attr):
        vals = [getattr(v, attr) for v in self.views if getattr(v, attr) is not None]
        return float(np.mean(vals)) if vals else None

    @property
    def mean_psnr(self):
        return self._mean("psnr")

    @property
    def mean_ssim(self):
        return self._mean("ssim")

    @property
    def mean_masked_psnr(self):
        return self._mean("masked_psnr")

    @property
    def mean_masked_ssim(self):
        return self._mean("masked_ssim")

    def to_text(self) -> str:
        """One line per view, ``id psnr ssim masked_psnr masked_ssim`` ("nan" when no mask)."""
        def fmt(x):
            return "nan" if x is None else f"{x:.6f}"
        lines = [f"{v.view_id} {fmt(v.psnr)} {fmt(v.ssim)} {fmt(v.masked_psnr)} {fmt(v.masked_ssim)}"
                 for v in self.views]
        return "\n".join(lines) + "\n"


def eval_metrics(rendered: dict, reference: dict, masks: dict | None = None) -> MetricsReport:
    """Per-view metrics over the views present in ``reference``.

    Masked metrics are reported for views with a non-empty mask, else None;
    masked SSIM is also None when no SSIM window centre falls in the mask.
    """
    missing = sorted(set(reference) - set(rendered))
    if missing:
        raise ValidationError(f"no rendered image for views {missing}")
    masks = masks or {}
    out = []
    for vid in sorted(reference):
        a, b = rendered[vid], reference[vid]
        m = masks.get(vid)
        mp = ms = None
        if m is not None and np.any(m):
            mp = psnr(a, b, m)
            if window_center_mask(m).any():
                ms = ssim(a, b, m)
        out.append(ViewMetrics(int(vid), psnr(a, b), ssim(a, b), mp, ms))
    return MetricsReport(tuple(out))

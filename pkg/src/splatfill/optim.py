"""Adam over Gaussian parameter groups."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, ValidationError
from .renderer import PARAM_GROUPS, GaussianCloud, sigmoid

BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-15


@dataclass
class OptimState:
    """Per-group Adam moments, step counter and learning rates."""

    lrs: dict
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    def __post_init__(self):
        for name, lr in self.lrs.items():
            if not np.isfinite(lr) or lr < 0:
                raise ValidationError(f"learning rate for {name} must be finite and non-negative")

    @classmethod
    def for_cloud(cls, config) -> "OptimState":
        return cls({
            "positions": config.lr_position,
            "rotations": config.lr_rotation,
            "log_scales": config.lr_scale,
            "opacity_logits": config.lr_opacity,
            "colors": config.lr_color,
        })

    def subset(self, keep) -> None:
        """Drop moments of pruned Gaussians."""
        for d in (self.m, self.v):
            for name in d:
                d[name] = d[name][keep]


def adam_step(state: OptimState, params: dict, grads: dict) -> dict:
    """One bias-corrected Adam update, in place on ``params``; returns ``params``.

    Groups absent from ``grads`` are left untouched (their moments are not advanced).
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in parameter group {name}")
    state.step += 1
    b1c = 1.0 - BETA1**state.step
    b2c = 1.0 - BETA2**state.step
    for name, g in grads.items():
        if name not in params:
            raise ValidationError(f"gradient for unknown parameter group {name}")
        p = params[name]
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ValidationError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = BETA1 * m + (1.0 - BETA1) * g
        v = BETA2 * v + (1.0 - BETA2) * g * g
        state.m[name], state.v[name] = m, v
        lr = state.lrs.get(name, 0.0)
        p -= lr * (m / b1c) / (np.sqrt(v / b2c) + ADAM_EPS)
    return params


def step_cloud(cloud: GaussianCloud, state: OptimState, grads: dict) -> GaussianCloud:
    """Adam on every group of ``cloud``, then renormalise quaternions and clip colours."""
    adam_step(state, cloud.params(), {k: grads[k] for k in PARAM_GROUPS if k in grads})
    cloud.normalize_rotations()
    np.clip(cloud.colors, 0.0, 1.0, out=cloud.colors)
    return cloud


def prune_transparent(cloud: GaussianCloud, state: OptimState, min_opacity: float) -> GaussianCloud:
    """Remove Gaussians whose opacity fell below ``min_opacity`` (always keeps one)."""
    keep = sigmoid(cloud.opacity_logits) >= min_opacity
    if keep.all():
        return cloud
    if not keep.any():
        keep[np.argmax(cloud.opacity_logits)] = True
    state.subset(keep)
    return cloud.subset(keep)

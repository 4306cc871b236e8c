"""Diffusion time machinery, attention propagation and DDIM in pixel space."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from .errors import NumericError, ValidationError


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Linear-beta schedule; ``alpha_bar[0] = 1`` and ``alpha_bar[t] = prod_{s<=t} (1 - beta_s)``."""

    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    alpha_bar: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        betas = np.linspace(self.beta_start, self.beta_end, self.T, dtype=np.float64)
        ab = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
        ab.flags.writeable = False
        object.__setattr__(self, "alpha_bar", ab)

    def timesteps(self, steps: int) -> np.ndarray:
        """Ascending uniform sub-schedule ``t_1 < ... < t_steps = T``."""
        if not 1 <= steps <= self.T:
            raise ValidationError(f"steps must lie in [1, {self.T}]")
        return np.rint(np.arange(1, steps + 1) * self.T / steps).astype(np.int64)


@dataclass(frozen=True, eq=False)
class Condition:
    text: str = ""
    negative_text: str = ""
    mask: np.ndarray | None = None
    edge_map: np.ndarray | None = None
    depth_map: np.ndarray | None = None
    validity: np.ndarray | None = None
    guidance_scale: float = 1.0
    cond_scale_texture: float = 0.8
    cond_scale_depth: float = 1.0
    view_id: int | None = None

    def replace(self, **changes) -> "Condition":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True, eq=False)
class LatentImage:
    data: np.ndarray
    t: int


def _identity_hook(features, block):
    return features


@dataclass(frozen=True, eq=False)
class AfpContext:
    """Reference attention features for attention feature propagation.

    ``reference_keys[r]`` / ``reference_values[r]`` hold reference ``r``'s
    tensors: either arrays directly, or dicts keyed by ``(t, block, branch)``
    as captured during a reference denoising pass.
    """

    reference_keys: tuple
    reference_values: tuple
    lambda_a: float = 0.6
    clip_image_hook: Callable = _identity_hook

    def __post_init__(self):
        if len(self.reference_keys) == 0:
            raise ValidationError("AFP needs at least one reference view")
        if len(self.reference_keys) != len(self.reference_values):
            raise ValidationError("reference keys and values differ in count")
        if not 0.0 <= self.lambda_a <= 1.0:
            raise ValidationError("lambda_a must lie in [0, 1]")

    @classmethod
    def from_captures(cls, captures, lambda_a, **kw) -> "AfpContext":
        keys = tuple({k: kv[0] for k, kv in cap.items()} for cap in captures)
        values = tuple({k: kv[1] for k, kv in cap.items()} for cap in captures)
        return cls(keys, values, lambda_a, **kw)

    def at(self, key) -> "AfpContext":
        try:
            keys = tuple(ref[key] for ref in self.reference_keys)
            values = tuple(ref[key] for ref in self.reference_values)
        except KeyError:
            raise ValidationError(f"no reference features captured for {key}") from None
        return AfpContext(keys, values, self.lambda_a, self.clip_image_hook)

    @property
    def n_references(self) -> int:
        return len(self.reference_keys)


class ScoreModel(Protocol):
    def predict_noise(self, latent: np.ndarray, t: int, cond: Condition,
                      afp: AfpContext | None = None, capture: dict | None = None) -> np.ndarray: ...


# ----------------------------------------------------------------- attention


def softmax(logits, axis=-1):
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def self_attention(Q, K, V, d: int | None = None) -> np.ndarray:
    """``softmax(Q K^T / sqrt(d)) V`` with row-wise max subtraction."""
    Q, K, V = (np.asarray(a, dtype=np.float64) for a in (Q, K, V))
    if Q.shape[-1] != K.shape[-1]:
        raise ValidationError(f"query dim {Q.shape[-1]} != key dim {K.shape[-1]}")
    if K.shape[-2] != V.shape[-2]:
        raise ValidationError(f"{K.shape[-2]} keys but {V.shape[-2]} values")
    d = Q.shape[-1] if d is None else d
    return softmax(Q @ np.swapaxes(K, -1, -2) / np.sqrt(d)) @ V


def afp_blend(Q_i, K_i, V_i, context: AfpContext) -> np.ndarray:
    """``lambda * mean_r Attn(Q_i, K_r, V_r) + (1 - lambda) * Attn(Q_i, K_i, V_i)``."""
    own = self_attention(Q_i, K_i, V_i)
    lam = context.lambda_a
    if lam == 0.0:
        return own
    cross = [self_attention(Q_i, K_r, V_r)
             for K_r, V_r in zip(context.reference_keys, context.reference_values)]
    return lam * (sum(cross) / len(cross)) + (1.0 - lam) * own


# ---------------------------------------------------------------------- DDIM


def guided_noise(model: ScoreModel, latent, t, cond: Condition, afp=None, capture=None):
    """Noise prediction with negative-prompt classifier-free guidance."""
    eps_pos = model.predict_noise(latent, t, cond, afp=afp, capture=capture)
    if cond.guidance_scale == 1.0:
        return eps_pos
    eps_neg = model.predict_noise(latent, t, cond.replace(text=cond.negative_text),
                                  afp=afp, capture=capture)
    return eps_neg + cond.guidance_scale * (eps_pos - eps_neg)


def _check_finite(x, what, t):
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{what}: non-finite latent at timestep {t}")


def ddim_invert(x0, steps: int, model: ScoreModel, cond: Condition,
                schedule: NoiseSchedule) -> list[LatentImage]:
    """Deterministic DDIM inversion ``x_0 -> x_T``; returns the whole trajectory.

    Each step ``t_prev -> t`` evaluates the model on the current latent at
    ``t_prev``; the first step, leaving the clean image at ``t = 0``, queries
    the model at its destination instead, so no model is ever asked for noise
    at ``t = 0``. The conditional branch alone is used; no guidance.
    """
    ab = schedule.alpha_bar
    x = np.asarray(x0, dtype=np.float64).copy()
    traj = [LatentImage(x.copy(), 0)]
    plain = cond.replace(guidance_scale=1.0)
    t_prev = 0
    for t in schedule.timesteps(steps):
        eps = model.predict_noise(x, int(t) if t_prev == 0 else t_prev, plain)
        x0_hat = (x - np.sqrt(1.0 - ab[t_prev]) * eps) / np.sqrt(ab[t_prev])
        x = np.sqrt(ab[t]) * x0_hat + np.sqrt(1.0 - ab[t]) * eps
        _check_finite(x, "ddim_invert", int(t))
        traj.append(LatentImage(x.copy(), int(t)))
        t_prev = int(t)
    return traj


def ddim_sample(x_T, steps: int, model: ScoreModel, cond: Condition, schedule: NoiseSchedule,
                afp: AfpContext | None = None, known: list[LatentImage] | None = None,
                capture: dict | None = None) -> np.ndarray:
    """Deterministic (eta = 0) DDIM sampling from ``x_T`` down to ``t = 0``.

    With ``cond.mask`` and a ``known`` trajectory (from :func:`ddim_invert`),
    pixels where mask == 0 are overwritten with the known latent after every
    step, so only masked content is synthesised. ``capture``, when given,
    collects per-timestep attention keys/values from the model.
    """
    ab = schedule.alpha_bar
    ts = schedule.timesteps(steps)
    x = np.asarray(x_T, dtype=np.float64).copy()
    keep = None
    if cond.mask is not None and known is not None:
        if len(known) != len(ts) + 1:
            raise ValidationError("known trajectory does not match the step count")
        m = np.asarray(cond.mask, dtype=np.float64)
        keep = m[..., None] if x.ndim == m.ndim + 1 else m
        x = keep * x + (1.0 - keep) * known[-1].data
    for k in range(len(ts) - 1, -1, -1):
        t = int(ts[k])
        t_prev = int(ts[k - 1]) if k > 0 else 0
        step_capture = {} if capture is not None else None
        eps = guided_noise(model, x, t, cond, afp=afp, capture=step_capture)
        if capture is not None:
            capture.update(step_capture)
        x0_hat = (x - np.sqrt(1.0 - ab[t]) * eps) / np.sqrt(ab[t])
        x = np.sqrt(ab[t_prev]) * x0_hat + np.sqrt(1.0 - ab[t_prev]) * eps
        if keep is not None:
            x = keep * x + (1.0 - keep) * known[k].data
        _check_finite(x, "ddim_sample", t_prev)
    return x


def inpaint_view(image, steps, model, cond, schedule, afp=None, capture=None) -> np.ndarray:
    traj = ddim_invert(image, steps, model, cond, schedule)
    return ddim_sample(traj[-1].data, steps, model, cond, schedule, afp=afp, known=traj,
                       capture=capture)


def inpaint_multiview(rendered: dict, masks: dict, reference_ids, model: ScoreModel,
                      schedule: NoiseSchedule, steps: int, lambda_a: float,
                      text: str = "", negative_text: str = "", guidance_scale: float = 1.0,
                      clip_image_hook: Callable = _identity_hook) -> dict:
    """Two-pass multi-view inpainting with attention feature propagation.

    Pass 1 inpaints every reference view on its own while capturing its
    attention keys/values. Pass 2 inpaints the remaining views with all
    captured references blended into each self-attention block.
    Returns ``{view_id: image}``.
    """
    reference_ids = list(reference_ids)
    missing = [r for r in reference_ids if r not in rendered]
    if missing:
        raise ValidationError(f"reference views {missing} have no rendered image")

    def cond_for(vid):
        return Condition(text=text, negative_text=negative_text, mask=masks[vid],
                         guidance_scale=guidance_scale, view_id=vid)

    out = {}
    captures = []
    for r in reference_ids:
        cap = {}
        out[r] = inpaint_view(rendered[r], steps, model, cond_for(r), schedule, capture=cap)
        captures.append(cap)
    afp = AfpContext.from_captures(captures, lambda_a, clip_image_hook=clip_image_hook)
    for vid in sorted(rendered):
        if vid in out:
            continue
        out[vid] = inpaint_view(rendered[vid], steps, model, cond_for(vid), schedule, afp=afp)
    return dict(sorted(out.items()))

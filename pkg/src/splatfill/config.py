"""Pipeline configuration: a flat ``key = value`` text file.

Every key maps onto a :class:`PipelineConfig` field. Unknown keys are
rejected so typos never silently fall back to defaults.
"""

from __future__ import annotations

import dataclasses
import hashlib
import math
from dataclasses import dataclass, fields
from importlib import resources
from pathlib import Path

from .errors import ConfigError

SCORE_MODELS = ("point_target", "tiny_attention_unet")
DEPTH_ESTIMATORS = ("rendered_passthrough", "constant_plane")
DEPTH_CONDITION_SOURCES = ("estimator", "warped")
SDS_WEIGHTINGS = ("one_minus_alpha_bar", "constant")


@dataclass(frozen=True)
class PipelineConfig:
    # view selection / attention propagation
    k_clusters: int = 3
    lambda_a: float = 0.6
    # losses
    lambda_dssim: float = 0.2
    lambda_rgb: float = 1.0
    lambda_depth: float = 0.05
    lambda_tgsds: float = 0.01
    # diffusion
    guidance_scale: float = 7.5
    cond_scale_depth: float = 1.0
    cond_scale_texture: float = 0.8
    ddim_steps: int = 50
    num_train_timesteps: int = 1000
    t_min_frac: float = 0.02
    t_max_frac: float = 0.98
    sds_weighting: str = "one_minus_alpha_bar"
    score_model: str = "point_target"
    point_target_image: str = ""
    tiny_unet_weights: str = ""
    depth_estimator: str = "rendered_passthrough"
    depth_condition_source: str = "estimator"
    # optimisation
    seed: int = 0
    coarse_iters: int = 2000
    fine_iters: int = 1000
    lr_position: float = 1.6e-4
    lr_rotation: float = 1e-3
    lr_scale: float = 5e-3
    lr_opacity: float = 5e-2
    lr_color: float = 2.5e-3
    prune_interval: int = 0
    prune_opacity: float = 0.005
    init_stride: int = 4

    def __post_init__(self):
        self.validate()

    def validate(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, float) and not math.isfinite(value):
                raise ConfigError(f"{f.name} must be finite, got {value}")
        if self.k_clusters < 1:
            raise ConfigError("k_clusters must be >= 1")
        for name in ("lambda_a", "lambda_dssim"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        for name in ("lambda_rgb", "lambda_depth", "lambda_tgsds", "prune_opacity",
                     "lr_position", "lr_rotation", "lr_scale", "lr_opacity", "lr_color"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.guidance_scale < 1.0:
            raise ConfigError("guidance_scale must be >= 1")
        for name in ("cond_scale_depth", "cond_scale_texture"):
            if not 0.0 <= getattr(self, name) <= 2.0:
                raise ConfigError(f"{name} must lie in [0, 2]")
        if self.ddim_steps < 1 or self.num_train_timesteps < self.ddim_steps:
            raise ConfigError("need 1 <= ddim_steps <= num_train_timesteps")
        if not 0.0 <= self.t_min_frac < self.t_max_frac <= 1.0:
            raise ConfigError("need 0 <= t_min_frac < t_max_frac <= 1")
        if self.coarse_iters < 0 or self.fine_iters < 0 or self.prune_interval < 0:
            raise ConfigError("iteration counts must be non-negative")
        if self.init_stride < 1:
            raise ConfigError("init_stride must be >= 1")
        _check_choice("score_model", self.score_model, SCORE_MODELS)
        _check_choice("depth_estimator", self.depth_estimator, DEPTH_ESTIMATORS)
        _check_choice("depth_condition_source", self.depth_condition_source,
                      DEPTH_CONDITION_SOURCES)
        _check_choice("sds_weighting", self.sds_weighting, SDS_WEIGHTINGS)

    def replace(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()


def _check_choice(name, value, choices):
    if value not in choices:
        raise ConfigError(f"{name} must be one of {choices}, got {value!r}")


def _coerce(name, ftype, raw):
    try:
        if ftype in (int, "int"):
            return int(raw)
        if ftype in (float, "float"):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r}") from None
    return raw


def parse_config(text: str, base: PipelineConfig | None = None) -> PipelineConfig:
    types = {f.name: f.type for f in fields(PipelineConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _coerce(key, types[key], raw)
    return dataclasses.replace(base or PipelineConfig(), **values)


def load_config(path: str | Path | None = None) -> PipelineConfig:
    """Load a config file; ``None`` loads the bundled defaults."""
    if path is None:
        text = resources.files("splatfill").joinpath("data/default.cfg").read_text()
    else:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)

"""Built-in noise predictors.

``PointTarget`` is the exact noise predictor for a point-mass data
distribution. ``TinyAttentionUNet`` is a small fixed-weight per-pixel network
with self-attention blocks, enough to exercise attention propagation end to
end. Both work directly in pixel space.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from .diffusion import AfpContext, Condition, NoiseSchedule, afp_blend, self_attention
from .errors import ValidationError


class PointTarget:
    """``eps(x_t, t) = (x_t - sqrt(ab_t) x0*) / sqrt(1 - ab_t)``.

    ``target`` is a single raster or a ``{view_id: raster}`` mapping resolved
    through ``cond.view_id``. Prompts and attention features are ignored.
    """

    def __init__(self, target, schedule: NoiseSchedule | None = None):
        self.schedule = schedule or NoiseSchedule()
        if isinstance(target, dict):
            self.targets = {int(k): np.asarray(v, dtype=np.float64) for k, v in target.items()}
            self.target = None
        else:
            self.targets = {}
            self.target = np.asarray(target, dtype=np.float64)

    def target_for(self, cond: Condition) -> np.ndarray:
        if self.target is not None:
            return self.target
        if cond.view_id not in self.targets:
            raise ValidationError(f"point_target has no target for view {cond.view_id}")
        return self.targets[cond.view_id]

    def predict_noise(self, latent, t, cond, afp=None, capture=None):
        ab = self.schedule.alpha_bar[int(t)]
        if ab >= 1.0:
            raise ValidationError("point_target is undefined at t = 0")
        x0 = self.target_for(cond)
        if x0.shape != np.shape(latent):
            raise ValidationError(f"target shape {x0.shape} != latent shape {np.shape(latent)}")
        return (latent - np.sqrt(ab) * x0) / np.sqrt(1.0 - ab)


# --------------------------------------------------------------- tiny U-Net

WEIGHTS_MAGIC = b"TAUW"
WEIGHTS_VERSION = 1
_IN_CH = 6  # rgb, mask, edges, depth
_TIME_DIM = 8


def _tiny_shapes(width=16, key_dim=8, n_blocks=2):
    shapes = [("w_in", (_IN_CH, width)), ("w_time", (_TIME_DIM, width)), ("b_in", (width,))]
    for b in range(n_blocks):
        shapes += [(f"blk{b}.w_q", (width, key_dim)), (f"blk{b}.w_k", (width, key_dim)),
                   (f"blk{b}.w_v", (width, width)), (f"blk{b}.w_o", (width, width))]
    shapes += [("w_out", (width, 3)), ("b_out", (3,))]
    return shapes


def default_tiny_weights(seed=0, width=16, key_dim=8, n_blocks=2) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    tensors = []
    for name, shape in _tiny_shapes(width, key_dim, n_blocks):
        fan_in = shape[0] if len(shape) == 2 else width
        scale = 0.0 if name.startswith("b_") else 1.0 / np.sqrt(fan_in)
        if name.endswith(("w_q", "w_k", "w_o")):
            # peaky, dominant attention so propagated features visibly matter
            scale *= 3.0
        tensors.append((rng.standard_normal(shape) * scale).astype(np.float32))
    return tensors


def save_tiny_weights(path, tensors) -> None:
    """Header: magic, version, tensor count, reserved (4 x 4 bytes, little-endian).

    Each tensor: ndim (u32), dims (u32 each), then float32 payload.
    """
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIII", WEIGHTS_MAGIC, WEIGHTS_VERSION, len(tensors), 0))
        for arr in tensors:
            arr = np.ascontiguousarray(arr, dtype="<f4")
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_tiny_weights(path) -> list[np.ndarray]:
    data = Path(path).read_bytes()
    if len(data) < 16:
        raise ValidationError(f"{path}: truncated weights header")
    magic, version, count, _ = struct.unpack_from("<4sIII", data, 0)
    if magic != WEIGHTS_MAGIC:
        raise ValidationError(f"{path}: bad weights magic {magic!r}")
    if version != WEIGHTS_VERSION:
        raise ValidationError(f"{path}: unsupported weights version {version}")
    off = 16
    tensors = []
    try:
        for _ in range(count):
            (ndim,) = struct.unpack_from("<I", data, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}I", data, off)
            off += 4 * ndim
            n = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(shape)
            off += 4 * n
            tensors.append(arr.copy())
    except (struct.error, ValueError):
        raise ValidationError(f"{path}: truncated weights payload") from None
    if off != len(data):
        raise ValidationError(f"{path}: {len(data) - off} trailing bytes after tensors")
    return tensors


def _time_embedding(t, dim=_TIME_DIM):
    freqs = np.exp(-np.log(10000.0) * np.arange(dim // 2) / (dim // 2))
    return np.concatenate([np.sin(t * freqs), np.cos(t * freqs)])


def _text_embedding(text, dim):
    seed = int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")
    return np.random.default_rng(seed).standard_normal(dim) * 0.5


class TinyAttentionUNet:
    """Per-pixel MLP with residual single-head self-attention blocks.

    The network predicts a clean image ``x0_hat`` in [0, 1] and converts it to
    noise, ``eps = (x_t - sqrt(ab) x0_hat) / sqrt(1 - ab)``, which keeps DDIM
    well behaved with untrained weights. Every attention block routes through
    :func:`afp_blend` when an :class:`AfpContext` is supplied and records its
    keys/values into ``capture`` when that dict is given.
    """

    def __init__(self, tensors=None, schedule: NoiseSchedule | None = None):
        tensors = default_tiny_weights() if tensors is None else tensors
        self.schedule = schedule or NoiseSchedule()
        width = tensors[0].shape[1]
        key_dim = tensors[3].shape[1]
        n_blocks = (len(tensors) - 5) // 4
        expected = _tiny_shapes(width, key_dim, n_blocks)
        if len(tensors) != len(expected) or any(
                tuple(a.shape) != s for a, (_, s) in zip(tensors, expected)):
            raise ValidationError("tiny_attention_unet weights have unexpected shapes")
        self.w = {name: np.asarray(a, dtype=np.float64) for a, (name, _) in zip(tensors, expected)}
        self.n_blocks = n_blocks
        self.key_dim = key_dim
        self.width = width

    @classmethod
    def from_file(cls, path, schedule=None) -> "TinyAttentionUNet":
        return cls(load_tiny_weights(path), schedule)

    def _features(self, latent, t, cond: Condition):
        H, W, _ = latent.shape
        zeros = np.zeros((H, W))
        mask = zeros if cond.mask is None else np.asarray(cond.mask, dtype=np.float64)
        edges = zeros if cond.edge_map is None else np.asarray(cond.edge_map, dtype=np.float64)
        depth = zeros if cond.depth_map is None else np.asarray(cond.depth_map, dtype=np.float64)
        if cond.depth_map is not None and np.ptp(depth) > 0:
            depth = (depth - depth.min()) / np.ptp(depth)
        if cond.validity is not None:
            edges = edges * cond.validity
            depth = depth * cond.validity
        x = np.concatenate([latent, mask[..., None], cond.cond_scale_texture * edges[..., None],
                            cond.cond_scale_depth * depth[..., None]], axis=-1)
        return x.reshape(H * W, _IN_CH)

    def predict_noise(self, latent, t, cond, afp: AfpContext | None = None, capture=None):
        latent = np.asarray(latent, dtype=np.float64)
        if latent.ndim != 3 or latent.shape[-1] != 3:
            raise ValidationError("tiny_attention_unet expects an (H, W, 3) latent")
        H, W, _ = latent.shape
        w = self.w
        t = int(t)
        ab = self.schedule.alpha_bar[t]
        branch = cond.text
        h = np.tanh(self._features(latent, t, cond) @ w["w_in"]
                    + _time_embedding(t) @ w["w_time"] + w["b_in"]
                    + _text_embedding(branch, self.width))
        for b in range(self.n_blocks):
            Q = h @ w[f"blk{b}.w_q"]
            K = h @ w[f"blk{b}.w_k"]
            V = h @ w[f"blk{b}.w_v"]
            if capture is not None:
                capture[(t, b, branch)] = (K, V)
            if afp is None:
                attn = self_attention(Q, K, V, self.key_dim)
            else:
                attn = afp_blend(Q, K, V, afp.at((t, b, branch)))
            h = h + attn @ w[f"blk{b}.w_o"]
            if afp is not None:
                h = afp.clip_image_hook(h, b)
        x0_hat = 1.0 / (1.0 + np.exp(-(h @ w["w_out"] + w["b_out"])))
        x0_hat = x0_hat.reshape(H, W, 3)
        return (latent - np.sqrt(ab) * x0_hat) / np.sqrt(1.0 - ab)

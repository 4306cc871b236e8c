"""Differentiable splatting of degree-0 3D Gaussians (colour and depth).

Everything is dense numpy over (visible Gaussians x pixels), which is plenty
for desk-scale images. Pixel centres sit at integer coordinates: pixel
``(row, col)`` is at ``(u, v) = (col, row)``.

The forward pass makes a handful of discrete decisions (culling, depth order,
3-sigma footprint, alpha cap, early termination). They are recorded in a
:class:`RenderStructure`; passing it back into :func:`rasterize` pins them,
which is what finite-difference gradient checks need.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from .errors import ValidationError
from .scene_io import CameraIntrinsics, CameraPose

NEAR_PLANE = 0.01
LOWPASS = 0.3
ALPHA_MAX = 0.999
FOOTPRINT_SIGMA = 3.0
T_EPS = 1e-4

PARAM_GROUPS = ("positions", "rotations", "log_scales", "opacity_logits", "colors")


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


@dataclass
class Gaussian3D:
    position: np.ndarray
    rotation: np.ndarray  # unit quaternion (w, x, y, z)
    log_scale: np.ndarray
    opacity_logit: float
    color: np.ndarray

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))


@dataclass
class GaussianCloud:
    """Struct-of-arrays Gaussian scene; arrays are float64 and owned by the cloud."""

    positions: np.ndarray  # (N, 3)
    rotations: np.ndarray  # (N, 4) w, x, y, z
    log_scales: np.ndarray  # (N, 3)
    opacity_logits: np.ndarray  # (N,)
    colors: np.ndarray  # (N, 3)
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.positions = np.array(self.positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        self.rotations = np.array(self.rotations, dtype=np.float64).reshape(n, 4)
        self.log_scales = np.array(self.log_scales, dtype=np.float64).reshape(n, 3)
        self.opacity_logits = np.array(self.opacity_logits, dtype=np.float64).reshape(n)
        self.colors = np.array(self.colors, dtype=np.float64).reshape(n, 3)
        self.background = np.array(self.background, dtype=np.float64).reshape(3)

    def __len__(self):
        return len(self.positions)

    @classmethod
    def from_gaussians(cls, gaussians, background=(0.0, 0.0, 0.0)) -> "GaussianCloud":
        gs = list(gaussians)
        return cls(
            positions=[g.position for g in gs],
            rotations=[g.rotation for g in gs],
            log_scales=[g.log_scale for g in gs],
            opacity_logits=[g.opacity_logit for g in gs],
            colors=[g.color for g in gs],
            background=background,
        )

    def gaussian(self, i: int) -> Gaussian3D:
        return Gaussian3D(self.positions[i].copy(), self.rotations[i].copy(),
                          self.log_scales[i].copy(), float(self.opacity_logits[i]),
                          self.colors[i].copy())

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_GROUPS}

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(**{f.name: getattr(self, f.name).copy() for f in fields(self)})

    def subset(self, keep) -> "GaussianCloud":
        return GaussianCloud(**{name: getattr(self, name)[keep] for name in PARAM_GROUPS},
                             background=self.background.copy())

    def normalize_rotations(self):
        self.rotations /= np.linalg.norm(self.rotations, axis=1, keepdims=True)

    def check_finite(self):
        for name in PARAM_GROUPS:
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValidationError(f"cloud parameter group {name} has non-finite values")


# ------------------------------------------------------------------ geometry


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for unit quaternions, shape (..., 4) -> (..., 3, 3)."""
    w, x, y, z = np.moveaxis(np.asarray(q, dtype=np.float64), -1, 0)
    R = np.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], axis=-1)
    return R.reshape(R.shape[:-1] + (3, 3))


def _rotmat_vjp(q: np.ndarray, G: np.ndarray) -> np.ndarray:
    """Pull a gradient on R(q) back to the (unit) quaternion, batched."""
    w, x, y, z = q.T
    zero = np.zeros_like(w)

    def mat(*rows):
        return np.stack(rows, axis=-1).reshape(-1, 3, 3)

    dw = mat(zero, -2 * z, 2 * y, 2 * z, zero, -2 * x, -2 * y, 2 * x, zero)
    dx = mat(zero, 2 * y, 2 * z, 2 * y, -4 * x, -2 * w, 2 * z, 2 * w, -4 * x)
    dy = mat(-4 * y, 2 * x, 2 * w, 2 * x, zero, 2 * z, -2 * w, 2 * z, -4 * y)
    dz = mat(-4 * z, -2 * w, 2 * x, 2 * w, -4 * z, 2 * y, 2 * x, 2 * y, zero)
    return np.stack([np.sum(G * d, axis=(1, 2)) for d in (dw, dx, dy, dz)], axis=1)


def covariance_from_rs(rotation, log_scale) -> np.ndarray:
    """``R diag(exp(2 log_scale)) R^T``; batched over leading axes."""
    R = quat_to_rotmat(rotation)
    s2 = np.exp(2.0 * np.asarray(log_scale, dtype=np.float64))
    return (R * s2[..., None, :]) @ np.swapaxes(R, -1, -2)


@dataclass
class ProjectedGaussian:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    source_index: int


@dataclass
class _Projection:
    """Batched projection of a whole cloud into one camera."""

    visible: np.ndarray  # indices into the cloud
    q_unit: np.ndarray
    q_norm: np.ndarray
    R: np.ndarray  # (K, 3, 3) Gaussian rotations
    s2: np.ndarray  # (K, 3)
    sigma: np.ndarray  # (K, 3, 3)
    p_cam: np.ndarray  # (K, 3)
    J: np.ndarray  # (K, 2, 3)
    M: np.ndarray  # (K, 2, 3) = J @ R_view
    mean2d: np.ndarray  # (K, 2)
    cov2d: np.ndarray  # (K, 2, 2)
    conic: np.ndarray  # (K, 2, 2)


def _project_cloud(cloud: GaussianCloud, pose: CameraPose, intr: CameraIntrinsics,
                   visible=None) -> _Projection:
    Rv, tv = pose.rotation, pose.translation
    p_all = cloud.positions @ Rv.T + tv
    if visible is None:
        visible = np.flatnonzero(p_all[:, 2] > NEAR_PLANE)
    p = p_all[visible]
    q = cloud.rotations[visible]
    q_norm = np.linalg.norm(q, axis=1)
    q_unit = q / q_norm[:, None]
    R = quat_to_rotmat(q_unit)
    s2 = np.exp(2.0 * cloud.log_scales[visible])
    sigma = (R * s2[:, None, :]) @ np.swapaxes(R, 1, 2)

    x, y, z = p.T
    fx, fy = intr.fx, intr.fy
    K = len(visible)
    J = np.zeros((K, 2, 3))
    J[:, 0, 0] = fx / z
    J[:, 0, 2] = -fx * x / z**2
    J[:, 1, 1] = fy / z
    J[:, 1, 2] = -fy * y / z**2
    M = J @ Rv
    cov2d = M @ sigma @ np.swapaxes(M, 1, 2) + LOWPASS * np.eye(2)
    mean2d = np.stack([fx * x / z + intr.cx, fy * y / z + intr.cy], axis=1)

    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    conic = np.empty_like(cov2d)
    conic[:, 0, 0] = c / det
    conic[:, 0, 1] = conic[:, 1, 0] = -b / det
    conic[:, 1, 1] = a / det
    return _Projection(visible, q_unit, q_norm, R, s2, sigma, p, J, M, mean2d, cov2d, conic)


def project_gaussian(g: Gaussian3D, pose: CameraPose, intr: CameraIntrinsics) -> ProjectedGaussian | None:
    """Project one Gaussian; ``None`` when it sits at or behind the near plane."""
    cloud = GaussianCloud([g.position], [g.rotation], [g.log_scale], [g.opacity_logit], [g.color])
    proj = _project_cloud(cloud, pose, intr)
    if len(proj.visible) == 0:
        return None
    return ProjectedGaussian(proj.mean2d[0], proj.cov2d[0], float(proj.p_cam[0, 2]), 0)


# ----------------------------------------------------------------- rasterize


@dataclass
class RenderStructure:
    """Discrete choices of a forward pass, reusable to pin them."""

    order: np.ndarray  # cloud indices of visible Gaussians, front to back
    inside: np.ndarray  # (K, P) pixel within the 3-sigma ellipse
    clamped: np.ndarray  # (K, P) alpha hit the cap
    active: np.ndarray  # (K, P) compositing had not terminated yet
    far_index: int  # position in ``order`` of the farthest Gaussian (-1 if none)


@dataclass
class RenderOutput:
    color: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W)
    final_transmittance: np.ndarray  # (H, W)
    weights: np.ndarray = field(repr=False)  # (K, P) alpha_i * T_i
    structure: RenderStructure = field(repr=False)
    _cache: dict = field(repr=False, default_factory=dict)


def _pixel_grid(intr: CameraIntrinsics):
    v, u = np.mgrid[0:intr.height, 0:intr.width]
    return u.ravel().astype(np.float64), v.ravel().astype(np.float64)


def rasterize(cloud: GaussianCloud, pose: CameraPose, intr: CameraIntrinsics,
              structure: RenderStructure | None = None) -> RenderOutput:
    """Render colour, expected depth and final transmittance of ``cloud``."""
    if len(cloud) == 0:
        raise ValidationError("cannot render an empty Gaussian cloud")
    H, W = intr.height, intr.width
    P = H * W

    if structure is None:
        p_cam = cloud.positions @ pose.rotation.T + pose.translation
        visible = np.flatnonzero(p_cam[:, 2] > NEAR_PLANE)
        # stable sort keeps cloud order among equal depths
        order = visible[np.argsort(p_cam[visible, 2], kind="stable")]
    else:
        order = structure.order
    proj = _project_cloud(cloud, pose, intr, visible=order)
    K = len(order)

    u, v = _pixel_grid(intr)
    dx = u[None, :] - proj.mean2d[:, 0:1]
    dy = v[None, :] - proj.mean2d[:, 1:2]
    ca = proj.conic[:, 0, 0:1]
    cb = proj.conic[:, 0, 1:2]
    cc = proj.conic[:, 1, 1:2]
    power = ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy
    gauss = np.exp(-0.5 * power)
    opac = sigmoid(cloud.opacity_logits[order])
    alpha_raw = opac[:, None] * gauss

    if structure is None:
        inside = power <= FOOTPRINT_SIGMA**2
        clamped = alpha_raw > ALPHA_MAX
    else:
        inside, clamped = structure.inside, structure.clamped
    alpha = np.where(inside, np.where(clamped, ALPHA_MAX, alpha_raw), 0.0)

    if structure is None:
        T_pre = np.cumprod(np.vstack([np.ones((1, P)), 1.0 - alpha[:-1]]), axis=0)
        active = T_pre >= T_EPS
    else:
        active = structure.active
    alpha = alpha * active

    one_minus = 1.0 - alpha
    T_incl = np.cumprod(one_minus, axis=0) if K else np.ones((0, P))
    T_final = T_incl[-1] if K else np.ones(P)
    T_before = np.vstack([np.ones((1, P)), T_incl[:-1]]) if K else np.ones((0, P))
    weights = alpha * T_before

    colors = cloud.colors[order]
    z = proj.p_cam[:, 2]
    if structure is None:
        far_index = int(np.argmax(z)) if K else -1
    else:
        far_index = structure.far_index
    far = z[far_index] if far_index >= 0 else 0.0

    color = weights.T @ colors + T_final[:, None] * cloud.background[None, :]
    depth = weights.T @ z + T_final * far

    out_structure = structure or RenderStructure(order, inside, clamped, active, far_index)
    out = RenderOutput(color.reshape(H, W, 3), depth.reshape(H, W), T_final.reshape(H, W),
                       weights, out_structure)
    out._cache.update(proj=proj, alpha=alpha, gauss=gauss, opac=opac, dx=dx, dy=dy,
                      T_before=T_before, T_final=T_final, colors=colors, z=z, far=far)
    return out


# ------------------------------------------------------------------ backward


def render_backward(cloud: GaussianCloud, pose: CameraPose, intr: CameraIntrinsics,
                    upstream_color_grad: np.ndarray, upstream_depth_grad: np.ndarray | None = None,
                    forward: RenderOutput | None = None) -> dict[str, np.ndarray]:
    """Analytic vector-Jacobian product of :func:`rasterize`.

    Returns a dict keyed like :data:`PARAM_GROUPS` with arrays shaped like the
    corresponding cloud parameters. The discrete structure of ``forward`` (or
    of a fresh forward pass) is treated as fixed.
    """
    if forward is None:
        forward = rasterize(cloud, pose, intr)
    c = forward._cache
    proj: _Projection = c["proj"]
    st = forward.structure
    order = st.order
    K = len(order)
    H, W = intr.height, intr.width
    P = H * W

    grads = {name: np.zeros_like(getattr(cloud, name)) for name in PARAM_GROUPS}
    if K == 0:
        return grads

    gC = np.asarray(upstream_color_grad, dtype=np.float64).reshape(P, 3)
    gD = (np.zeros(P) if upstream_depth_grad is None
          else np.asarray(upstream_depth_grad, dtype=np.float64).reshape(P))

    alpha, weights = c["alpha"], forward.weights
    T_before, T_final = c["T_before"], c["T_final"]
    colors, z, far = c["colors"], c["z"], c["far"]

    g_color = weights @ gC  # (K, 3)
    g_z = weights @ gD  # depth as composited value
    if st.far_index >= 0:
        g_z[st.far_index] += T_final @ gD

    # dC/dalpha_i = T_i c_i - (sum_{j>i} w_j c_j + T_final bg) / (1 - alpha_i)
    col_proj = colors @ gC.T  # (K, P): c_i . gC_p
    wcol = weights * col_proj
    behind_col = np.cumsum(wcol[::-1], axis=0)[::-1] - wcol + (T_final * (gC @ cloud.background))[None, :]
    wz = weights * z[:, None]
    behind_z = np.cumsum(wz[::-1], axis=0)[::-1] - wz + (T_final * far)[None, :]
    one_minus = 1.0 - alpha
    g_alpha = (T_before * col_proj - behind_col / one_minus
               + gD[None, :] * (T_before * z[:, None] - behind_z / one_minus))
    live = st.inside & st.active & ~st.clamped
    g_alpha = np.where(live, g_alpha, 0.0)

    gauss, opac = c["gauss"], c["opac"]
    g_opac = np.sum(g_alpha * gauss, axis=1)
    g_power = -0.5 * g_alpha * opac[:, None] * gauss
    dx, dy = c["dx"], c["dy"]
    conic = proj.conic
    g_conic = np.empty((K, 2, 2))
    g_conic[:, 0, 0] = np.sum(g_power * dx * dx, axis=1)
    g_conic[:, 0, 1] = g_conic[:, 1, 0] = np.sum(g_power * dx * dy, axis=1)
    g_conic[:, 1, 1] = np.sum(g_power * dy * dy, axis=1)
    ca, cb, cc = conic[:, 0, 0:1], conic[:, 0, 1:2], conic[:, 1, 1:2]
    g_u = -2.0 * np.sum(g_power * (ca * dx + cb * dy), axis=1)
    g_v = -2.0 * np.sum(g_power * (cb * dx + cc * dy), axis=1)

    # conic = inv(cov2d);  cov2d = M Sigma M^T + lowpass I;  M = J R_view
    g_cov = -conic @ g_conic @ conic
    M, sigma = proj.M, proj.sigma
    g_M = 2.0 * g_cov @ M @ sigma
    g_sigma = np.swapaxes(M, 1, 2) @ g_cov @ M
    g_J = g_M @ pose.rotation.T

    fx, fy = intr.fx, intr.fy
    x, y, zc = proj.p_cam.T
    g_p = np.zeros((K, 3))
    g_p[:, 0] = g_u * fx / zc - g_J[:, 0, 2] * fx / zc**2
    g_p[:, 1] = g_v * fy / zc - g_J[:, 1, 2] * fy / zc**2
    g_p[:, 2] = (g_z
                 - g_u * fx * x / zc**2 - g_v * fy * y / zc**2
                 - g_J[:, 0, 0] * fx / zc**2 + g_J[:, 0, 2] * 2 * fx * x / zc**3
                 - g_J[:, 1, 1] * fy / zc**2 + g_J[:, 1, 2] * 2 * fy * y / zc**3)
    g_mu = g_p @ pose.rotation

    # Sigma = R diag(s2) R^T
    R, s2 = proj.R, proj.s2
    g_R = 2.0 * g_sigma @ R * s2[:, None, :]
    g_s2 = np.einsum("kji,kjl,kli->ki", R, g_sigma, R)
    g_logs = 2.0 * s2 * g_s2
    g_qhat = _rotmat_vjp(proj.q_unit, g_R)
    qh = proj.q_unit
    g_q = (g_qhat - qh * np.sum(qh * g_qhat, axis=1, keepdims=True)) / proj.q_norm[:, None]

    grads["positions"][order] = g_mu
    grads["rotations"][order] = g_q
    grads["log_scales"][order] = g_logs
    grads["opacity_logits"][order] = g_opac * opac * (1.0 - opac)
    grads["colors"][order] = g_color
    return grads

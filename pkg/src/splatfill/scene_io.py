"""Posed multi-view scenes on disk.

Scene directory layout::

    cameras.txt            native camera records (or colmap/cameras.txt + colmap/images.txt)
    images/{id}.png        8-bit RGB
    masks/{id}.png         8-bit, >= 128 means "inpaint here"
    depth/{id}.pfm         optional little-endian PFM depth
    prompts.txt            optional ``positive = ...`` / ``negative = ...`` / ``mask = ...``

Native ``cameras.txt`` holds one record per line::

    id width height fx fy cx cy r00 r01 r02 r10 r11 r12 r20 r21 r22 tx ty tz

Poses are world-to-camera with +z forward and +y down.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import SceneError, ValidationError

ORTHO_TOL = 1e-6
QUAT_NORM_TOL = 1e-3
MASK_THRESHOLD = 128


@dataclass(frozen=True)
class CameraIntrinsics:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValidationError(f"image size must be positive, got {self.width}x{self.height}")
        if not (self.fx > 0 and self.fy > 0):
            raise ValidationError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValidationError(f"principal point ({self.cx}, {self.cy}) outside the image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width


@dataclass(frozen=True, eq=False)
class CameraPose:
    """World-to-camera rigid transform ``x_cam = rotation @ x_world + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValidationError("pose contains non-finite values")
        if np.abs(R.T @ R - np.eye(3)).max() > ORTHO_TOL:
            raise ValidationError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
            raise ValidationError("rotation determinant is not +1")
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "CameraPose":
        return cls(np.eye(3), np.zeros(3))

    @property
    def matrix(self) -> np.ndarray:
        """4x4 homogeneous world-to-camera matrix."""
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def __eq__(self, other):
        if not isinstance(other, CameraPose):
            return NotImplemented
        return (np.array_equal(self.rotation, other.rotation)
                and np.array_equal(self.translation, other.translation))

    __hash__ = None


def camera_center(pose: CameraPose) -> np.ndarray:
    """World position of the camera, ``-R^T t``."""
    return -pose.rotation.T @ pose.translation


@dataclass(frozen=True, eq=False)
class View:
    id: int
    intrinsics: CameraIntrinsics
    pose: CameraPose
    image: np.ndarray  # (H, W, 3) float64 in [0, 1]
    mask: np.ndarray  # (H, W) uint8 in {0, 1}
    depth: np.ndarray | None = None  # (H, W) float64

    def __post_init__(self):
        shape = self.intrinsics.shape
        if self.image.shape != shape + (3,):
            raise SceneError(f"image is {self.image.shape[1]}x{self.image.shape[0]}, "
                             f"expected {shape[1]}x{shape[0]}", self.id)
        if self.mask.shape != shape:
            raise SceneError(f"mask is {self.mask.shape[1]}x{self.mask.shape[0]}, "
                             f"expected {shape[1]}x{shape[0]}", self.id)
        if not np.isin(self.mask, (0, 1)).all():
            raise SceneError("mask values must be 0 or 1", self.id)
        if self.depth is not None and self.depth.shape != shape:
            raise SceneError(f"depth is {self.depth.shape[1]}x{self.depth.shape[0]}, "
                             f"expected {shape[1]}x{shape[0]}", self.id)


@dataclass(frozen=True)
class InpaintPrompts:
    positive: str = ""
    negative: str = ""
    mask_prompt: str = ""  # informational; masks come from files


@dataclass(frozen=True)
class SceneBundle:
    views: tuple[View, ...]
    prompts: InpaintPrompts = field(default_factory=InpaintPrompts)

    def __post_init__(self):
        ids = [v.id for v in self.views]
        if len(set(ids)) != len(ids):
            raise SceneError("duplicate view ids")
        if self.views:
            shape = self.views[0].intrinsics.shape
            for v in self.views:
                if v.intrinsics.shape != shape:
                    raise SceneError("all views must share one resolution", v.id)

    def view(self, view_id: int) -> View:
        for v in self.views:
            if v.id == view_id:
                return v
        raise KeyError(view_id)

    @property
    def ids(self) -> list[int]:
        return [v.id for v in self.views]

    def __len__(self):
        return len(self.views)


# ---------------------------------------------------------------- rasters


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def write_png(path, image: np.ndarray) -> None:
    arr = np.asarray(image, dtype=np.float64)
    data = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    mode = "L" if data.ndim == 2 else "RGB"
    Image.fromarray(data, mode=mode).save(path)


def read_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return (arr >= MASK_THRESHOLD).astype(np.uint8)


def write_mask(path, mask: np.ndarray) -> None:
    data = (np.asarray(mask) > 0).astype(np.uint8) * 255
    Image.fromarray(data, mode="L").save(path)


def read_depth_pfm(path) -> np.ndarray:
    """Read a grayscale little-endian PFM file (rows stored bottom-up)."""
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"Pf":
            raise ValidationError(f"{path}: bad PFM magic {magic!r} (grayscale 'Pf' only)")
        dims = fh.readline().split()
        scale_line = fh.readline().strip()
        try:
            width, height = int(dims[0]), int(dims[1])
            scale = float(scale_line)
        except (IndexError, ValueError):
            raise ValidationError(f"{path}: malformed PFM header") from None
        if scale >= 0:
            raise ValidationError(f"{path}: big-endian PFM (scale {scale}) is unsupported")
        payload = fh.read()
    if len(payload) != 4 * width * height:
        raise ValidationError(f"{path}: payload has {len(payload)} bytes, "
                              f"expected {4 * width * height}")
    data = np.frombuffer(payload, dtype="<f4").reshape(height, width)[::-1]
    if not np.all(np.isfinite(data)):
        raise ValidationError(f"{path}: PFM payload contains non-finite values")
    return data.astype(np.float64)


def write_depth_pfm(path, depth: np.ndarray) -> None:
    depth = np.asarray(depth)
    if depth.ndim != 2:
        raise ValidationError("PFM depth must be a 2-D raster")
    if not np.all(np.isfinite(depth)):
        raise ValidationError("refusing to write non-finite depth")
    height, width = depth.shape
    with open(path, "wb") as fh:
        fh.write(b"Pf\n%d %d\n-1.0\n" % (width, height))
        fh.write(np.ascontiguousarray(depth[::-1], dtype="<f4").tobytes())


# ----------------------------------------------------------------- cameras


def quaternion_to_matrix(q) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def _data_lines(path):
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            yield lineno, line.rstrip("\n")


def parse_colmap_text(cameras_file, images_file) -> list[tuple[int, CameraIntrinsics, CameraPose]]:
    """Parse COLMAP text-model cameras/images files (PINHOLE, SIMPLE_PINHOLE)."""
    cameras = {}
    for lineno, line in _data_lines(cameras_file):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split()
        where = f"{cameras_file}:{lineno}"
        if len(parts) < 4:
            raise ValidationError(f"{where}: malformed camera line")
        model = parts[1]
        try:
            cam_id, width, height = int(parts[0]), int(parts[2]), int(parts[3])
            params = [float(p) for p in parts[4:]]
        except ValueError:
            raise ValidationError(f"{where}: malformed camera line") from None
        if model == "PINHOLE" and len(params) == 4:
            fx, fy, cx, cy = params
        elif model == "SIMPLE_PINHOLE" and len(params) == 3:
            f, cx, cy = params
            fx = fy = f
        elif model in ("PINHOLE", "SIMPLE_PINHOLE"):
            raise ValidationError(f"{where}: wrong parameter count for {model}")
        else:
            raise ValidationError(f"{where}: unsupported camera model {model}")
        cameras[cam_id] = CameraIntrinsics(width, height, fx, fy, cx, cy)

    records = []
    expect_points = False
    for lineno, line in _data_lines(images_file):
        if line.lstrip().startswith("#"):
            continue
        if expect_points:
            # every image record is followed by a (possibly empty) POINTS2D line
            expect_points = False
            continue
        if not line.strip():
            continue
        parts = line.split()
        where = f"{images_file}:{lineno}"
        if len(parts) < 9:
            raise ValidationError(f"{where}: malformed image line")
        try:
            image_id = int(parts[0])
            q = np.array([float(v) for v in parts[1:5]])
            t = np.array([float(v) for v in parts[5:8]])
            cam_id = int(parts[8])
        except ValueError:
            raise ValidationError(f"{where}: malformed image line") from None
        if abs(np.linalg.norm(q) - 1.0) > QUAT_NORM_TOL:
            raise ValidationError(f"{where}: quaternion norm {np.linalg.norm(q):.6f} is not 1")
        if cam_id not in cameras:
            raise ValidationError(f"{where}: unknown camera id {cam_id}")
        R = quaternion_to_matrix(q / np.linalg.norm(q))
        records.append((image_id, cameras[cam_id], CameraPose(R, t)))
        expect_points = True
    return sorted(records, key=lambda r: r[0])


def parse_native_cameras(path) -> list[tuple[int, CameraIntrinsics, CameraPose]]:
    records = []
    for lineno, line in _data_lines(path):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 19:
            raise ValidationError(f"{path}:{lineno}: expected 19 fields, got {len(parts)}")
        try:
            view_id, width, height = int(parts[0]), int(parts[1]), int(parts[2])
            nums = [float(p) for p in parts[3:]]
        except ValueError:
            raise ValidationError(f"{path}:{lineno}: malformed camera record") from None
        try:
            intr = CameraIntrinsics(width, height, *nums[:4])
            pose = CameraPose(np.array(nums[4:13]).reshape(3, 3), np.array(nums[13:16]))
        except ValidationError as exc:
            raise SceneError(str(exc), view_id) from None
        records.append((view_id, intr, pose))
    return records


def format_native_cameras(records) -> str:
    lines = ["# id width height fx fy cx cy r00 r01 r02 r10 r11 r12 r20 r21 r22 tx ty tz"]
    for view_id, intr, pose in records:
        nums = [intr.fx, intr.fy, intr.cx, intr.cy, *pose.rotation.ravel(), *pose.translation]
        lines.append(f"{view_id} {intr.width} {intr.height} " + " ".join(repr(float(v)) for v in nums))
    return "\n".join(lines) + "\n"


def load_prompts(path) -> InpaintPrompts:
    keys = {"positive": "positive", "negative": "negative", "mask": "mask_prompt"}
    values = {}
    for lineno, line in _data_lines(path):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or key not in keys:
            raise ValidationError(f"{path}:{lineno}: expected positive/negative/mask = text")
        values[keys[key]] = value.strip()
    return InpaintPrompts(**values)


def load_scene(dir_path) -> SceneBundle:
    root = Path(dir_path)
    if not root.is_dir():
        raise SceneError(f"scene directory {root} does not exist")
    if (root / "cameras.txt").exists():
        records = parse_native_cameras(root / "cameras.txt")
    elif (root / "colmap" / "cameras.txt").exists() and (root / "colmap" / "images.txt").exists():
        records = parse_colmap_text(root / "colmap" / "cameras.txt", root / "colmap" / "images.txt")
    else:
        raise SceneError(f"{root}: no cameras.txt or colmap/ text model found")
    if not records:
        raise SceneError(f"{root}: camera file lists no views")

    views = []
    for view_id, intr, pose in sorted(records, key=lambda r: r[0]):
        image_path = root / "images" / f"{view_id}.png"
        mask_path = root / "masks" / f"{view_id}.png"
        for p in (image_path, mask_path):
            if not p.exists():
                raise SceneError(f"missing file {p}", view_id)
        depth_path = root / "depth" / f"{view_id}.pfm"
        depth = None
        if depth_path.exists():
            try:
                depth = read_depth_pfm(depth_path)
            except ValidationError as exc:
                raise SceneError(str(exc), view_id) from None
        views.append(View(view_id, intr, pose, read_png(image_path), read_mask(mask_path), depth))

    prompts = load_prompts(root / "prompts.txt") if (root / "prompts.txt").exists() else InpaintPrompts()
    return SceneBundle(tuple(views), prompts)


def save_scene(scene: SceneBundle, dir_path) -> None:
    root = Path(dir_path)
    for sub in ("images", "masks"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    (root / "cameras.txt").write_text(
        format_native_cameras([(v.id, v.intrinsics, v.pose) for v in scene.views]))
    for v in scene.views:
        write_png(root / "images" / f"{v.id}.png", v.image)
        write_mask(root / "masks" / f"{v.id}.png", v.mask)
        if v.depth is not None:
            (root / "depth").mkdir(exist_ok=True)
            write_depth_pfm(root / "depth" / f"{v.id}.pfm", v.depth)
    p = scene.prompts
    if p.positive or p.negative or p.mask_prompt:
        (root / "prompts.txt").write_text(
            f"positive = {p.positive}\nnegative = {p.negative}\nmask = {p.mask_prompt}\n")


_ID_RE = re.compile(r"^(\d+)\.png$")


def read_image_dir(dir_path) -> dict[int, np.ndarray]:
    """Read ``{id}.png`` files of a directory into a dict keyed by id."""
    out = {}
    for p in sorted(Path(dir_path).iterdir()):
        m = _ID_RE.match(p.name)
        if m:
            out[int(m.group(1))] = read_png(p)
    return out

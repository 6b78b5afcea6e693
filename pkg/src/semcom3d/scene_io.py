"""Synthetic multi-view scenes, an analytic reference renderer, and dataset I/O.

Conventions used throughout the package:

* World units are meters, the scene lives in an axis-aligned bounding box.
* Cameras are pinhole, camera-to-world poses, OpenGL axes: the camera looks
  down its local -z axis, +x is right and +y is up.
* A pixel ``(row, col)`` is back-projected through the point
  ``(col - cx, -(row - cy), -focal)`` in camera coordinates, so the pixel at
  the principal point maps exactly onto the optical axis.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import FormatError, InvalidArgumentError, NotFoundError

logger = logging.getLogger(__name__)

DATASET_VERSION = 1
CAMERAS_FILE = "cameras.json"
SCENE_FILE = "scene.json"

# Palette used by the synthetic generator; names feed the caption stub.
NAMED_COLORS = {
    "red": (0.9, 0.1, 0.1),
    "green": (0.1, 0.8, 0.2),
    "blue": (0.15, 0.3, 0.95),
    "yellow": (0.95, 0.85, 0.1),
    "magenta": (0.85, 0.15, 0.8),
    "cyan": (0.1, 0.85, 0.85),
    "orange": (1.0, 0.55, 0.05),
    "white": (0.95, 0.95, 0.95),
}


@dataclass
class CameraModel:
    width: int
    height: int
    focal: float
    rotation: np.ndarray  # 3x3, camera-to-world
    translation: np.ndarray  # camera center in world coordinates
    cx: float | None = None
    cy: float | None = None

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.cx is None:
            self.cx = self.width / 2.0
        if self.cy is None:
            self.cy = self.height / 2.0
        self.validate()

    def validate(self):
        if self.width < 1 or self.height < 1:
            raise InvalidArgumentError(f"image size must be positive, got {self.width}x{self.height}")
        vals = [self.focal, self.cx, self.cy, *self.rotation.ravel(), *self.translation]
        if not np.all(np.isfinite(vals)):
            raise InvalidArgumentError("camera parameters must be finite")
        if self.focal <= 0:
            raise InvalidArgumentError(f"focal must be positive, got {self.focal}")
        R = self.rotation
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-6) or abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise InvalidArgumentError("rotation must be orthonormal with determinant +1")

    @property
    def c2w(self) -> np.ndarray:
        """3x4 camera-to-world matrix."""
        return np.concatenate([self.rotation, self.translation[:, None]], axis=1)

    @classmethod
    def from_c2w(cls, c2w, width, height, focal, cx=None, cy=None):
        m = np.asarray(c2w, dtype=np.float64).reshape(3, 4)
        return cls(width, height, focal, m[:, :3], m[:, 3], cx, cy)

    @classmethod
    def look_at(cls, eye, target, width, height, focal, up=(0.0, 1.0, 0.0)):
        eye = np.asarray(eye, dtype=np.float64)
        back = eye - np.asarray(target, dtype=np.float64)
        back /= np.linalg.norm(back)
        right = np.cross(np.asarray(up, dtype=np.float64), back)
        right /= np.linalg.norm(right)
        true_up = np.cross(back, right)
        R = np.stack([right, true_up, back], axis=1)
        return cls(width, height, focal, R, eye)

    def pixel_directions(self) -> np.ndarray:
        """Unit world-space ray directions for every pixel, shape (H, W, 3)."""
        rows, cols = np.meshgrid(np.arange(self.height), np.arange(self.width), indexing="ij")
        d_cam = np.stack(
            [(cols - self.cx) / self.focal, -(rows - self.cy) / self.focal, -np.ones(rows.shape)],
            axis=-1,
        )
        d = d_cam @ self.rotation.T
        return d / np.linalg.norm(d, axis=-1, keepdims=True)


@dataclass
class Primitive:
    kind: str  # "sphere" | "box"
    center: np.ndarray
    size: np.ndarray  # radius (shape (1,)) or half-extents (shape (3,))
    color: np.ndarray
    density: float
    object_id: int

    def __post_init__(self):
        if self.kind not in ("sphere", "box"):
            raise InvalidArgumentError(f"unknown primitive kind {self.kind!r}")
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.size = np.atleast_1d(np.asarray(self.size, dtype=np.float64))
        if self.kind == "sphere":
            self.size = self.size.reshape(1)
        else:
            self.size = np.broadcast_to(self.size, (3,)).copy()
        self.color = np.asarray(self.color, dtype=np.float64).reshape(3)
        self.density = float(self.density)

    @property
    def half_extent(self) -> np.ndarray:
        return np.repeat(self.size, 3) if self.kind == "sphere" else self.size

    @property
    def bounding_radius(self) -> float:
        return float(self.size[0] if self.kind == "sphere" else np.linalg.norm(self.size))

    def contains(self, pts: np.ndarray) -> np.ndarray:
        rel = pts - self.center
        if self.kind == "sphere":
            return np.einsum("...i,...i->...", rel, rel) <= self.size[0] ** 2
        return np.all(np.abs(rel) <= self.size, axis=-1)

    def intersect(self, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        """Nearest non-negative ray parameter of entry, +inf on a miss."""
        if self.kind == "sphere":
            oc = origins - self.center
            b = np.einsum("...i,...i->...", oc, dirs)
            c = np.einsum("...i,...i->...", oc, oc) - self.size[0] ** 2
            disc = b * b - c
            sq = np.sqrt(np.maximum(disc, 0.0))
            t0, t1 = -b - sq, -b + sq
            t = np.where(t0 >= 0, t0, t1)
            return np.where((disc >= 0) & (t >= 0), t, np.inf)
        t_in, t_out = _slab(origins, dirs, self.center - self.size, self.center + self.size)
        t = np.maximum(t_in, 0.0)
        return np.where(t_out >= t, t, np.inf)

    def to_dict(self):
        return {
            "kind": self.kind,
            "center": self.center.tolist(),
            "size": self.size.tolist(),
            "color": self.color.tolist(),
            "density": self.density,
            "object_id": self.object_id,
        }


@dataclass
class SceneSpec:
    primitives: list[Primitive]
    bbox_min: np.ndarray = field(default_factory=lambda: -np.ones(3))
    bbox_max: np.ndarray = field(default_factory=lambda: np.ones(3))
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.bbox_min = np.asarray(self.bbox_min, dtype=np.float64).reshape(3)
        self.bbox_max = np.asarray(self.bbox_max, dtype=np.float64).reshape(3)
        self.background = np.asarray(self.background, dtype=np.float64).reshape(3)
        ids = [p.object_id for p in self.primitives]
        if len(set(ids)) != len(ids):
            raise InvalidArgumentError(f"object ids must be unique, got {ids}")
        for p in self.primitives:
            if p.density < 0:
                raise InvalidArgumentError(f"object {p.object_id}: negative density")
            if np.any(p.center - p.half_extent < self.bbox_min - 1e-12) or np.any(
                p.center + p.half_extent > self.bbox_max + 1e-12
            ):
                raise InvalidArgumentError(f"object {p.object_id} leaves the bounding box")

    def get(self, object_id: int) -> Primitive:
        for p in self.primitives:
            if p.object_id == object_id:
                return p
        raise NotFoundError(f"object id {object_id} not in scene")

    def only(self, object_id: int) -> "SceneSpec":
        """Copy of the scene holding just one object."""
        return SceneSpec([self.get(object_id)], self.bbox_min, self.bbox_max, self.background)

    def to_dict(self):
        return {
            "primitives": [p.to_dict() for p in self.primitives],
            "bbox_min": self.bbox_min.tolist(),
            "bbox_max": self.bbox_max.tolist(),
            "background": self.background.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        prims = [Primitive(**p) for p in d["primitives"]]
        return cls(prims, d["bbox_min"], d["bbox_max"], d["background"])


def _slab(origins, dirs, lo, hi):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (lo - origins) * inv
        t2 = (hi - origins) * inv
    # direction component 0 with origin inside the slab yields nan; treat as unbounded
    tmin = np.where(np.isnan(t1), -np.inf, np.minimum(t1, t2))
    tmax = np.where(np.isnan(t1), np.inf, np.maximum(t1, t2))
    return tmin.max(axis=-1), tmax.min(axis=-1)


def build_synthetic_scene(seed: int, n_objects: int, density: float = 40.0) -> SceneSpec:
    """Random non-overlapping spheres and boxes inside the unit-cube-sized box [-1, 1]^3."""
    if n_objects < 1:
        raise InvalidArgumentError(f"n_objects must be >= 1, got {n_objects}")
    if n_objects > len(NAMED_COLORS):
        raise InvalidArgumentError(f"at most {len(NAMED_COLORS)} objects supported")
    rng = np.random.default_rng(seed)
    names = list(NAMED_COLORS)
    color_order = rng.permutation(len(names))
    prims: list[Primitive] = []
    for k in range(n_objects):
        for _ in range(10_000):
            kind = "sphere" if rng.random() < 0.5 else "box"
            if kind == "sphere":
                size = np.array([rng.uniform(0.2, 0.32)])
            else:
                size = rng.uniform(0.14, 0.24, size=3)
            center = np.array([rng.uniform(-0.5, 0.5), rng.uniform(-0.25, 0.25), rng.uniform(-0.5, 0.5)])
            cand = Primitive(kind, center, size, NAMED_COLORS[names[color_order[k]]], density, k + 1)
            if all(
                np.linalg.norm(cand.center - p.center) > cand.bounding_radius + p.bounding_radius + 0.05
                for p in prims
            ):
                prims.append(cand)
                break
        else:
            raise InvalidArgumentError(f"could not place {n_objects} non-overlapping objects")
    return SceneSpec(prims)


def make_camera_rig(
    width: int = 64,
    height: int = 64,
    radius: float = 3.2,
    fov_deg: float = 34.0,
    grid: int = 5,
    azimuth_deg: tuple[float, float] = (-18.0, 18.0),
    elevation_deg: tuple[float, float] = (12.0, 32.0),
    jitter_deg: float = 2.0,
    seed: int = 0,
) -> list[CameraModel]:
    """Forward-facing rig: ``grid x grid`` poses on a spherical cap, all looking at the origin."""
    rng = np.random.default_rng(seed)
    focal = 0.5 * width / np.tan(np.deg2rad(fov_deg) / 2)
    cams = []
    for el in np.linspace(*elevation_deg, grid):
        for az in np.linspace(*azimuth_deg, grid):
            a = np.deg2rad(az + rng.uniform(-jitter_deg, jitter_deg))
            e = np.deg2rad(el + rng.uniform(-jitter_deg, jitter_deg))
            eye = radius * np.array([np.cos(e) * np.sin(a), np.sin(e), np.cos(e) * np.cos(a)])
            cams.append(CameraModel.look_at(eye, np.zeros(3), width, height, focal))
    return cams


# one held-out pose per rig row and column; the center pose stays in training
DEFAULT_HOLDOUT = (1, 8, 10, 19, 22)
DEFAULT_REFERENCE_VIEW = 12


def analytic_render(scene: SceneSpec, camera: CameraModel, samples_per_ray: int = 256) -> np.ndarray:
    """Quadrature of the emission-absorption integral over the scene's exact density field.

    Samples are bin midpoints spread uniformly over each ray's passage through
    the scene bounding box; rays missing the box see the background.
    """
    if samples_per_ray < 1:
        raise InvalidArgumentError("samples_per_ray must be >= 1")
    camera.validate()
    dirs = camera.pixel_directions().reshape(-1, 3)
    origins = np.broadcast_to(camera.translation, dirs.shape)
    t_in, t_out = _slab(origins, dirs, scene.bbox_min, scene.bbox_max)
    t_in = np.maximum(t_in, 0.0)
    hit = t_out > t_in
    t_out = np.where(hit, t_out, t_in)

    delta = (t_out - t_in) / samples_per_ray
    t = t_in[:, None] + (np.arange(samples_per_ray) + 0.5)[None, :] * delta[:, None]
    pts = origins[:, None, :] + t[..., None] * dirs[:, None, :]

    sigma = np.zeros(t.shape)
    color = np.zeros(t.shape + (3,))
    for p in scene.primitives:
        inside = p.contains(pts)
        sigma = np.where(inside, p.density, sigma)
        color[inside] = p.color

    alpha = 1.0 - np.exp(-sigma * delta[:, None])
    trans = np.cumprod(np.concatenate([np.ones((len(t), 1)), 1.0 - alpha[:, :-1]], axis=1), axis=1)
    w = trans * alpha
    rgb = (w[..., None] * color).sum(axis=1) + (1.0 - w.sum(axis=1))[:, None] * scene.background
    return np.clip(rgb, 0.0, 1.0).reshape(camera.height, camera.width, 3)


def first_hit_ids(scene: SceneSpec, camera: CameraModel) -> np.ndarray:
    """Object id of the first visible primitive per pixel, 0 where the ray hits nothing."""
    dirs = camera.pixel_directions()
    origins = np.broadcast_to(camera.translation, dirs.shape)
    best_t = np.full(dirs.shape[:2], np.inf)
    ids = np.zeros(dirs.shape[:2], dtype=np.int64)
    for p in scene.primitives:
        if p.density <= 0:
            continue
        t = p.intersect(origins, dirs)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        ids = np.where(closer, p.object_id, ids)
    return ids


def ground_truth_object_mask(scene: SceneSpec, camera: CameraModel, object_id: int) -> np.ndarray:
    scene.get(object_id)
    return first_hit_ids(scene, camera) == object_id


def quantize_image(img: np.ndarray) -> np.ndarray:
    """Snap to the 8-bit lattice so PNG storage is lossless."""
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


@dataclass
class View:
    image: np.ndarray
    camera: CameraModel


@dataclass
class MultiViewDataset:
    images: np.ndarray  # (N, H, W, 3) in [0, 1]
    cameras: list[CameraModel]
    near: float = 2.2
    far: float = 4.2
    holdout: tuple[int, ...] = ()
    masks: dict[int, np.ndarray] = field(default_factory=dict)  # object_id -> (N, H, W) bool

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.holdout = tuple(int(i) for i in self.holdout)
        if self.images.ndim != 4 or self.images.shape[-1] != 3:
            raise InvalidArgumentError(f"images must be (N, H, W, 3), got {self.images.shape}")
        if len(self.cameras) != len(self.images):
            raise InvalidArgumentError("one camera per image required")

    def __len__(self):
        return len(self.images)

    @property
    def height(self) -> int:
        return self.images.shape[1]

    @property
    def width(self) -> int:
        return self.images.shape[2]

    @property
    def train_indices(self) -> list[int]:
        return [i for i in range(len(self)) if i not in self.holdout]

    def view(self, i: int) -> View:
        return View(self.images[i], self.cameras[i])

    def subset(self, indices) -> "MultiViewDataset":
        indices = list(indices)
        return MultiViewDataset(
            self.images[indices],
            [self.cameras[i] for i in indices],
            self.near,
            self.far,
            (),
            {k: v[indices] for k, v in self.masks.items()},
        )


def render_dataset(
    scene: SceneSpec,
    cameras: list[CameraModel] | None = None,
    holdout=DEFAULT_HOLDOUT,
    samples_per_ray: int = 256,
    near: float = 2.2,
    far: float = 4.2,
) -> MultiViewDataset:
    """Render every pose with the analytic oracle plus per-object ground-truth masks."""
    cameras = make_camera_rig() if cameras is None else cameras
    if len(cameras) < 2:
        raise InvalidArgumentError("a dataset needs at least two views")
    images = np.stack([quantize_image(analytic_render(scene, c, samples_per_ray)) for c in cameras])
    masks = {
        p.object_id: np.stack([ground_truth_object_mask(scene, c, p.object_id) for c in cameras])
        for p in scene.primitives
    }
    holdout = tuple(i for i in holdout if i < len(cameras))
    return MultiViewDataset(images, cameras, near, far, holdout, masks)


def save_scene(scene: SceneSpec, path) -> None:
    Path(path).write_text(json.dumps(scene.to_dict(), indent=2))


def load_scene(path) -> SceneSpec:
    path = Path(path)
    try:
        return SceneSpec.from_dict(json.loads(path.read_text()))
    except (OSError, KeyError, TypeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable scene file ({exc})", path) from exc


def save_dataset(dataset: MultiViewDataset, path) -> None:
    """Write ``view_####.png`` images, optional ``mask_<id>_####.png`` masks and ``cameras.json``."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    levels = dataset.images * 255.0
    if not np.array_equal(np.round(levels), levels):
        raise InvalidArgumentError("images must lie on the 8-bit lattice; use quantize_image first")
    cam0 = dataset.cameras[0]
    meta = {
        "version": DATASET_VERSION,
        "width": dataset.width,
        "height": dataset.height,
        "focal": cam0.focal,
        "cx": cam0.cx,
        "cy": cam0.cy,
        "near": dataset.near,
        "far": dataset.far,
        "holdout": list(dataset.holdout),
        "frames": [],
        "masks": {},
    }
    for i, (img, cam) in enumerate(zip(dataset.images, dataset.cameras)):
        if (cam.focal, cam.cx, cam.cy, cam.width, cam.height) != (
            cam0.focal, cam0.cx, cam0.cy, dataset.width, dataset.height,
        ):
            raise InvalidArgumentError("all views must share intrinsics")
        name = f"view_{i:04d}.png"
        Image.fromarray(np.round(img * 255.0).astype(np.uint8)).save(root / name)
        meta["frames"].append({"file": name, "c2w": cam.c2w.ravel().tolist()})
    for oid, stack in dataset.masks.items():
        files = []
        for i, m in enumerate(stack):
            name = f"mask_{oid}_{i:04d}.png"
            Image.fromarray(m.astype(np.uint8) * 255).save(root / name)
            files.append(name)
        meta["masks"][str(oid)] = files
    (root / CAMERAS_FILE).write_text(json.dumps(meta, indent=1))


def _read_png(path: Path, mode: str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert(mode))
    except OSError as exc:
        raise FormatError(f"cannot read image ({exc})", path) from exc


def load_dataset(path) -> MultiViewDataset:
    root = Path(path)
    meta_path = root / CAMERAS_FILE
    if not meta_path.is_file():
        raise FormatError("missing camera metadata", meta_path)
    try:
        meta = json.loads(meta_path.read_text())
        w, h, focal = int(meta["width"]), int(meta["height"]), float(meta["focal"])
        frames = meta["frames"]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed metadata ({exc})", meta_path) from exc
    if meta.get("version", DATASET_VERSION) != DATASET_VERSION:
        raise FormatError(f"unsupported version {meta.get('version')}", meta_path)

    images, cams = [], []
    for fr in frames:
        img_path = root / fr["file"]
        if not img_path.is_file():
            raise FormatError("image listed in metadata is missing", img_path)
        arr = _read_png(img_path, "RGB")
        if arr.shape[:2] != (h, w):
            raise FormatError(f"image is {arr.shape[1]}x{arr.shape[0]}, metadata says {w}x{h}", img_path)
        c2w = fr.get("c2w")
        if c2w is None or len(c2w) != 12:
            raise FormatError(f"frame {fr['file']} needs 12 c2w values", meta_path)
        images.append(arr.astype(np.float64) / 255.0)
        try:
            cams.append(CameraModel.from_c2w(c2w, w, h, focal, meta.get("cx"), meta.get("cy")))
        except InvalidArgumentError as exc:
            raise FormatError(f"bad pose for {fr['file']} ({exc})", meta_path) from exc

    masks = {}
    for oid, files in meta.get("masks", {}).items():
        stack = []
        for name in files:
            arr = _read_png(root / name, "L")
            if arr.shape != (h, w):
                raise FormatError("mask size differs from images", root / name)
            stack.append(arr > 127)
        masks[int(oid)] = np.stack(stack)
    if len(images) < 2:
        raise FormatError("a dataset needs at least two views", meta_path)
    return MultiViewDataset(
        np.stack(images), cams, float(meta.get("near", 2.2)), float(meta.get("far", 4.2)),
        tuple(meta.get("holdout", ())), masks,
    )

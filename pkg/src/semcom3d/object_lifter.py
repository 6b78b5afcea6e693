"""Prompted 2D segmentation, mask inverse rendering onto a voxel grid, object view extraction.

A 2D mask from one view is lifted into a soft voxel confidence grid ``U`` by
rendering ``m(r) = sum_i w_i U(r(t_i))`` with the frozen compositing weights of
a radiance field and minimizing

    L = -sum_r m_sam(r) m(r) + lam * sum_r (1 - m_sam(r)) m(r)

by projected gradient descent (``U`` is clamped to [0, 1] after each step).
The lifted grid then masks every other view of the scene.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol

import numpy as np
import torch
import torch.nn.functional as F
import yaml
from scipy import ndimage

from .errors import FormatError, InvalidArgumentError, NotFoundError, TrainingError
from .radiance_field import RenderConfig, render_weights
from .scene_io import CameraModel, MultiViewDataset, View

logger = logging.getLogger(__name__)

GRID_FORMAT = "semcom3d.mask_grid"
GRID_VERSION = 1


@dataclass
class Prompt:
    points: list = field(default_factory=list)  # (row, col) pixels
    text: str | None = None
    label: str = "object"

    def __post_init__(self):
        self.points = [tuple(int(v) for v in p) for p in self.points]

    @property
    def kind(self) -> str:
        return "points" if self.points else "text"


@dataclass
class SegMask2D:
    mask: np.ndarray  # (H, W) bool
    iou_score: float = 1.0
    label: str = "object"

    def __post_init__(self):
        m = np.asarray(self.mask)
        if m.dtype != bool:
            if not np.isin(m, (0, 1)).all():
                raise InvalidArgumentError("mask values must be 0 or 1")
            m = m.astype(bool)
        self.mask = m


class Segmenter(Protocol):
    def __call__(self, image: np.ndarray, prompt: Prompt) -> np.ndarray: ...


class RegionGrowSegmenter:
    """Connected region of pixels within color distance ``tau`` of each prompt pixel.

    The union over all prompt points is returned. Distances are Euclidean in
    RGB, and connectivity is 4-neighbour.
    """

    def __init__(self, tau: float = 0.1):
        self.tau = tau

    def __call__(self, image, prompt: Prompt) -> np.ndarray:
        image = np.asarray(image, dtype=np.float64)
        out = np.zeros(image.shape[:2], dtype=bool)
        for r, c in prompt.points:
            close = np.linalg.norm(image - image[r, c], axis=-1) <= self.tau
            labels, _ = ndimage.label(close)
            out |= labels == labels[r, c]
        return out


def mask_iou(a, b) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def segment_with_prompt(image, prompt: Prompt, segmenter: Segmenter | None = None,
                        ground_truth=None, classifier: Callable | None = None) -> SegMask2D:
    """Run a (pluggable) prompt segmenter and attach an IoU score and a label.

    The score is the IoU against ``ground_truth`` when given, else 1.0. The
    label comes from ``classifier(image, mask)`` when given, else the prompt's
    configured label.
    """
    image = np.asarray(image)
    if not prompt.points:
        raise InvalidArgumentError("prompt has no points; resolve text with text_to_point first")
    h, w = image.shape[:2]
    for r, c in prompt.points:
        if not (0 <= r < h and 0 <= c < w):
            raise InvalidArgumentError(f"prompt point {(r, c)} outside {h}x{w} image")
    segmenter = segmenter or RegionGrowSegmenter()
    mask = np.asarray(segmenter(image, prompt), dtype=bool)
    score = 1.0 if ground_truth is None else mask_iou(mask, ground_truth)
    label = classifier(image, mask) if classifier is not None else prompt.label
    return SegMask2D(mask, score, label)


def text_to_point(text: str, lookup: dict) -> tuple:
    if lookup is None:
        raise InvalidArgumentError("a text-to-point lookup table is required")
    if not text or not text.strip():
        raise InvalidArgumentError("empty text prompt")
    key = text.strip().lower()
    table = {str(k).strip().lower(): v for k, v in lookup.items()}
    if key not in table:
        raise NotFoundError(f"no point registered for text {text!r}")
    return tuple(int(v) for v in table[key])


def load_prompt_table(path) -> dict:
    """Read a ``text: [row, col]`` mapping from a YAML (or JSON) file."""
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise FormatError(f"unreadable prompt table ({exc})", path) from exc
    if not isinstance(data, dict):
        raise FormatError("prompt table must be a mapping", path)
    try:
        return {str(k): (int(v[0]), int(v[1])) for k, v in data.items()}
    except (TypeError, ValueError, IndexError) as exc:
        raise FormatError(f"bad prompt table entry ({exc})", path) from exc


@dataclass
class MaskGrid:
    """Soft confidences ``U`` on a regular lattice spanning the bounding box.

    ``values`` is indexed ``[ix, iy, iz]``; lattice nodes sit at
    ``linspace(bbox_min, bbox_max, n)`` per axis (node-centred, so the corner
    nodes lie on the box).
    """

    values: torch.Tensor
    bbox_min: np.ndarray = field(default_factory=lambda: np.full(3, -1.0))
    bbox_max: np.ndarray = field(default_factory=lambda: np.full(3, 1.0))
    loss_trace: list = field(default_factory=list)

    def __post_init__(self):
        self.values = torch.as_tensor(self.values, dtype=torch.float32)
        if self.values.ndim != 3:
            raise InvalidArgumentError(f"grid must be 3D, got shape {tuple(self.values.shape)}")
        self.bbox_min = np.asarray(self.bbox_min, dtype=np.float64).reshape(3)
        self.bbox_max = np.asarray(self.bbox_max, dtype=np.float64).reshape(3)
        if np.any(self.bbox_max <= self.bbox_min):
            raise InvalidArgumentError("empty bounding box")

    @classmethod
    def zeros(cls, resolution=64, bbox_min=(-1, -1, -1), bbox_max=(1, 1, 1)):
        res = (resolution,) * 3 if np.isscalar(resolution) else tuple(resolution)
        return cls(torch.zeros(res), bbox_min, bbox_max)

    @classmethod
    def full(cls, value, resolution=64, bbox_min=(-1, -1, -1), bbox_max=(1, 1, 1)):
        g = cls.zeros(resolution, bbox_min, bbox_max)
        g.values.fill_(float(value))
        return g

    @property
    def resolution(self) -> tuple:
        return tuple(self.values.shape)

    def node_coords(self) -> np.ndarray:
        """World coordinates of every lattice node, shape (nx, ny, nz, 3)."""
        axes = [np.linspace(self.bbox_min[k], self.bbox_max[k], self.resolution[k]) for k in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def clamp_(self):
        with torch.no_grad():
            self.values.clamp_(0.0, 1.0)
        return self


def sample_grid(values: torch.Tensor, points: torch.Tensor, bbox_min, bbox_max) -> torch.Tensor:
    """Trilinear interpolation of ``values[ix, iy, iz]`` at world points ``(..., 3)``.

    Points outside the box are clamped onto it.
    """
    lo = torch.as_tensor(bbox_min, dtype=points.dtype)
    hi = torch.as_tensor(bbox_max, dtype=points.dtype)
    u = ((points - lo) / (hi - lo) * 2.0 - 1.0).clamp(-1.0, 1.0)
    lead = u.shape[:-1]
    # grid_sample wants a (N, C, D, H, W) volume indexed (z, y, x) and (x, y, z) coordinates
    vol = values.to(points.dtype).permute(2, 1, 0)[None, None]
    out = F.grid_sample(vol, u.reshape(1, -1, 1, 1, 3), mode="bilinear", padding_mode="border",
                        align_corners=True)
    return out.reshape(lead)


def render_mask_confidence(grid: MaskGrid, weights, sample_points, values: torch.Tensor | None = None):
    """``m = sum_i w_i U(x_i)`` per ray for weights ``(..., P)`` and points ``(..., P, 3)``.

    ``values`` overrides the grid contents (used to keep autograd on a leaf).
    Numpy inputs give a numpy result.
    """
    as_numpy = isinstance(weights, np.ndarray)
    w = torch.as_tensor(weights, dtype=torch.float32)
    pts = torch.as_tensor(sample_points, dtype=torch.float32)
    u = sample_grid(grid.values if values is None else values, pts, grid.bbox_min, grid.bbox_max)
    m = (w * u).sum(-1)
    return m.detach().numpy() if as_numpy else m


def mask_projection_loss(m_sam, m_3d, lam: float = 0.05):
    """``-sum m_sam m_3d + lam sum (1 - m_sam) m_3d`` over the ray set."""
    if lam < 0:
        raise InvalidArgumentError(f"negative-term weight must be >= 0, got {lam}")
    as_numpy = not isinstance(m_3d, torch.Tensor)
    m3 = torch.as_tensor(m_3d, dtype=torch.float64 if as_numpy else None)
    ms = torch.as_tensor(m_sam, dtype=m3.dtype)
    if ms.shape != m3.shape:
        raise InvalidArgumentError(f"shape mismatch {tuple(ms.shape)} vs {tuple(m3.shape)}")
    loss = -(ms * m3).sum() + lam * ((1.0 - ms) * m3).sum()
    return float(loss) if as_numpy else loss


def lift_mask_to_3d(
    field,
    view: View,
    segmask: SegMask2D,
    iters: int = 300,
    lam: float = 0.05,
    lr: float = 1.0,
    seed: int = 0,
    cfg: RenderConfig | None = None,
    rays_per_iter: int = 1024,
    resolution: int = 64,
    bbox_min=(-1.0, -1.0, -1.0),
    bbox_max=(1.0, 1.0, 1.0),
) -> MaskGrid:
    """Lift a single-view 2D mask into a voxel confidence grid.

    Compositing weights come from the frozen field and are computed once.
    Each iteration takes a seed-deterministic random batch of rays, does one
    SGD step on the projection loss and clamps ``U`` to [0, 1]. The loss over
    all rays of the view is logged after every step in ``loss_trace``.
    """
    cfg = cfg or RenderConfig()
    grid = MaskGrid.zeros(resolution, bbox_min, bbox_max)
    mask = np.asarray(segmask.mask, dtype=bool)
    cam = view.camera
    if mask.shape != (cam.height, cam.width):
        raise InvalidArgumentError(f"mask shape {mask.shape} does not match {cam.height}x{cam.width} view")
    if iters <= 0:
        return grid

    w_all, p_all = render_weights(field, cam, cfg)
    m_sam = torch.as_tensor(mask.reshape(-1), dtype=torch.float32)
    n = w_all.shape[0]
    gen = torch.Generator().manual_seed(seed)
    values = grid.values.clone().requires_grad_(True)
    opt = torch.optim.SGD([values], lr=lr)
    for it in range(iters):
        idx = torch.randperm(n, generator=gen)[:rays_per_iter]
        m3 = render_mask_confidence(grid, w_all[idx], p_all[idx], values=values)
        loss = mask_projection_loss(m_sam[idx], m3, lam)
        if not torch.isfinite(loss):
            raise TrainingError("mask lifting loss diverged", epoch=it)
        opt.zero_grad()
        loss.backward()
        opt.step()
        with torch.no_grad():
            values.clamp_(0.0, 1.0)
            full = mask_projection_loss(m_sam, render_mask_confidence(grid, w_all, p_all, values=values), lam)
        grid.loss_trace.append(float(full))
    grid.values = values.detach()
    logger.debug("lifted mask: loss %.3f -> %.3f", grid.loss_trace[0], grid.loss_trace[-1])
    return grid


def render_object_mask(field, grid: MaskGrid, camera: CameraModel, cfg: RenderConfig | None = None):
    """Soft object mask ``m`` for every pixel of a camera, shape (H, W)."""
    cfg = cfg or RenderConfig()
    w, p = render_weights(field, camera, cfg)
    with torch.no_grad():
        m = render_mask_confidence(grid, w, p)
    return m.numpy().reshape(camera.height, camera.width)


def extract_object_views(dataset: MultiViewDataset, field, grid: MaskGrid, threshold: float = 0.5,
                         cfg: RenderConfig | None = None):
    """Mask every dataset image with the lifted object.

    Returns ``(images, masks)``: images ``(N, H, W, 3)`` with non-object
    pixels exactly zero, and the binary masks ``(N, H, W)``.
    """
    cfg = cfg or RenderConfig.for_dataset(dataset)
    masks = np.stack([render_object_mask(field, grid, c, cfg) >= threshold for c in dataset.cameras])
    images = dataset.images * masks[..., None]
    return images, masks


def save_grid(grid: MaskGrid, path) -> None:
    header = {"format": GRID_FORMAT, "version": GRID_VERSION, "resolution": list(grid.resolution),
              "bbox_min": grid.bbox_min.tolist(), "bbox_max": grid.bbox_max.tolist()}
    with open(path, "wb") as fh:
        np.savez(fh, header=np.array(json.dumps(header)), values=grid.values.numpy())


def load_grid(path) -> MaskGrid:
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as data:
            header = json.loads(str(data["header"]))
            values = data["values"]
    except (OSError, KeyError, ValueError) as exc:
        raise FormatError(f"unreadable mask grid ({exc})", path) from exc
    if header.get("format") != GRID_FORMAT or header.get("version") != GRID_VERSION:
        raise FormatError("not a mask grid checkpoint", path)
    if list(values.shape) != header.get("resolution"):
        raise FormatError(f"grid shape {values.shape} disagrees with header {header.get('resolution')}", path)
    return MaskGrid(torch.as_tensor(values), header["bbox_min"], header["bbox_max"])

"""Tiny neural radiance field: ray casting, volume rendering and photometric fitting."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import FormatError, InvalidArgumentError, NumericError, TrainingError
from .scene_io import CameraModel, MultiViewDataset

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "semcom3d.radiance_field"
CHECKPOINT_VERSION = 1


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    near: float
    far: float

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.direction = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-9:
            raise InvalidArgumentError("ray direction must be unit length")
        if not 0 <= self.near < self.far:
            raise InvalidArgumentError(f"need 0 <= near < far, got {self.near}, {self.far}")

    def at(self, t):
        return self.origin + np.multiply.outer(t, self.direction)


@dataclass
class RenderConfig:
    samples: int = 64
    near: float = 2.2
    far: float = 4.2
    background: tuple = (0.0, 0.0, 0.0)
    jitter: bool = False

    def __post_init__(self):
        if self.samples < 2:
            raise InvalidArgumentError(f"need at least 2 samples per ray, got {self.samples}")
        if not 0 <= self.near < self.far:
            raise InvalidArgumentError(f"need 0 <= near < far, got {self.near}, {self.far}")

    @classmethod
    def for_dataset(cls, dataset: MultiViewDataset, **kw):
        return cls(near=dataset.near, far=dataset.far, **kw)


def positional_encoding(x: torch.Tensor, n_freqs: int) -> torch.Tensor:
    """``[x, sin(2^k pi x), cos(2^k pi x)]`` for k < n_freqs."""
    if n_freqs == 0:
        return x
    freqs = (2.0 ** torch.arange(n_freqs, dtype=x.dtype, device=x.device)) * math.pi
    xb = x[..., None] * freqs
    return torch.cat([x, torch.sin(xb).flatten(-2), torch.cos(xb).flatten(-2)], dim=-1)


class RadianceField(nn.Module):
    """MLP mapping (position, view direction) to (color in [0,1]^3, density >= 0)."""

    def __init__(self, pos_freqs: int = 6, dir_freqs: int = 2, width: int = 64, depth: int = 4):
        super().__init__()
        self.pos_freqs, self.dir_freqs, self.width, self.depth = pos_freqs, dir_freqs, width, depth
        in_pos = 3 * (1 + 2 * pos_freqs)
        in_dir = 3 * (1 + 2 * dir_freqs)
        layers = []
        for i in range(depth):
            layers += [nn.Linear(in_pos if i == 0 else width, width), nn.ReLU()]
        self.trunk = nn.Sequential(*layers)
        self.density_head = nn.Linear(width, 1)
        self.color_head = nn.Sequential(
            nn.Linear(width + in_dir, width // 2), nn.ReLU(), nn.Linear(width // 2, 3)
        )

    @property
    def arch(self) -> dict:
        return {"pos_freqs": self.pos_freqs, "dir_freqs": self.dir_freqs, "width": self.width, "depth": self.depth}

    def forward(self, x, d):
        h = self.trunk(positional_encoding(x, self.pos_freqs))
        # shift keeps the untrained field mostly transparent
        sigma = F.softplus(self.density_head(h)[..., 0] - 1.0)
        rgb = torch.sigmoid(self.color_head(torch.cat([h, positional_encoding(d, self.dir_freqs)], -1)))
        return rgb, sigma


class AnalyticField(nn.Module):
    """Field with the exact piecewise-constant density and color of a scene.

    Lets the renderer and the mask lifter run against ground truth, without a
    trained network in the loop. Later primitives win where two overlap.
    """

    def __init__(self, scene):
        super().__init__()
        self.scene = scene

    def forward(self, x, d):
        sigma = torch.zeros(x.shape[:-1], dtype=x.dtype)
        rgb = torch.zeros(x.shape, dtype=x.dtype)
        for p in self.scene.primitives:
            rel = x - torch.as_tensor(p.center, dtype=x.dtype)
            if p.kind == "sphere":
                inside = (rel * rel).sum(-1) <= float(p.size[0]) ** 2
            else:
                inside = (rel.abs() <= torch.as_tensor(p.size, dtype=x.dtype)).all(-1)
            sigma = torch.where(inside, torch.full_like(sigma, p.density), sigma)
            rgb = torch.where(inside[..., None], torch.as_tensor(p.color, dtype=x.dtype).expand_as(rgb), rgb)
        return rgb, sigma


def cast_ray(camera: CameraModel, pixel, near: float = 2.2, far: float = 4.2) -> Ray:
    row, col = pixel
    if not (0 <= row < camera.height and 0 <= col < camera.width):
        raise InvalidArgumentError(f"pixel {pixel} outside {camera.height}x{camera.width} image")
    d_cam = np.array([(col - camera.cx) / camera.focal, -(row - camera.cy) / camera.focal, -1.0])
    d = camera.rotation @ d_cam
    return Ray(camera.translation.copy(), d / np.linalg.norm(d), near, far)


def camera_rays(camera: CameraModel, dtype=torch.float32):
    """Origins and unit directions for all pixels in row-major order, each (H*W, 3)."""
    dirs = torch.as_tensor(camera.pixel_directions().reshape(-1, 3), dtype=dtype)
    origins = torch.as_tensor(camera.translation, dtype=dtype).expand_as(dirs)
    return origins, dirs


def sample_depths(n_rays, cfg: RenderConfig, dtype=torch.float32, generator=None):
    """Stratified depths: one sample per equal-width bin, at the bin center unless jittered."""
    delta = (cfg.far - cfg.near) / cfg.samples
    base = torch.arange(cfg.samples, dtype=dtype).expand(n_rays, cfg.samples)
    if cfg.jitter:
        offset = torch.rand(n_rays, cfg.samples, dtype=dtype, generator=generator)
    else:
        offset = torch.full((n_rays, cfg.samples), 0.5, dtype=dtype)
    return cfg.near + (base + offset) * delta, delta


def composite(sigma, rgb, delta, background):
    """Alpha-composite samples front to back.

    Returns color, per-sample weights ``T_i * alpha_i`` and transmittance ``T_i``.
    """
    tau = sigma * delta
    # exclusive cumulative optical depth: T_i = exp(-sum_{j<i} sigma_j delta_j)
    acc = torch.cumsum(tau, dim=-1) - tau
    trans = torch.exp(-acc)
    alpha = -torch.expm1(-tau)
    w = trans * alpha
    bg = torch.as_tensor(background, dtype=rgb.dtype, device=rgb.device)
    color = (w[..., None] * rgb).sum(-2) + (1.0 - w.sum(-1, keepdim=True)) * bg
    return color, w, trans


def render_rays(field, origins, dirs, cfg: RenderConfig, generator=None):
    """Volume-render a batch of rays.

    ``field`` is any callable mapping points ``(..., 3)`` and directions
    ``(..., 3)`` to ``(rgb, sigma)``. Returns a dict with ``rgb`` (N, 3),
    ``weights`` (N, P), ``trans`` (N, P), ``t`` (N, P) and ``points`` (N, P, 3).
    """
    n = origins.shape[0]
    t, delta = sample_depths(n, cfg, origins.dtype, generator)
    pts = origins[:, None, :] + t[..., None] * dirs[:, None, :]
    rgb, sigma = field(pts, dirs[:, None, :].expand_as(pts))
    if not (torch.isfinite(rgb).all() and torch.isfinite(sigma).all()):
        bad = (~torch.isfinite(sigma)) | (~torch.isfinite(rgb).all(-1))
        idx = int(bad.nonzero()[0, 1])
        raise NumericError(f"non-finite field output at sample {idx}", index=idx)
    color, w, trans = composite(sigma, rgb, delta, cfg.background)
    return {"rgb": color, "weights": w, "trans": trans, "t": t, "points": pts}


def render_ray(field, ray: Ray, cfg: RenderConfig, generator=None):
    """Render one ray; returns (color, weights, sample_points) as numpy arrays."""
    cfg = RenderConfig(cfg.samples, ray.near, ray.far, cfg.background, cfg.jitter)
    o = torch.as_tensor(ray.origin[None], dtype=torch.float64)
    d = torch.as_tensor(ray.direction[None], dtype=torch.float64)
    with torch.no_grad():
        out = render_rays(field, o, d, cfg, generator)
    return out["rgb"][0].numpy(), out["weights"][0].numpy(), out["points"][0].numpy()


def photometric_loss(pred, true):
    """Mean squared color error over rays and channels."""
    if pred.shape != true.shape:
        raise InvalidArgumentError(f"shape mismatch {tuple(pred.shape)} vs {tuple(true.shape)}")
    return ((pred - true) ** 2).mean()


@dataclass
class FitLog:
    initial_loss: float = float("nan")
    final_loss: float = float("nan")
    epoch_loss: list = dc_field(default_factory=list)


def _dataset_rays(dataset: MultiViewDataset, indices):
    o, d, c = [], [], []
    for i in indices:
        oi, di = camera_rays(dataset.cameras[i])
        o.append(oi)
        d.append(di)
        c.append(torch.as_tensor(dataset.images[i].reshape(-1, 3), dtype=torch.float32))
    return torch.cat(o), torch.cat(d), torch.cat(c)


def _eval_loss(field, o, d, c, cfg):
    eval_cfg = RenderConfig(cfg.samples, cfg.near, cfg.far, cfg.background, jitter=False)
    with torch.no_grad():
        return float(photometric_loss(render_rays(field, o, d, eval_cfg)["rgb"], c))


def fit_radiance_field(
    dataset: MultiViewDataset,
    cfg: RenderConfig,
    epochs: int,
    lr: float = 5e-3,
    seed: int = 0,
    batch_rays: int = 1024,
    views=None,
    arch: dict | None = None,
    lr_final_ratio: float = 0.1,
) -> RadianceField:
    """Fit a field to the training views with Adam on random ray batches.

    One epoch is one pass over all training rays. ``views`` defaults to the
    dataset's non-held-out views. The returned module carries a ``fit_log``.
    """
    views = dataset.train_indices if views is None else list(views)
    if not views:
        raise InvalidArgumentError("dataset has no training views")
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        field = RadianceField(**(arch or {}))
    gen = torch.Generator().manual_seed(seed)
    o, d, c = _dataset_rays(dataset, views)
    n = o.shape[0]

    probe = torch.randperm(n, generator=torch.Generator().manual_seed(seed + 1))[: min(n, 4096)]
    log = FitLog(initial_loss=_eval_loss(field, o[probe], d[probe], c[probe], cfg))
    field.fit_log = log
    if epochs <= 0:
        log.final_loss = log.initial_loss
        return field

    steps_per_epoch = math.ceil(n / batch_rays)
    total = epochs * steps_per_epoch
    opt = torch.optim.Adam(field.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: lr_final_ratio ** (s / total))
    for epoch in range(epochs):
        perm = torch.randperm(n, generator=gen)
        running = 0.0
        for s in range(steps_per_epoch):
            idx = perm[s * batch_rays:(s + 1) * batch_rays]
            out = render_rays(field, o[idx], d[idx], cfg, generator=gen)
            loss = photometric_loss(out["rgb"], c[idx])
            if not torch.isfinite(loss):
                raise TrainingError("radiance field loss diverged", epoch=epoch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            running += loss.item()
        log.epoch_loss.append(running / steps_per_epoch)
        logger.debug("nerf epoch %d loss %.5f", epoch, log.epoch_loss[-1])
    log.final_loss = _eval_loss(field, o[probe], d[probe], c[probe], cfg)
    return field


def render_view(field, camera: CameraModel, cfg: RenderConfig, chunk: int = 8192) -> np.ndarray:
    o, d = camera_rays(camera)
    eval_cfg = RenderConfig(cfg.samples, cfg.near, cfg.far, cfg.background, jitter=False)
    out = []
    with torch.no_grad():
        for s in range(0, o.shape[0], chunk):
            out.append(render_rays(field, o[s:s + chunk], d[s:s + chunk], eval_cfg)["rgb"])
    img = torch.cat(out).reshape(camera.height, camera.width, 3).double().numpy()
    return np.clip(img, 0.0, 1.0)


def render_weights(field, camera: CameraModel, cfg: RenderConfig, chunk: int = 8192):
    """Frozen per-sample compositing weights and sample points for every pixel ray."""
    o, d = camera_rays(camera)
    eval_cfg = RenderConfig(cfg.samples, cfg.near, cfg.far, cfg.background, jitter=False)
    ws, ps = [], []
    with torch.no_grad():
        for s in range(0, o.shape[0], chunk):
            out = render_rays(field, o[s:s + chunk], d[s:s + chunk], eval_cfg)
            ws.append(out["weights"])
            ps.append(out["points"])
    return torch.cat(ws), torch.cat(ps)


def save_field(field: RadianceField, path) -> None:
    torch.save(
        {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "arch": field.arch,
         "state": field.state_dict()},
        path,
    )


def load_field(path, expect_arch: dict | None = None) -> RadianceField:
    path = Path(path)
    try:
        ckpt = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # torch raises assorted types on corrupt files
        raise FormatError(f"unreadable checkpoint ({exc})", path) from exc
    if not isinstance(ckpt, dict) or ckpt.get("format") != CHECKPOINT_FORMAT:
        raise FormatError("not a radiance field checkpoint", path)
    if ckpt.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {ckpt.get('version')}", path)
    if expect_arch is not None and ckpt["arch"] != expect_arch:
        raise FormatError(f"architecture {ckpt['arch']} does not match {expect_arch}", path)
    field = RadianceField(**ckpt["arch"])
    try:
        field.load_state_dict(ckpt["state"])
    except RuntimeError as exc:
        raise FormatError(f"parameter shapes disagree with header ({exc})", path) from exc
    return field

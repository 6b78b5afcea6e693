"""Self-distillation training of the semantic codec through a simulated fading link."""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..channel import torch_fading_link
from ..errors import FormatError, InvalidArgumentError, TrainingError
from ..scene_io import (CameraModel, build_synthetic_scene, analytic_render, first_hit_ids)
from .model import CodecConfig, SemanticCodec, skd_losses

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "semcom3d.codec"
CHECKPOINT_VERSION = 1


@dataclass
class LinkSpec:
    """Channel used while training: model plus a uniform SNR range in dB."""

    model: str = "awgn"
    snr_db: tuple = (0.0, 25.0)
    k_factor: float = 3.0

    def __post_init__(self):
        lo, hi = (self.snr_db, self.snr_db) if np.isscalar(self.snr_db) else self.snr_db
        if lo > hi:
            raise InvalidArgumentError(f"empty SNR range {self.snr_db}")
        self.snr_db = (float(lo), float(hi))

    def link(self, generator: torch.Generator):
        lo, hi = self.snr_db

        def run(x):
            snr = lo + (hi - lo) * torch.rand(x.shape[0], generator=generator)
            return torch_fading_link(x, snr, self.model, self.k_factor, generator)

        return run


@dataclass
class CodecTrainLog:
    initial_teacher_loss: float = float("nan")
    teacher_loss: list = field(default_factory=list)
    student_loss: list = field(default_factory=list)
    kd_loss: list = field(default_factory=list)


def toy_object_views(n: int, seed: int = 0, size: int = 64, samples_per_ray: int = 128) -> np.ndarray:
    """Masked single-object renders of random scenes from random rig-like poses.

    Each image shows one visible object of a fresh 1-3 object scene on a
    black background, the same kind of content the extractor produces.
    """
    rng = np.random.default_rng(seed)
    out = np.zeros((n, size, size, 3))
    focal = 0.5 * size / np.tan(np.deg2rad(34.0) / 2)
    for i in range(n):
        scene = build_synthetic_scene(int(rng.integers(2 ** 31)), int(rng.integers(1, 4)))
        for _ in range(20):
            a, e = np.deg2rad(rng.uniform(-20, 20)), np.deg2rad(rng.uniform(10, 34))
            eye = 3.2 * np.array([np.cos(e) * np.sin(a), np.sin(e), np.cos(e) * np.cos(a)])
            cam = CameraModel.look_at(eye, np.zeros(3), size, size, focal)
            ids = first_hit_ids(scene, cam)
            visible = [p.object_id for p in scene.primitives if (ids == p.object_id).sum() >= 20]
            if visible:
                break
        oid = visible[int(rng.integers(len(visible)))] if visible else scene.primitives[0].object_id
        img = analytic_render(scene, cam, samples_per_ray)
        out[i] = np.round(img * (ids == oid)[..., None] * 255) / 255
    return out


def params_checksum(model: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def train_codec(
    images,
    cfg: CodecConfig,
    epochs: int,
    link: LinkSpec | None = None,
    seed: int = 0,
    lr: float = 1e-3,
    batch_size: int = 16,
    student: bool = True,
    kd_weight: float = 0.003,
) -> SemanticCodec:
    """Alternate a teacher pass (mask bypassed, ``L_tech``) and a student pass
    (mask active, ``L_stu + L_KD``) on every batch, both through the link.

    The teacher latents used as the distillation target come from the same
    network under ``no_grad``. ``student=False`` trains the teacher path only;
    ``kd_weight`` scales the distillation term in the student objective.
    The returned codec carries ``train_log``.
    """
    if epochs < 1:
        raise InvalidArgumentError(f"need at least one epoch, got {epochs}")
    link = link or LinkSpec()
    data = torch.as_tensor(np.asarray(images), dtype=torch.float32)
    if data.ndim != 4 or data.shape[0] == 0:
        raise InvalidArgumentError(f"images must be a nonempty (N, H, W, 3) stack, got {tuple(data.shape)}")
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = SemanticCodec(cfg)
    gen = torch.Generator().manual_seed(seed)
    channel = link.link(gen)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    n = data.shape[0]
    total = epochs * math.ceil(n / batch_size)
    warm = max(1, total // 20)

    def lr_factor(step):
        # linear warmup, then cosine decay to 5% of the base rate
        if step < warm:
            return (step + 1) / warm
        return 0.05 + 0.95 * 0.5 * (1 + math.cos(math.pi * (step - warm) / max(1, total - warm)))

    sched = torch.optim.lr_scheduler.LambdaLR(opt, lr_factor)
    log = CodecTrainLog()
    with torch.no_grad():
        probe = data[: min(len(data), 64)]
        log.initial_teacher_loss = float(((model(probe, "teacher", channel)["image"] - probe) ** 2).mean())
    model.train_log = log
    for epoch in range(epochs):
        perm = torch.randperm(n, generator=gen)
        sums = np.zeros(3)
        steps = 0
        for s in range(0, n, batch_size):
            x = data[perm[s:s + batch_size]]
            t_out = model(x, "teacher", channel)
            l_tech = ((t_out["image"] - x) ** 2).mean()
            if not torch.isfinite(l_tech):
                raise TrainingError("teacher loss diverged", epoch=epoch)
            opt.zero_grad()
            l_tech.backward()
            opt.step()
            sums[0] += l_tech.item()

            if student:
                with torch.no_grad():
                    t_ref = model(x, "teacher", channel)
                s_out = model(x, "student", channel, mask_mode="train")
                _, l_stu, l_kd = skd_losses(x, t_ref["image"], s_out["image"], t_ref["received"],
                                            s_out["received"], detach_denominator=True)
                loss = l_stu + kd_weight * l_kd
                if not torch.isfinite(loss):
                    raise TrainingError("student loss diverged", epoch=epoch)
                opt.zero_grad()
                loss.backward()
                opt.step()
                sums[1] += l_stu.item()
                sums[2] += l_kd.item()
            steps += 1
            sched.step()
        log.teacher_loss.append(sums[0] / steps)
        if student:
            log.student_loss.append(sums[1] / steps)
            log.kd_loss.append(sums[2] / steps)
        logger.debug("codec epoch %d teacher %.5f student %.5f", epoch, sums[0] / steps, sums[1] / steps)
    model.eval()
    return model


def run_codec(model: SemanticCodec, images, mode: str = "teacher", link=None) -> np.ndarray:
    """Inference helper: numpy images in, reconstructed numpy images out."""
    x = torch.as_tensor(np.asarray(images), dtype=torch.float32)
    with torch.no_grad():
        return model(x, mode, link)["image"].double().numpy()


def save_codec(model: SemanticCodec, path) -> None:
    torch.save({"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
                "config": model.cfg.to_dict(), "state": model.state_dict()}, path)


def load_codec(path) -> SemanticCodec:
    path = Path(path)
    try:
        ckpt = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # torch raises assorted types on corrupt files
        raise FormatError(f"unreadable checkpoint ({exc})", path) from exc
    if not isinstance(ckpt, dict) or ckpt.get("format") != CHECKPOINT_FORMAT:
        raise FormatError("not a codec checkpoint", path)
    if ckpt.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {ckpt.get('version')}", path)
    model = SemanticCodec(CodecConfig(**ckpt["config"]))
    try:
        model.load_state_dict(ckpt["state"])
    except RuntimeError as exc:
        raise FormatError(f"parameter shapes disagree with header ({exc})", path) from exc
    model.eval()
    return model

"""End-to-end link: extract object views, estimate CSI, send every view through the codec and
the fading channel, refit a radiance field at the receiver and score held-out renders."""

from __future__ import annotations

import contextlib
import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from ..channel import draw_channel, equalize, transmit
from ..codec import (CodecConfig, LinkSpec, SemanticCodec, SemanticPayload, binarize_mask, compress,
                     load_codec, pack_payload, toy_object_views, train_codec, unpack_payload)
from ..csi import (ClassicalPrior, GdceConfig, GdceModel, load_gdce, make_csi_dataset, make_pilots,
                   observe_pilots, run_estimator, train_gdce)
from ..errors import InvalidArgumentError, StageError
from ..metrics import CSV_COLUMNS, bleu, caption_stub, cosine_sim, embed_stub, format_value, nmse_db, psnr, ssim
from ..object_lifter import (MaskGrid, Prompt, RegionGrowSegmenter, extract_object_views, lift_mask_to_3d,
                             load_grid, load_prompt_table, mask_iou, segment_with_prompt, text_to_point)
from ..radiance_field import RenderConfig, fit_radiance_field, load_field, render_view
from ..scene_io import (MultiViewDataset, SceneSpec, build_synthetic_scene, load_dataset, load_scene,
                        render_dataset)
from .config import RunConfig

logger = logging.getLogger(__name__)

# SNR grid the generative estimator is trained on when no checkpoint is given
GDCE_TRAIN_SNRS = (0.0, 5.0, 10.0, 15.0, 20.0, 25.0)


@contextlib.contextmanager
def stage(name: str, config_hash: str):
    """Re-raise any failure inside a stage as StageError naming the stage and config."""
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, config_hash, exc) from exc


def _seed(*parts) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


@dataclass
class Transmitter:
    """Everything a run needs that does not depend on SNR or seed."""

    dataset: MultiViewDataset
    scene: SceneSpec | None
    field: torch.nn.Module
    grid: MaskGrid
    object_id: int | None
    views: np.ndarray  # extracted object views (N, H, W, 3)
    masks: np.ndarray  # (N, H, W) bool
    codec: SemanticCodec
    pilots: object
    prior: ClassicalPrior | None = None
    gdce: GdceModel | None = None
    mask_iou: list = field(default_factory=list)  # per view, when oracle masks exist


def load_or_build_scene(cfg: RunConfig):
    if cfg.dataset:
        ds = load_dataset(cfg.dataset)
        scene_file = Path(cfg.dataset) / "scene.json"
        return ds, (load_scene(scene_file) if scene_file.exists() else None)
    scene = build_synthetic_scene(cfg.scene_seed, cfg.n_objects)
    return render_dataset(scene), scene


def fit_transmitter_field(cfg: RunConfig, ds: MultiViewDataset):
    if cfg.nerf_checkpoint:
        return load_field(cfg.nerf_checkpoint)
    rc = RenderConfig.for_dataset(ds, samples=cfg.nerf_samples, jitter=True)
    return fit_radiance_field(ds, rc, cfg.nerf_epochs, seed=cfg.scene_seed)


def resolve_prompt(cfg: RunConfig, ds: MultiViewDataset):
    """``(Prompt, object_id or None)``. Without an explicit prompt, the object covering the
    most pixels of the prompt view is chosen and its most central mask pixel is clicked."""
    if cfg.prompt_point:
        return Prompt([tuple(cfg.prompt_point)]), None
    if cfg.prompt_text:
        pt = text_to_point(cfg.prompt_text, load_prompt_table(cfg.prompt_table))
        return Prompt([pt], text=cfg.prompt_text, label=cfg.prompt_text), None
    if not ds.masks:
        raise InvalidArgumentError("no prompt given and the dataset has no object masks to pick from")
    v = cfg.prompt_view
    oid = max(ds.masks, key=lambda k: (ds.masks[k][v].sum(), -k))
    m = ds.masks[oid][v]
    if not m.any():
        raise InvalidArgumentError(f"no object is visible in prompt view {v}")
    rows, cols = np.nonzero(m)
    dist = ndimage.distance_transform_edt(m)
    k = int(np.argmax(dist[rows, cols]))
    return Prompt([(int(rows[k]), int(cols[k]))]), oid


def lift_object(cfg: RunConfig, ds: MultiViewDataset, nerf):
    """Segment the prompt view and lift the mask; returns (grid, object_id)."""
    if not 0 <= cfg.prompt_view < len(ds):
        raise InvalidArgumentError(f"prompt_view {cfg.prompt_view} outside the {len(ds)} views")
    prompt, oid = resolve_prompt(cfg, ds)
    view = ds.view(cfg.prompt_view)
    if oid is None and ds.masks:
        r, c = prompt.points[0]
        oid = next((k for k, m in ds.masks.items() if m[cfg.prompt_view][r, c]), None)
    gt = ds.masks[oid][cfg.prompt_view] if oid is not None else None
    seg = segment_with_prompt(view.image, prompt, RegionGrowSegmenter(), ground_truth=gt)
    logger.info("prompt segmentation IoU %.3f", seg.iou_score)
    if cfg.mask_grid:
        return load_grid(cfg.mask_grid), oid
    rc = RenderConfig.for_dataset(ds, samples=cfg.nerf_samples)
    grid = lift_mask_to_3d(nerf, view, seg, cfg.lift_iters, cfg.lift_lambda, seed=cfg.scene_seed, cfg=rc)
    return grid, oid


def build_codec(cfg: RunConfig, image_size) -> SemanticCodec:
    if cfg.codec_checkpoint:
        codec = load_codec(cfg.codec_checkpoint)
    else:
        ccfg = CodecConfig(image_size=image_size, keep_rate=cfg.keep_rate, quant_bits=cfg.quant_bits)
        images = toy_object_views(cfg.codec_images, seed=cfg.scene_seed + 1, size=image_size[0])
        codec = train_codec(images, ccfg, cfg.codec_epochs, LinkSpec(), seed=cfg.scene_seed)
    # the keep rate and quantizer of the run override the checkpoint's nominal values
    codec.cfg.keep_rate = cfg.keep_rate
    codec.cfg.quant_bits = cfg.quant_bits
    return codec


def build_estimator(cfg: RunConfig, pilots):
    """``(prior, gdce)`` needed by the configured estimator (either may be None)."""
    prior = gdce = None
    if cfg.estimator == "mmse":
        prior = ClassicalPrior.fit(tuple(cfg.channel_grid), model=cfg.channel_model, k_factor=cfg.k_factor)
    if cfg.estimator in ("cgan", "gdce"):
        if cfg.gdce_checkpoint:
            gdce = load_gdce(cfg.gdce_checkpoint)
            if gdce.pilots.shape != pilots.shape:
                raise InvalidArgumentError("GDCE checkpoint was trained on a different pilot grid")
            pilots = gdce.pilots
        else:
            data = make_csi_dataset(cfg.gdce_train_samples, pilots, GDCE_TRAIN_SNRS, seed=cfg.scene_seed + 1,
                                    model=cfg.channel_model, k_factor=cfg.k_factor)
            gdce = train_gdce(data, pilots, GdceConfig(), seed=cfg.scene_seed)
    return prior, gdce, pilots


def prepare(cfg: RunConfig) -> Transmitter:
    """Run the SNR-independent stages: scene, transmitter field, lifting, extraction, codec, CSI models."""
    h = cfg.config_hash()
    with stage("scene", h):
        ds, scene = load_or_build_scene(cfg)
    with stage("fit-nerf", h):
        nerf = fit_transmitter_field(cfg, ds)
    with stage("lift-mask", h):
        grid, oid = lift_object(cfg, ds, nerf)
        rc = RenderConfig.for_dataset(ds, samples=cfg.nerf_samples)
        views, masks = extract_object_views(ds, nerf, grid, cfg.mask_threshold, rc)
        ious = [mask_iou(masks[i], ds.masks[oid][i]) for i in range(len(ds))] if oid in ds.masks else []
        if ious:
            logger.info("lifted mask IoU min %.3f mean %.3f", min(ious), float(np.mean(ious)))
    with stage("train-codec", h):
        codec = build_codec(cfg, (ds.height, ds.width))
    with stage("train-gdce", h):
        pilots = make_pilots(tuple(cfg.channel_grid), cfg.pilot_spacing, seed=0)
        prior, gdce, pilots = build_estimator(cfg, pilots)
    return Transmitter(ds, scene, nerf, grid, oid, views, masks, codec, pilots, prior, gdce, ious)


def send_view(codec: SemanticCodec, image, mode: str, chan, h_est, snr_db: float, noise_seed: int,
              equalizer: str = "elementwise"):
    """One view through encode, pack/unpack, channel encode, the channel, equalization and decode.

    Returns ``(received image, kept payload bits)``. The keep mask travels as
    error-free side information next to the payload.
    """
    ccfg = codec.cfg
    with torch.no_grad():
        x = torch.as_tensor(np.asarray(image)[None], dtype=torch.float32)
        e, logits = codec.encode(x)
        m = torch.ones_like(logits) if mode == "teacher" else binarize_mask(logits, ccfg.keep_rate, "infer")
        wire = pack_payload(e[0].double().numpy(), m[0].numpy(), ccfg.keep_rate, ccfg.quant_bits, ccfg.clip)
        payload = SemanticPayload.from_bytes(wire.to_bytes())
        e_q, keep = unpack_payload(payload)
        mk = torch.as_tensor(keep[None], dtype=torch.float32)
        sym = codec.channel_encode(torch.as_tensor(e_q[None], dtype=torch.float32), mk)[0].double().numpy()
        frame = transmit(sym[keep].ravel(), chan, snr_db, seed=noise_seed)
        rx = np.zeros_like(sym)
        rx[keep] = equalize(frame, h_est, equalizer).reshape(-1, ccfg.latent_dim)
        e_hat = compress(codec.channel_decode(torch.as_tensor(rx[None], dtype=torch.float32)), mk)
        img = codec.decode(e_hat)[0].double().numpy()
    return img, payload.kept_bits


def estimate_channel(tx: Transmitter, cfg: RunConfig, snr_db: float, chan_seed: int, pilot_seed: int):
    """Draw the block channel, observe pilots and run the configured estimator."""
    chan = draw_channel(cfg.channel_model, tuple(cfg.channel_grid), chan_seed, cfg.k_factor)
    if cfg.estimator == "true":
        return chan, chan.gains
    y = observe_pilots(chan.gains, tx.pilots, snr_db, pilot_seed)
    h_est = run_estimator(cfg.estimator, y, tx.pilots, snr_db, chan.gains, tx.prior, tx.gdce, pilot_seed)
    return chan, h_est


def run_cell(tx: Transmitter, cfg: RunConfig, snr_db: float, seed: int) -> dict:
    """One (SNR, seed) cell. Returns the CSV row plus per-view detail under ``views``."""
    t0 = time.perf_counter()
    ds = tx.dataset
    h = cfg.config_hash()
    with stage("estimate-csi", h):
        per_view_csi = cfg.csi_refresh == "view"
        chan, h_est = estimate_channel(tx, cfg, snr_db, _seed(seed, 0), _seed(seed, 1))
    received = np.zeros_like(tx.views)
    codec_psnr, codec_ssim, nmse_lin, bits = [], [], [], 0
    estimated = cfg.estimator != "true"
    if estimated and not per_view_csi:
        nmse_lin.append(10 ** (nmse_db(chan.gains, h_est) / 10))
    with stage("transmit", h):
        for i in ds.train_indices:
            if per_view_csi:
                chan, h_est = estimate_channel(tx, cfg, snr_db, _seed(seed, 0, i), _seed(seed, 1, i))
                if estimated:
                    nmse_lin.append(10 ** (nmse_db(chan.gains, h_est) / 10))
            received[i], bits = send_view(tx.codec, tx.views[i], cfg.codec_mode, chan, h_est, snr_db,
                                          _seed(seed, 2, i), cfg.equalizer)
            codec_psnr.append(psnr(tx.views[i], received[i]))
            codec_ssim.append(ssim(tx.views[i], received[i]))
    with stage("receiver-nerf", h):
        rx_ds = MultiViewDataset(received, ds.cameras, ds.near, ds.far, ds.holdout)
        rc = RenderConfig.for_dataset(rx_ds, samples=cfg.nerf_samples, jitter=True)
        rx_field = fit_radiance_field(rx_ds, rc, cfg.receiver_epochs, seed=seed)
    with stage("metrics", h):
        ev = RenderConfig.for_dataset(rx_ds, samples=cfg.nerf_samples)
        views = []
        for i in ds.holdout:
            render = render_view(rx_field, ds.cameras[i], ev)
            ref = tx.views[i]
            cap_ref, cap_out = caption_stub(ref, tx.scene), caption_stub(render, tx.scene)
            views.append({
                "view": i, "psnr_db": psnr(ref, render), "ssim": ssim(ref, render),
                "bleu": bleu(cap_ref, cap_out), "cosine": cosine_sim(embed_stub(cap_ref), embed_stub(cap_out)),
            })
    wall = time.perf_counter() - t0
    mean = {k: float(np.mean([v[k] for v in views])) for k in ("psnr_db", "ssim", "bleu", "cosine")}
    return {
        "config_hash": h, "seed": seed, "snr_db": snr_db, "estimator": cfg.estimator,
        "keep_rate": cfg.keep_rate if cfg.codec_mode == "student" else 1.0, "payload_bits": bits,
        **mean,
        "nmse_db": 10 * math.log10(np.mean(nmse_lin)) if nmse_lin else None,
        "wall_s": wall if cfg.record_wall_time else None,
        "views": views, "codec_psnr_db": float(np.mean(codec_psnr)), "codec_ssim": float(np.mean(codec_ssim)),
    }


@dataclass
class RunReport:
    rows: list
    config_hash: str
    payload_bits: int
    wall_s: float

    def write_csv(self, path) -> None:
        write_rows(self.rows, path)


def write_rows(rows, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in rows:
            w.writerow([format_value(r.get(c)) for c in CSV_COLUMNS])


def run_link(cfg: RunConfig, tx: Transmitter | None = None) -> RunReport:
    """All (SNR, seed) cells of one configuration; rows are ordered seed-major."""
    cfg.validate()
    t0 = time.perf_counter()
    tx = tx or prepare(cfg)
    rows = []
    for seed in cfg.seeds:
        for snr in cfg.snr_db:
            rows.append(run_cell(tx, cfg, snr, seed))
            logger.info("seed %d snr %s: psnr %.2f ssim %.3f", seed, snr, rows[-1]["psnr_db"], rows[-1]["ssim"])
    bits = rows[0]["payload_bits"] if rows else 0
    return RunReport(rows, cfg.config_hash(), bits, time.perf_counter() - t0)

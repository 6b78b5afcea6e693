"""Two-stage generative estimator (CGAN then diffusion refinement), datasets and benchmarks."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..channel import draw_channel, noise_power_for_snr
from ..errors import FormatError, InvalidArgumentError
from ..metrics import nmse_db
from .classical import (CsiImage, PilotBlock, amp_estimate, channel_statistics, ls_estimate, make_pilots,
                        mmse_estimate, observe_pilots, omp_estimate)
from .diffusion import Denoiser, NoiseSchedule, make_schedule, refine_csi, train_denoiser
from .gan import Critic, GanConfig, GanPair, Generator, train_cgan

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "semcom3d.gdce"
CHECKPOINT_VERSION = 1
ESTIMATORS = ("true", "ls", "mmse", "omp", "amp", "cgan", "gdce")
BENCH_COLUMNS = ("method", "snr_db", "nmse_db", "trials", "seed")


@dataclass
class CsiDataset:
    y: np.ndarray  # complex (N, K, L) received pilot grids
    h: np.ndarray  # complex (N, K, L) true channels
    snr_db: np.ndarray  # (N,)


def make_csi_dataset(n: int, pilots: PilotBlock, snr_db, seed: int = 0, model: str = "rician",
                     k_factor: float = 3.0) -> CsiDataset:
    """``n`` independent channel draws with pilot observations.

    ``snr_db`` is one value or a list that is cycled through. Channel and noise
    seeds derive from ``seed`` so disjoint seeds give disjoint sets.
    """
    snrs = np.resize(np.atleast_1d(np.asarray(snr_db, dtype=float)), n)
    ss = np.random.SeedSequence(seed).generate_state(2 * n)
    hs = np.stack([draw_channel(model, pilots.shape, int(ss[2 * i]), k_factor).gains for i in range(n)])
    ys = np.stack([observe_pilots(hs[i], pilots, snrs[i], int(ss[2 * i + 1])) for i in range(n)])
    return CsiDataset(ys, hs, snrs)


def stacked_nmse_db(h_true, h_est) -> float:
    """NMSE over a whole validation stack: total error power over total channel variance."""
    h_true = np.asarray(h_true)
    h_est = np.asarray(h_est)
    return nmse_db(h_true.ravel(), h_est.ravel()) if h_true.ndim > 1 else nmse_db(h_true, h_est)


@dataclass
class GdceConfig:
    gan: GanConfig = field(default_factory=GanConfig)
    gan_epochs: int = 60
    denoiser_epochs: int = 60
    T: int = 10
    beta_1: float = 1e-5
    beta_T: float = 1e-3
    denoiser_width: int = 32
    literal: bool = False
    renoise: bool = False


@dataclass
class GdceModel:
    pilots: PilotBlock
    gan: GanPair
    denoiser: Denoiser
    schedule: NoiseSchedule
    config: GdceConfig = field(default_factory=GdceConfig)

    def estimate(self, y, seed: int = 0):
        """``(H_gan, H_ref)`` as CsiImages for one received grid."""
        return estimate_csi(y, self.pilots, self.gan, self.denoiser, self.schedule, seed, self.config.literal,
                            self.config.renoise)


def estimate_csi(y, pilots: PilotBlock, gan: GanPair, denoiser, schedule: NoiseSchedule, seed: int = 0,
                 literal: bool = False, renoise: bool = False):
    """Generator estimate followed by diffusion refinement; returns both as CsiImages."""
    h_g = gan.estimate(y, pilots)
    h_ref = refine_csi(h_g.planes, schedule, denoiser, seed, literal, renoise)
    return h_g, CsiImage(h_ref)


def train_gdce(train: CsiDataset, pilots: PilotBlock, config: GdceConfig | None = None, seed: int = 0) -> GdceModel:
    """Train the CGAN, then the denoiser on its outputs (targets = true channels)."""
    config = config or GdceConfig()
    gan = train_cgan((train.y, train.h), pilots, config.gan, config.gan_epochs, seed)
    starts = gan.estimate(train.y, pilots)
    targets = np.stack([train.h.real, train.h.imag], 1)
    schedule = make_schedule(config.T, config.beta_1, config.beta_T)
    den = train_denoiser(starts, targets, schedule, config.denoiser_epochs, seed + 1, width=config.denoiser_width)
    return GdceModel(pilots, gan, den, schedule, config)


@dataclass
class ClassicalPrior:
    """Channel statistics for LMMSE, from draws of the same channel model."""

    mean: np.ndarray
    cov: np.ndarray

    @classmethod
    def fit(cls, shape, n: int = 2000, seed: int = 10_000, model: str = "rician", k_factor: float = 3.0):
        ss = np.random.SeedSequence(seed).generate_state(n)
        draws = [draw_channel(model, shape, int(s), k_factor).gains for s in ss]
        mu, cov = channel_statistics(draws)
        return cls(mu, cov)


def run_estimator(method: str, y, pilots: PilotBlock, snr_db: float, h_true=None, prior: ClassicalPrior | None = None,
                  gdce: GdceModel | None = None, seed: int = 0, omp_k: int = 8, amp_iters: int = 30) -> np.ndarray:
    """Complex channel estimate for one received grid by the named method."""
    if method == "true":
        if h_true is None:
            raise InvalidArgumentError("the 'true' estimator needs the true channel")
        return np.asarray(h_true)
    if method == "ls":
        return ls_estimate(y, pilots).to_complex()
    if method == "mmse":
        if prior is None:
            raise InvalidArgumentError("MMSE needs channel statistics")
        return mmse_estimate(y, pilots, prior.cov, noise_power_for_snr(1.0, snr_db), prior.mean).to_complex()
    if method == "omp":
        return omp_estimate(y, pilots, omp_k).to_complex()
    if method == "amp":
        return amp_estimate(y, pilots, amp_iters).to_complex()
    if method in ("cgan", "gdce"):
        if gdce is None:
            raise InvalidArgumentError(f"{method} needs a trained model")
        h_g, h_ref = gdce.estimate(y, seed)
        return (h_g if method == "cgan" else h_ref).to_complex()
    raise InvalidArgumentError(f"unknown estimator {method!r}; expected one of {ESTIMATORS}")


def benchmark(methods, snrs, pilots: PilotBlock, trials: int = 200, seed: int = 0, prior=None, gdce=None,
              model: str = "rician", k_factor: float = 3.0) -> list[dict]:
    """Stacked NMSE per (method, SNR) over ``trials`` fresh channel draws."""
    rows = []
    for snr in snrs:
        data = make_csi_dataset(trials, pilots, snr, seed, model, k_factor)
        for m in methods:
            est = np.stack([run_estimator(m, data.y[i], pilots, snr, data.h[i], prior, gdce, seed + i)
                            for i in range(trials)])
            rows.append({"method": m, "snr_db": snr, "nmse_db": stacked_nmse_db(data.h, est),
                         "trials": trials, "seed": seed})
    return rows


def write_benchmark_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=BENCH_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({**r, "nmse_db": f"{r['nmse_db']:.6f}"})


def save_gdce(model: GdceModel, path) -> None:
    cfg = asdict(model.config)
    torch.save({
        "format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "config": cfg,
        "schedule": model.schedule.to_dict(),
        "pilots": {"theta_re": model.pilots.theta.real.tolist(), "theta_im": model.pilots.theta.imag.tolist(),
                   "positions": model.pilots.positions.tolist()},
        "generator": model.gan.generator.state_dict(), "critic": model.gan.critic.state_dict(),
        "denoiser": model.denoiser.state_dict(),
    }, path)


def load_gdce(path) -> GdceModel:
    path = Path(path)
    try:
        ck = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # torch raises assorted types on corrupt files
        raise FormatError(f"unreadable checkpoint ({exc})", path) from exc
    if not isinstance(ck, dict) or ck.get("format") != CHECKPOINT_FORMAT:
        raise FormatError("not a GDCE checkpoint", path)
    if ck.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {ck.get('version')}", path)
    c = dict(ck["config"])
    config = GdceConfig(gan=GanConfig(**c.pop("gan")), **c)
    schedule = NoiseSchedule(ck["schedule"]["betas"])
    p = ck["pilots"]
    pilots = PilotBlock(np.array(p["theta_re"]) + 1j * np.array(p["theta_im"]), np.array(p["positions"]))
    gen, crit = Generator(config.gan.width), Critic(config.gan.width)
    den = Denoiser(schedule, config.denoiser_width)
    try:
        gen.load_state_dict(ck["generator"])
        crit.load_state_dict(ck["critic"])
        den.load_state_dict(ck["denoiser"])
    except RuntimeError as exc:
        raise FormatError(f"parameter shapes disagree with header ({exc})", path) from exc
    for m in (gen, crit, den):
        m.eval()
    return GdceModel(pilots, GanPair(gen, crit, config.gan), den, schedule, config)


def default_pilots(grid=(16, 16), spacing: int = 4, seed: int = 0) -> PilotBlock:
    return make_pilots(grid, spacing, seed)

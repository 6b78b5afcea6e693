"""Diffusion refinement of CSI estimates: noise schedule, forward process, denoiser, reverse loop.

Arrays are real CSI planes ``(..., 2, K, L)``. The forward step is
``x_t = sqrt(alpha_t) x_{t-1} + sqrt(beta_t) z`` with ``z ~ N(0, I)`` per
real entry, whose t-fold composition is
``x_t = sqrt(abar_t) x_0 + sqrt(1 - abar_t) z``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from ..errors import InvalidArgumentError, TrainingError

logger = logging.getLogger(__name__)


@dataclass
class NoiseSchedule:
    betas: np.ndarray  # beta_1 .. beta_T

    def __post_init__(self):
        self.betas = np.asarray(self.betas, dtype=np.float64).ravel()
        if self.betas.size < 1:
            raise InvalidArgumentError("schedule needs at least one step")
        if np.any(self.betas <= 0) or np.any(self.betas >= 1):
            raise InvalidArgumentError("every beta must lie in (0, 1)")
        if self.betas.size > 1 and np.any(np.diff(self.betas) <= 0):
            raise InvalidArgumentError("betas must be strictly increasing")

    @property
    def T(self) -> int:
        return self.betas.size

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(self.alphas)

    def abar(self, t: int) -> float:
        """``abar_t`` with ``abar_0 = 1``."""
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])

    def one_minus_abar(self, t: int) -> float:
        """``1 - abar_t`` without cancellation for tiny betas."""
        return float(-np.expm1(np.sum(np.log1p(-self.betas[:t]))))

    def posterior_coefs(self, t: int):
        """Coefficients ``(c0, ct)`` of the posterior mean ``c0 x_0 + ct x_t`` of q(x_{t-1} | x_t, x_0)."""
        b = self.betas[t - 1]
        ab_prev = self.abar(t - 1)
        den = self.one_minus_abar(t)
        c0 = math.sqrt(ab_prev) * b / den
        ct = math.sqrt(1.0 - b) * self.one_minus_abar(t - 1) / den
        return c0, ct

    def to_dict(self):
        return {"betas": self.betas.tolist()}


def make_schedule(T: int = 50, beta_1: float = 1e-4, beta_T: float = 0.02, law: str = "linear") -> NoiseSchedule:
    if law != "linear":
        raise InvalidArgumentError(f"unsupported schedule law {law!r}")
    if T < 1:
        raise InvalidArgumentError(f"T must be >= 1, got {T}")
    if beta_T >= 1 or beta_1 <= 0:
        raise InvalidArgumentError("betas must lie in (0, 1)")
    if T > 1 and beta_1 >= beta_T:
        raise InvalidArgumentError(f"need beta_1 < beta_T, got {beta_1} >= {beta_T}")
    return NoiseSchedule(np.linspace(beta_1, beta_T, T) if T > 1 else np.array([beta_1]))


def forward_diffuse(h0, t: int, schedule: NoiseSchedule, seed: int = 0, mode: str = "marginal") -> np.ndarray:
    """Noise ``h0`` to step ``t`` by chaining single steps or sampling the closed-form marginal."""
    if not 1 <= t <= schedule.T:
        raise InvalidArgumentError(f"t must be in [1, {schedule.T}], got {t}")
    x = np.asarray(h0, dtype=np.float64)
    rng = np.random.default_rng(seed)
    if mode == "marginal":
        ab = schedule.abar(t)
        return math.sqrt(ab) * x + math.sqrt(1.0 - ab) * rng.standard_normal(x.shape)
    if mode == "chain":
        for s in range(t):
            b = schedule.betas[s]
            x = math.sqrt(1.0 - b) * x + math.sqrt(b) * rng.standard_normal(x.shape)
        return x
    raise InvalidArgumentError(f"unknown diffusion mode {mode!r}")


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(1000.0) * torch.arange(half, dtype=torch.float32) / half)
    ang = t.float()[:, None] * freqs[None]
    return torch.cat([torch.sin(ang), torch.cos(ang)], -1)


class Denoiser(nn.Module):
    """Mean predictor ``mu(x_t, t)`` built from a clean-signal prediction ``f``.

    ``f(x_t, t) = x_t / sqrt(abar_t) + r(x_t, t)`` with a conv residual ``r``
    whose last layer starts at zero, and ``mu = c0 f + ct x_t``. At
    initialization this is exactly ``mu = x_t / sqrt(alpha_t)``.
    """

    def __init__(self, schedule: NoiseSchedule, width: int = 32, temb: int = 32):
        super().__init__()
        self.schedule = schedule
        self.width = width
        self.temb_dim = temb
        self.temb = nn.Sequential(nn.Linear(temb, width), nn.SiLU(), nn.Linear(width, width))
        self.inp = nn.Conv2d(2, width, 3, padding=1)
        self.body = nn.ModuleList([nn.Conv2d(width, width, 3, padding=d, dilation=d) for d in (1, 2, 4, 1)])
        self.out = nn.Conv2d(width, 2, 3, padding=1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)
        ab = np.concatenate([[1.0], schedule.alpha_bars])
        c = np.array([schedule.posterior_coefs(t) for t in range(1, schedule.T + 1)])
        self.register_buffer("sqrt_abar", torch.as_tensor(np.sqrt(ab), dtype=torch.float32))
        self.register_buffer("c0", torch.as_tensor(c[:, 0], dtype=torch.float32))
        self.register_buffer("ct", torch.as_tensor(c[:, 1], dtype=torch.float32))

    def predict_x0(self, x, t):
        e = self.temb(timestep_embedding(t, self.temb_dim))[:, :, None, None]
        h = torch.nn.functional.silu(self.inp(x) + e)
        for conv in self.body:
            h = h + torch.nn.functional.silu(conv(h))
        return x / self.sqrt_abar[t][:, None, None, None] + self.out(h)

    def forward(self, x, t):
        """``mu_theta(x_t, t)`` for integer steps ``t`` in [1, T] (a (B,) tensor)."""
        f = self.predict_x0(x, t)
        return self.c0[t - 1][:, None, None, None] * f + self.ct[t - 1][:, None, None, None] * x


@dataclass
class DenoiserLog:
    initial_loss: float = float("nan")
    epoch_loss: list = field(default_factory=list)


def _posterior_target(schedule_c0, schedule_ct, x0, xt, t):
    return schedule_c0[t - 1][:, None, None, None] * x0 + schedule_ct[t - 1][:, None, None, None] * xt


def train_denoiser(starts, targets, schedule: NoiseSchedule, epochs: int = 100, seed: int = 0,
                   lr: float = 1e-3, batch_size: int = 32, width: int = 32) -> Denoiser:
    """Fit ``mu_theta`` by regression on the closed-form posterior mean.

    Each step samples ``t``, diffuses the start estimate ``starts`` (generator
    outputs, planes (N, 2, K, L)) to ``x_t`` and regresses ``mu_theta(x_t, t)``
    onto ``c0 H + ct x_t`` where ``H = targets`` is the true channel.
    """
    x_start = torch.as_tensor(np.asarray(starts), dtype=torch.float32)
    x_true = torch.as_tensor(np.asarray(targets), dtype=torch.float32)
    if x_start.shape != x_true.shape or x_start.ndim != 4 or x_start.shape[1] != 2:
        raise InvalidArgumentError("starts and targets must both be (N, 2, K, L)")
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = Denoiser(schedule, width)
    log = DenoiserLog()
    model.train_log = log
    g = torch.Generator().manual_seed(seed)
    n = len(x_start)

    def batch_loss(idx):
        t = torch.randint(1, schedule.T + 1, (len(idx),), generator=g)
        ab = model.sqrt_abar[t][:, None, None, None] ** 2
        xt = ab.sqrt() * x_start[idx] + (1 - ab).sqrt() * torch.randn(x_start[idx].shape, generator=g)
        target = _posterior_target(model.c0, model.ct, x_true[idx], xt, t)
        return ((model(xt, t) - target) ** 2).mean()

    with torch.no_grad():
        log.initial_loss = float(batch_loss(torch.arange(min(n, 256))))
    if epochs <= 0:
        return model
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    steps = epochs * -(-n // batch_size)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: 0.1 ** (s / steps))
    for epoch in range(epochs):
        perm = torch.randperm(n, generator=g)
        total = 0.0
        nb = 0
        for s in range(0, n, batch_size):
            loss = batch_loss(perm[s:s + batch_size])
            if not torch.isfinite(loss):
                raise TrainingError("denoiser loss diverged", epoch=epoch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            total += loss.item()
            nb += 1
        log.epoch_loss.append(total / nb)
    model.eval()
    return model


def refine_csi(h, schedule: NoiseSchedule, denoiser, seed: int = 0, literal: bool = False,
               renoise: bool = False) -> np.ndarray:
    """Reverse loop from ``x_T`` down to ``x_0``.

    ``x_T = h`` by default; ``renoise`` instead draws ``x_T`` from the forward
    marginal around ``h``. Each step is ``x_{t-1} = mu(x_t, t) + sqrt(beta_t) z``.
    The standard variant adds no noise at t = 1 and returns ``x_0``. With
    ``literal`` the t = 1 step is noisy too and the loop output is divided by
    ``sqrt(alpha_1)``. ``denoiser`` may be any callable ``(x, t) -> mu``.
    """
    x = torch.as_tensor(np.asarray(h), dtype=torch.float32)
    single = x.ndim == 3
    if single:
        x = x[None]
    g = torch.Generator().manual_seed(seed)
    if renoise:
        ab = schedule.abar(schedule.T)
        x = math.sqrt(ab) * x + math.sqrt(1.0 - ab) * torch.randn(x.shape, generator=g)
    with torch.no_grad():
        for t in range(schedule.T, 0, -1):
            mu = denoiser(x, torch.full((x.shape[0],), t, dtype=torch.long))
            if t > 1 or literal:
                x = mu + math.sqrt(schedule.betas[t - 1]) * torch.randn(x.shape, generator=g)
            else:
                x = mu
        if literal:
            x = x / math.sqrt(schedule.alphas[0])
    out = x.double().numpy()
    return out[0] if single else out

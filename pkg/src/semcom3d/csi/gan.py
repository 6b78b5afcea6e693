"""Conditional GAN channel estimator with least-squares adversarial losses.

The generator maps received pilots (conditioned on the pilot symbols) to a
full CSI image. The critic scores a CSI image together with the same
condition planes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from ..errors import InvalidArgumentError, TrainingError
from .classical import CsiImage, PilotBlock, ls_estimate

logger = logging.getLogger(__name__)

COND_PLANES = 9


def condition_planes(y, pilots: PilotBlock) -> np.ndarray:
    """Generator/critic condition for one received grid, shape (9, K, L).

    Planes: received Y (2), pilot symbols theta (2), Y * conj(theta) (2),
    pilot position indicator (1) and the interpolated LS estimate (2). Every
    plane is a fixed function of (Y, theta).
    """
    y = np.asarray(y)
    theta = pilots.theta
    pos = pilots.positions.astype(np.float64)
    y_t = y * np.conj(theta)
    ls = ls_estimate(y, pilots).planes
    return np.concatenate([
        np.stack([y.real, y.imag, theta.real, theta.imag, y_t.real, y_t.imag, pos]),
        ls,
    ])


def _conv(cin, cout, stride=1):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride, 1), nn.LeakyReLU(0.2))


class Generator(nn.Module):
    """Small encoder-decoder with skip connections; predicts a residual on the LS plane."""

    def __init__(self, width: int = 32):
        super().__init__()
        self.width = width
        self.e1 = nn.Sequential(_conv(COND_PLANES, width), _conv(width, width))
        self.e2 = nn.Sequential(_conv(width, 2 * width, 2), _conv(2 * width, 2 * width))
        self.e3 = nn.Sequential(_conv(2 * width, 2 * width, 2), _conv(2 * width, 2 * width))
        self.u2 = nn.ConvTranspose2d(2 * width, 2 * width, 2, 2)
        self.d2 = nn.Sequential(_conv(4 * width, 2 * width), _conv(2 * width, 2 * width))
        self.u1 = nn.ConvTranspose2d(2 * width, width, 2, 2)
        self.d1 = nn.Sequential(_conv(2 * width, width), _conv(width, width))
        self.out = nn.Conv2d(width, 2, 1)

    def forward(self, cond):
        h1 = self.e1(cond)
        h2 = self.e2(h1)
        h3 = self.e3(h2)
        g2 = self.d2(torch.cat([self.u2(h3), h2], 1))
        g1 = self.d1(torch.cat([self.u1(g2), h1], 1))
        return cond[:, -2:] + self.out(g1)


class Critic(nn.Module):
    """Strided-convolution critic on (CSI image, condition) -> one score per sample."""

    def __init__(self, width: int = 32):
        super().__init__()
        self.width = width
        self.net = nn.Sequential(
            _conv(2 + COND_PLANES, width, 2), _conv(width, 2 * width, 2), _conv(2 * width, 2 * width, 2),
            nn.AdaptiveAvgPool2d(1), nn.Flatten(), nn.Linear(2 * width, 1),
        )

    def forward(self, h, cond):
        return self.net(torch.cat([h, cond], 1))[:, 0]


def cgan_discriminator_loss(d_real, d_fake):
    """``(D(real) - 1)^2 + (D(fake) + 1)^2``, batch-averaged for tensors."""
    if isinstance(d_real, torch.Tensor):
        return ((d_real - 1) ** 2).mean() + ((d_fake + 1) ** 2).mean()
    return float((d_real - 1) ** 2 + (d_fake + 1) ** 2)


def cgan_generator_loss(d_fake, g_out, h, mu_l1: float = 100.0):
    """``D(fake)^2 + mu_L1 * mean|G - H|``."""
    if mu_l1 < 0:
        raise InvalidArgumentError(f"L1 weight must be >= 0, got {mu_l1}")
    if isinstance(g_out, CsiImage):
        g_out, h = g_out.planes, h.planes
    if isinstance(g_out, torch.Tensor):
        return (d_fake ** 2).mean() + mu_l1 * (g_out - h).abs().mean()
    return float(np.mean(np.asarray(d_fake) ** 2) + mu_l1 * np.mean(np.abs(np.asarray(g_out) - np.asarray(h))))


@dataclass
class GanConfig:
    width: int = 32
    lr: float = 1e-3
    batch_size: int = 32
    mu_l1: float = 100.0


@dataclass
class GanPair:
    generator: Generator
    critic: Critic
    config: GanConfig = field(default_factory=GanConfig)
    d_loss: list = field(default_factory=list)
    g_loss: list = field(default_factory=list)

    def estimate(self, y, pilots: PilotBlock) -> CsiImage:
        """Generator estimate for one received grid (or a stack, returning planes)."""
        y = np.asarray(y)
        single = y.ndim == 2
        ys = y[None] if single else y
        cond = torch.as_tensor(np.stack([condition_planes(v, pilots) for v in ys]), dtype=torch.float32)
        with torch.no_grad():
            out = self.generator(cond).double().numpy()
        return CsiImage(out[0]) if single else out


def train_cgan(samples, pilots: PilotBlock, config: GanConfig | None = None, epochs: int = 200,
               seed: int = 0) -> GanPair:
    """Alternating critic / generator Adam updates on every batch.

    ``samples`` is a pair ``(Y, H)`` of complex stacks (N, K, L). Mean epoch
    losses are recorded on the returned pair.
    """
    config = config or GanConfig()
    ys, hs = (np.asarray(a) for a in samples)
    if len(ys) == 0 or ys.shape != hs.shape:
        raise InvalidArgumentError("need a nonempty set of (Y, H) pairs with equal shapes")
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        gen_net, critic = Generator(config.width), Critic(config.width)
    pair = GanPair(gen_net, critic, config)
    if epochs <= 0:
        return pair
    cond = torch.as_tensor(np.stack([condition_planes(y, pilots) for y in ys]), dtype=torch.float32)
    target = torch.as_tensor(np.stack([hs.real, hs.imag], 1), dtype=torch.float32)
    g = torch.Generator().manual_seed(seed)
    opt_g = torch.optim.Adam(gen_net.parameters(), lr=config.lr, betas=(0.5, 0.999))
    opt_d = torch.optim.Adam(critic.parameters(), lr=config.lr, betas=(0.5, 0.999))
    n = len(cond)
    steps = epochs * -(-n // config.batch_size)
    sched_g = torch.optim.lr_scheduler.LambdaLR(opt_g, lambda s: 0.1 ** (s / steps))
    sched_d = torch.optim.lr_scheduler.LambdaLR(opt_d, lambda s: 0.1 ** (s / steps))
    for epoch in range(epochs):
        perm = torch.randperm(n, generator=g)
        d_sum = g_sum = 0.0
        nb = 0
        for s in range(0, n, config.batch_size):
            idx = perm[s:s + config.batch_size]
            c, h = cond[idx], target[idx]
            fake = gen_net(c)
            d_loss = cgan_discriminator_loss(critic(h, c), critic(fake.detach(), c))
            opt_d.zero_grad()
            d_loss.backward()
            opt_d.step()
            g_loss = cgan_generator_loss(critic(fake, c), fake, h, config.mu_l1)
            if not (torch.isfinite(d_loss) and torch.isfinite(g_loss)):
                raise TrainingError("GAN losses diverged", epoch=epoch)
            opt_g.zero_grad()
            g_loss.backward()
            opt_g.step()
            sched_g.step()
            sched_d.step()
            d_sum += d_loss.item()
            g_sum += g_loss.item()
            nb += 1
        pair.d_loss.append(d_sum / nb)
        pair.g_loss.append(g_sum / nb)
        logger.debug("cgan epoch %d D %.4f G %.4f", epoch, d_sum / nb, g_sum / nb)
    gen_net.eval()
    critic.eval()
    return pair

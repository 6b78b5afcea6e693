"""Masked semantic codec: ViT-style encoder with a semantic head and a keep-mask head,
channel encoder/decoder layers and a transformer decoder back to pixels.

The same network runs in two modes. Teacher mode bypasses the keep mask and
sends every token. Student mode keeps only the top ``ceil(rho * S)`` tokens
by mask-head logit and zeroes the rest.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import InvalidArgumentError, NumericError


@dataclass
class CodecConfig:
    image_size: tuple = (64, 64)
    patch: int = 8
    dim: int = 64  # transformer width
    latent_dim: int = 16  # d_e
    enc_layers: int = 2
    dec_layers: int = 2
    heads: int = 4
    keep_rate: float = 0.2
    quant_bits: int = 16
    clip: float = 4.0
    pos_embed: bool = True

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)
        h, w = self.image_size
        if self.patch < 1 or h % self.patch or w % self.patch:
            raise InvalidArgumentError(f"patch {self.patch} must divide image size {self.image_size}")
        if not 0 < self.keep_rate <= 1:
            raise InvalidArgumentError(f"keep rate must be in (0, 1], got {self.keep_rate}")
        if self.dim % self.heads:
            raise InvalidArgumentError(f"width {self.dim} not divisible by {self.heads} heads")
        if not 1 <= self.quant_bits <= 32:
            raise InvalidArgumentError(f"quantization bits must be in [1, 32], got {self.quant_bits}")

    @property
    def grid(self) -> tuple:
        return self.image_size[0] // self.patch, self.image_size[1] // self.patch

    @property
    def tokens(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def kept_tokens(self) -> int:
        return keep_count(self.tokens, self.keep_rate)

    def to_dict(self):
        return asdict(self)


def keep_count(n_tokens: int, rho: float) -> int:
    # the small slack absorbs float error in products like 0.2 * 5 = 1.0000000000000002
    return max(1, math.ceil(rho * n_tokens - 1e-9))


def attention(q, k, v, d):
    """``softmax(Q K^T / sqrt(d)) V`` over the last two axes (numpy in, numpy out)."""
    if d <= 0:
        raise InvalidArgumentError(f"scale dimension must be positive, got {d}")
    as_numpy = not isinstance(q, torch.Tensor)
    if as_numpy:
        q, k, v = (torch.as_tensor(np.asarray(a, dtype=np.float64)) for a in (q, k, v))
    scores = q @ k.transpose(-2, -1) / math.sqrt(d)
    out = torch.softmax(scores, dim=-1) @ v
    return out.numpy() if as_numpy else out


class SelfAttention(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, s, c = x.shape
        hd = c // self.heads
        q, k, v = self.qkv(x).reshape(b, s, 3, self.heads, hd).permute(2, 0, 3, 1, 4)
        out = attention(q, k, v, hd)
        return self.proj(out.transpose(1, 2).reshape(b, s, c))


class Block(nn.Module):
    def __init__(self, dim, heads, mlp_ratio=2):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


def patchify(images: torch.Tensor, patch: int) -> torch.Tensor:
    """(B, H, W, 3) -> (B, S, p*p*3), patches in row-major order."""
    b, h, w, c = images.shape
    x = images.reshape(b, h // patch, patch, w // patch, patch, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(b, (h // patch) * (w // patch), patch * patch * c)


def unpatchify(patches: torch.Tensor, patch: int, grid: tuple) -> torch.Tensor:
    b = patches.shape[0]
    gh, gw = grid
    x = patches.reshape(b, gh, gw, patch, patch, 3).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(b, gh * patch, gw * patch, 3)


def binarize_mask(logits: torch.Tensor, rho: float, mode: str = "infer") -> torch.Tensor:
    """Keep mask with ones at the top ``ceil(rho * S)`` logits (ties go to the lower index).

    In ``train`` mode the hard mask carries the sigmoid's gradient
    (straight-through). Forward values are identical in both modes.
    """
    if not 0 < rho <= 1:
        raise InvalidArgumentError(f"keep rate must be in (0, 1], got {rho}")
    if mode not in ("train", "infer"):
        raise InvalidArgumentError(f"unknown mask mode {mode!r}")
    logits = torch.as_tensor(logits)
    s = logits.shape[-1]
    k = keep_count(s, rho)
    order = torch.argsort(-logits.detach(), dim=-1, stable=True)
    hard = torch.zeros_like(logits, dtype=torch.float32 if not logits.is_floating_point() else logits.dtype)
    hard.scatter_(-1, order[..., :k], 1.0)
    if mode == "train":
        soft = torch.sigmoid(logits)
        return hard + (soft - soft.detach())
    return hard


def compress(e: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
    """Zero the rows of ``E`` (..., S, d_e) whose keep bit is 0."""
    e = torch.as_tensor(e)
    m = torch.as_tensor(m, dtype=e.dtype)
    if m.shape[-1] != e.shape[-2]:
        raise InvalidArgumentError(f"mask length {m.shape[-1]} != token count {e.shape[-2]}")
    return e * m[..., None]


def normalize_power(x: torch.Tensor, m: torch.Tensor | None = None, eps: float = 1e-8) -> torch.Tensor:
    """Scale each sample of ``x`` (B, S, d) so its kept entries have unit mean square."""
    if m is None:
        p = (x * x).mean(dim=(-2, -1), keepdim=True)
    else:
        mm = m[..., None].to(x.dtype)
        n = mm.sum(dim=(-2, -1), keepdim=True) * x.shape[-1]
        p = (x * x * mm).sum(dim=(-2, -1), keepdim=True) / n.clamp_min(1.0)
    return x / torch.sqrt(p + eps)


class SemanticCodec(nn.Module):
    """Semantic encoder, channel encoder/decoder and semantic decoder in one module."""

    def __init__(self, cfg: CodecConfig):
        super().__init__()
        self.cfg = cfg
        p = cfg.patch * cfg.patch * 3
        s = cfg.tokens
        self.patch_embed = nn.Linear(p, cfg.dim)
        self.enc_pos = nn.Parameter(torch.randn(1, s, cfg.dim) * 0.02)
        self.encoder = nn.ModuleList([Block(cfg.dim, cfg.heads) for _ in range(cfg.enc_layers)])
        self.enc_norm = nn.LayerNorm(cfg.dim)
        self.semantic_head = nn.Linear(cfg.dim, cfg.latent_dim)
        self.mask_head = nn.Linear(cfg.dim, 1)
        self.channel_enc = nn.Linear(cfg.latent_dim, cfg.latent_dim)
        self.channel_dec = nn.Linear(cfg.latent_dim, cfg.latent_dim)
        self.dec_embed = nn.Linear(cfg.latent_dim, cfg.dim)
        self.dec_pos = nn.Parameter(torch.randn(1, s, cfg.dim) * 0.02)
        self.decoder = nn.ModuleList([Block(cfg.dim, cfg.heads) for _ in range(cfg.dec_layers)])
        self.dec_norm = nn.LayerNorm(cfg.dim)
        self.to_pixels = nn.Linear(cfg.dim, p)

    # -- semantic encoder -------------------------------------------------
    def embed(self, images: torch.Tensor) -> torch.Tensor:
        if tuple(images.shape[-3:]) != (*self.cfg.image_size, 3):
            raise InvalidArgumentError(
                f"image shape {tuple(images.shape[-3:])} does not match {(*self.cfg.image_size, 3)}")
        return self.patch_embed(patchify(images, self.cfg.patch))

    def encode(self, images: torch.Tensor):
        """Images (B, H, W, 3) -> (E+ (B, S, d_e) in [-1, 1], mask logits (B, S))."""
        x = self.embed(images)
        if self.cfg.pos_embed:
            x = x + self.enc_pos
        for blk in self.encoder:
            x = blk(x)
        x = self.enc_norm(x)
        e = torch.tanh(self.semantic_head(x))
        logits = self.mask_head(x)[..., 0]
        if not (torch.isfinite(e).all() and torch.isfinite(logits).all()):
            raise NumericError("non-finite encoder activations")
        return e, logits

    # -- channel codec ----------------------------------------------------
    def channel_encode(self, e: torch.Tensor, m: torch.Tensor | None = None) -> torch.Tensor:
        """``X = tanh(E W_t + b_t)`` normalized to unit power over the kept rows, (B, S, d_e)."""
        x = torch.tanh(self.channel_enc(e))
        if m is not None:
            x = compress(x, m)
        return normalize_power(x, m)

    def channel_decode(self, y: torch.Tensor) -> torch.Tensor:
        """``E_hat = tanh(Y W_r + b_r)`` reshaped to (..., S, d_e)."""
        s, d = self.cfg.tokens, self.cfg.latent_dim
        if y.shape[-1] == s * d:
            y = y.reshape(*y.shape[:-1], s, d)
        elif tuple(y.shape[-2:]) != (s, d):
            raise InvalidArgumentError(f"received shape {tuple(y.shape)} does not match {s}x{d} latents")
        return torch.tanh(self.channel_dec(y))

    # -- semantic decoder -------------------------------------------------
    def decode(self, e_hat: torch.Tensor) -> torch.Tensor:
        x = self.dec_embed(e_hat)
        if self.cfg.pos_embed:
            x = x + self.dec_pos
        for blk in self.decoder:
            x = blk(x)
        pix = torch.sigmoid(self.to_pixels(self.dec_norm(x)))
        return unpatchify(pix, self.cfg.patch, self.cfg.grid)

    def forward(self, images: torch.Tensor, mode: str = "teacher", link=None, mask_mode: str = "infer"):
        """Full transmit-receive pass.

        ``link`` maps the (B, S*d_e) channel input to the equalized channel
        output; ``None`` is a noiseless channel. Returns a dict with ``image``,
        ``latent`` (E+), ``received`` (channel-decoded latents, zero at dropped
        rows) and ``mask``.
        """
        e, logits = self.encode(images)
        if mode == "teacher":
            m = torch.ones_like(logits)
        elif mode == "student":
            m = binarize_mask(logits, self.cfg.keep_rate, mask_mode)
        else:
            raise InvalidArgumentError(f"unknown codec mode {mode!r}")
        x = self.channel_encode(compress(e, m), m)
        flat = x.reshape(x.shape[0], -1)
        y = flat if link is None else link(flat)
        e_hat = compress(self.channel_decode(y), m)
        return {"image": self.decode(e_hat), "latent": e, "received": e_hat, "mask": m, "logits": logits}


def patch_embed(image, cfg: CodecConfig, codec: SemanticCodec) -> torch.Tensor:
    """Token sequence (S, dim) for one image (H, W, 3) through the codec's patch projection."""
    img = torch.as_tensor(np.asarray(image), dtype=torch.float32)
    if tuple(img.shape) != (*cfg.image_size, 3):
        raise InvalidArgumentError(f"image shape {tuple(img.shape)} does not match {(*cfg.image_size, 3)}")
    return codec.embed(img[None])[0]


def kl_divergence(a, b) -> float:
    """``sum a log(a / b)`` for probability vectors (terms with a = 0 contribute 0)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    nz = a > 0
    return float(np.sum(a[nz] * np.log(a[nz] / b[nz])))


def skd_losses(images, rec_teacher, rec_student, lat_teacher, lat_student, eps: float = 1e-6,
               detach_denominator: bool = False):
    """Teacher loss, student loss and the normalized distillation loss.

    ``L_KD = KL(softmax(flat E+) || softmax(flat E-)) / (L_tech + L_stu + eps)``,
    with KL averaged over the batch. Latents are (B, S, d_e) or (S, d_e).
    """
    if eps <= 0:
        raise InvalidArgumentError("eps must be positive")
    l_tech = F.mse_loss(rec_teacher, images)
    l_stu = F.mse_loss(rec_student, images)
    lt = lat_teacher.reshape(-1, lat_teacher.shape[-2] * lat_teacher.shape[-1])
    ls = lat_student.reshape(-1, lat_student.shape[-2] * lat_student.shape[-1])
    log_a = F.log_softmax(lt, dim=-1)
    log_b = F.log_softmax(ls, dim=-1)
    kl = (log_a.exp() * (log_a - log_b)).sum(-1).mean()
    den = l_tech + l_stu + eps
    if detach_denominator:
        den = den.detach()
    return l_tech, l_stu, kl / den

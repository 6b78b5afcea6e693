"""Pixel-level and semantic-level scores: PSNR, SSIM, NMSE, BLEU, cosine similarity.

Perfect matches return infinity sentinels instead of raising so sweep tables
stay rectangular. The captioner and embedder are deterministic stand-ins for
foundation models and only see coarse color/shape content.
"""

from __future__ import annotations

import hashlib
import logging
import math
import re
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import InvalidArgumentError

logger = logging.getLogger(__name__)

CSV_COLUMNS = ("config_hash", "seed", "snr_db", "estimator", "keep_rate", "payload_bits",
               "psnr_db", "ssim", "nmse_db", "bleu", "cosine", "wall_s")
EMBED_DIM = 256


def _check_shapes(a, b):
    if a.shape != b.shape:
        raise InvalidArgumentError(f"shape mismatch {a.shape} vs {b.shape}")


def psnr(a, b, max_val: float = 1.0) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_shapes(a, b)
    if max_val <= 0:
        raise InvalidArgumentError(f"max_val must be positive, got {max_val}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return math.inf
    return float(10.0 * np.log10(max_val ** 2 / mse))


def _window_means(x, win):
    """Mean over every win x win window (valid positions only), per trailing channel."""
    c = np.cumsum(np.cumsum(x, axis=0), axis=1)
    c = np.pad(c, [(1, 0), (1, 0)] + [(0, 0)] * (x.ndim - 2))
    s = c[win:, win:] - c[:-win, win:] - c[win:, :-win] + c[:-win, :-win]
    return s / (win * win)


def ssim(a, b, window: int = 8, data_range: float = 1.0, c1: float | None = None,
         c2: float | None = None) -> float:
    """Mean SSIM over all valid ``window`` x ``window`` uniform windows.

    Statistics use population (ddof=0) moments. Channels are scored
    independently and averaged.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_shapes(a, b)
    if a.ndim < 2:
        raise InvalidArgumentError("ssim needs at least a 2D image")
    if window < 1 or window > a.shape[0] or window > a.shape[1]:
        raise InvalidArgumentError(f"window {window} does not fit a {a.shape[0]}x{a.shape[1]} image")
    c1 = (0.01 * data_range) ** 2 if c1 is None else c1
    c2 = (0.03 * data_range) ** 2 if c2 is None else c2
    mu_a = _window_means(a, window)
    mu_b = _window_means(b, window)
    var_a = _window_means(a * a, window) - mu_a ** 2
    var_b = _window_means(b * b, window) - mu_b ** 2
    cov = _window_means(a * b, window) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def nmse_db(h, h_hat) -> float:
    """``10 log10(mean |H - H_hat|^2 / Var(H))`` with elementwise averaging."""
    h = np.asarray(h)
    h_hat = np.asarray(h_hat)
    _check_shapes(h, h_hat)
    var = np.mean(np.abs(h - h.mean()) ** 2)
    if var <= 0:
        raise InvalidArgumentError("NMSE undefined for a constant channel")
    err = np.mean(np.abs(h - h_hat) ** 2)
    if err == 0:
        return -math.inf
    return float(10.0 * np.log10(err / var))


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(reference, hypothesis, max_n: int = 4, smoothing: bool = True) -> float:
    """Sentence BLEU with uniform weights, clipped counts and brevity penalty.

    With ``smoothing`` an n-gram order with zero matches counts as
    ``1 / (total + 1)``; orders with matches are left untouched.
    """
    if max_n < 1:
        raise InvalidArgumentError(f"max_n must be >= 1, got {max_n}")
    ref = reference.split() if isinstance(reference, str) else list(reference)
    hyp = hypothesis.split() if isinstance(hypothesis, str) else list(hypothesis)
    if not hyp:
        logger.warning("empty hypothesis; BLEU is 0")
        return 0.0
    log_p = 0.0
    for n in range(1, max_n + 1):
        h = _ngrams(hyp, n)
        r = _ngrams(ref, n)
        total = sum(h.values())
        matched = sum(min(c, r[g]) for g, c in h.items())
        if matched == 0:
            if not smoothing or total == 0:
                return 0.0
            matched, total = 1, total + 1
        log_p += math.log(matched / total) / max_n
    bp = 1.0 if len(hyp) > len(ref) else math.exp(1.0 - len(ref) / len(hyp))
    return float(bp * math.exp(log_p))


def cosine_sim(u, v) -> float:
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    _check_shapes(u, v)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise InvalidArgumentError("cosine similarity of a zero vector")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def caption_stub(image, scene=None, min_fraction: float = 0.01) -> str:
    """Template caption listing the colors (and shapes, given the scene) in an image.

    Lit pixels snap to the nearest palette color; a color is mentioned when at
    least ``min_fraction`` of all pixels snap to it. With a scene, each
    mentioned color is paired with the kind of the primitive closest in color.
    """
    from .scene_io import NAMED_COLORS

    names = sorted(NAMED_COLORS)
    palette = np.array([NAMED_COLORS[k] for k in names])
    img = np.asarray(image, dtype=np.float64).reshape(-1, 3)
    lit = img[img.max(axis=1) > 0.1]
    words = []
    if lit.size:
        nearest = np.argmin(((lit[:, None, :] - palette[None]) ** 2).sum(-1), axis=1)
        counts = np.bincount(nearest, minlength=len(names))
        for i in sorted(range(len(names)), key=lambda i: (-counts[i], names[i])):
            if counts[i] < max(1.0, min_fraction * img.shape[0]):
                continue
            kind = "object"
            if scene is not None and scene.primitives:
                best = min(scene.primitives, key=lambda p: np.sum((np.asarray(p.color) - palette[i]) ** 2))
                kind = best.kind
            words.append(f"a {names[i]} {kind}")
    if not words:
        return "an empty dark scene"
    return "a scene with " + " and ".join(words)


def _token_bucket(token: str, dim: int):
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    v = int.from_bytes(digest, "little")
    return v % dim, 1.0 if (v >> 63) & 1 == 0 else -1.0


def embed_stub(text: str, dim: int = EMBED_DIM) -> np.ndarray:
    """Unit-norm hashed bag-of-words vector (order invariant by construction)."""
    vec = np.zeros(dim)
    for tok in re.findall(r"[a-z0-9]+", text.lower()):
        idx, sign = _token_bucket(tok, dim)
        vec[idx] += sign
    n = np.linalg.norm(vec)
    return vec / n if n > 0 else vec


@dataclass
class MetricReport:
    psnr_db: float = math.nan
    ssim: float = math.nan
    nmse_db: float = math.nan
    bleu: float = math.nan
    cosine: float = math.nan
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if not math.isnan(self.ssim) and not -1.0 <= self.ssim <= 1.0:
            raise InvalidArgumentError(f"ssim {self.ssim} outside [-1, 1]")
        if not math.isnan(self.bleu) and not 0.0 <= self.bleu <= 1.0:
            raise InvalidArgumentError(f"bleu {self.bleu} outside [0, 1]")
        if not math.isnan(self.cosine) and not -1.0 <= self.cosine <= 1.0:
            raise InvalidArgumentError(f"cosine {self.cosine} outside [-1, 1]")

    def as_dict(self):
        return asdict(self)


def format_value(x) -> str:
    """CSV cell text: blank for missing, 'inf'/'-inf' sentinels, 6 decimals otherwise."""
    if x is None:
        return ""
    if isinstance(x, str):
        return x
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return ""
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return f"{x:.6f}"

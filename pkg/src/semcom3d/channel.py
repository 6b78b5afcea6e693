"""Block-fading link simulation: Y = H X + N, SNR calibration and equalization.

Real-valued codec outputs are carried as complex baseband symbols. Consecutive
pairs ``(x[2k], x[2k+1])`` become ``x[2k] + j x[2k+1]``; the mapping has no
scale factor, so it is bit-exact both ways. An odd length is zero-padded by one
scalar and the pad is stripped on the way back.

Noise power is referenced to the unit mean-square power of the real stream
(``E x^2 = 1``, so ``E|s|^2 = 2``), never to the post-fading power: at a given
``snr_db`` every real dimension gets noise variance ``sigma^2 = 10^(-snr/10)``
whatever the draw.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy import ndimage

from .errors import InvalidArgumentError, SingularChannelError

MODELS = ("awgn", "rayleigh", "rician")

# Unit-energy 3x3 smoother: sum of squared taps is 1, so CN(0,1) stays CN(0,1).
SMOOTHING_KERNEL = np.full((3, 3), 1.0 / 3.0)


@dataclass
class ChannelConfig:
    model: str = "rician"
    k_factor: float = 3.0
    grid: tuple = (16, 16)
    seed: int = 0

    def __post_init__(self):
        if self.model not in MODELS:
            raise InvalidArgumentError(f"unknown channel model {self.model!r}; expected one of {MODELS}")
        if self.k_factor < 0:
            raise InvalidArgumentError(f"K-factor must be >= 0, got {self.k_factor}")
        self.grid = tuple(int(g) for g in self.grid)


@dataclass
class ChannelRealization:
    model: str
    gains: np.ndarray  # complex; (K_f, L_t) grid or (n, n) matrix
    k_factor: float = 0.0
    seed: int = 0
    kind: str = "grid"  # "grid" (elementwise) or "matrix"

    @property
    def shape(self):
        return self.gains.shape


@dataclass
class Frame:
    """Complex received (or transmitted) symbols plus the real length they carry."""

    symbols: np.ndarray
    n_real: int


def _cn(rng, shape):
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)


def draw_channel(model: str, shape=(16, 16), seed: int = 0, k_factor: float = 3.0,
                 kind: str = "grid", smooth: bool = True) -> ChannelRealization:
    """Draw one block-fading realization.

    Rician gains are ``sqrt(K/(K+1)) e^{j phi0} + sqrt(1/(K+1)) w`` where ``w``
    is CN(0,1) white noise passed through the unit-energy 3x3 smoother
    (circular boundary) on the grid variant. Rayleigh is the K = 0 case.
    """
    if model not in MODELS:
        raise InvalidArgumentError(f"unknown channel model {model!r}")
    if k_factor < 0:
        raise InvalidArgumentError(f"K-factor must be >= 0, got {k_factor}")
    if kind not in ("grid", "matrix"):
        raise InvalidArgumentError(f"unknown channel kind {kind!r}")
    shape = tuple(int(s) for s in shape)
    if len(shape) != 2 or min(shape) < 1 or (kind == "matrix" and shape[0] != shape[1]):
        raise InvalidArgumentError(f"invalid channel shape {shape}")
    if model == "awgn":
        return ChannelRealization(model, np.ones(shape, dtype=complex), 0.0, seed, kind)

    k = 0.0 if model == "rayleigh" else float(k_factor)
    rng = np.random.default_rng(seed)
    phi0 = rng.uniform(0.0, 2 * np.pi)
    scatter = _cn(rng, shape)
    if kind == "grid" and smooth:
        scatter = ndimage.convolve(scatter.real, SMOOTHING_KERNEL, mode="wrap") + 1j * ndimage.convolve(
            scatter.imag, SMOOTHING_KERNEL, mode="wrap"
        )
    h = np.sqrt(k / (k + 1.0)) * np.exp(1j * phi0) + np.sqrt(1.0 / (k + 1.0)) * scatter
    return ChannelRealization(model, h, k, seed, kind)


def noise_power_for_snr(signal_power: float, snr_db: float) -> float:
    if np.isinf(snr_db) and snr_db > 0:
        return 0.0
    return float(signal_power) / 10.0 ** (snr_db / 10.0)


def to_symbols(x: np.ndarray) -> Frame:
    x = np.asarray(x, dtype=np.float64).ravel()
    n = x.size
    if n % 2:
        x = np.concatenate([x, [0.0]])
    return Frame(x[0::2] + 1j * x[1::2], n)


def from_symbols(frame: Frame) -> np.ndarray:
    s = np.asarray(frame.symbols).ravel()
    out = np.empty(2 * s.size)
    out[0::2] = s.real
    out[1::2] = s.imag
    return out[: frame.n_real]


def _symbol_gains(gains: np.ndarray, n: int) -> np.ndarray:
    # symbols fill the grid row-major; longer streams reuse the same block
    flat = np.asarray(gains).ravel()
    return flat[np.arange(n) % flat.size]


def _matrix_layout(s: np.ndarray, n_tx: int) -> np.ndarray:
    cols = -(-s.size // n_tx)
    padded = np.zeros(n_tx * cols, dtype=complex)
    padded[: s.size] = s
    return padded.reshape(cols, n_tx).T  # column k carries symbols k*n_tx ... (k+1)*n_tx - 1


def transmit(x, chan: ChannelRealization, snr_db: float, seed: int = 0) -> Frame:
    """Map reals to symbols, apply the channel and add CN(0, 2 sigma^2) noise (sigma^2 per real dimension)."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise InvalidArgumentError("transmitted signal must be finite")
    frame = to_symbols(x)
    s = frame.symbols
    if chan.kind == "matrix":
        s = _matrix_layout(s, chan.gains.shape[1])
        y = chan.gains @ s
    else:
        y = _symbol_gains(chan.gains, s.size) * s
    sigma2 = noise_power_for_snr(1.0, snr_db)
    if sigma2 > 0:
        rng = np.random.default_rng(seed)
        y = y + np.sqrt(2.0 * sigma2) * _cn(rng, y.shape)
    return Frame(y, frame.n_real)


def equalize(y: Frame, h_est, mode: str = "elementwise") -> np.ndarray:
    """Undo the channel with an estimate and return the real-valued stream.

    ``elementwise`` divides each symbol by its gain; ``pseudo_inverse``
    applies ``(H^H H)^{-1} H^H`` (for a grid estimate that is the diagonal case).
    """
    gains = h_est.gains if isinstance(h_est, ChannelRealization) else np.asarray(h_est)
    is_matrix = isinstance(h_est, ChannelRealization) and h_est.kind == "matrix"
    sym = np.asarray(y.symbols)

    if is_matrix:
        if mode not in ("pseudo_inverse", "elementwise"):
            raise InvalidArgumentError(f"unknown equalizer mode {mode!r}")
        if mode == "elementwise":
            raise InvalidArgumentError("elementwise equalization needs a grid channel")
        if np.linalg.matrix_rank(gains) < gains.shape[1]:
            raise SingularChannelError("channel matrix is rank deficient")
        gh = gains.conj().T
        x_hat = np.linalg.solve(gh @ gains, gh @ sym)
        s = x_hat.T.ravel()[: -(-y.n_real // 2)]
        return from_symbols(Frame(s, y.n_real))

    g = _symbol_gains(gains, sym.size)
    small = np.abs(g) < 1e-12
    if small.any():
        idx = int(np.argmax(small))
        raise SingularChannelError(f"channel gain vanishes at symbol {idx}", index=idx)
    if mode == "elementwise":
        s = sym / g
    elif mode == "pseudo_inverse":
        s = g.conj() * sym / (g.conj() * g).real
    else:
        raise InvalidArgumentError(f"unknown equalizer mode {mode!r}")
    return from_symbols(Frame(s, y.n_real))


def torch_fading_link(x: torch.Tensor, snr_db, model: str = "awgn", k_factor: float = 3.0,
                      generator: torch.Generator | None = None) -> torch.Tensor:
    """Differentiable stand-in for transmit + perfect-CSI zero-forcing equalization.

    ``x`` is (B, N) with N even, unit mean-square power per real entry.
    ``snr_db`` is a float or a (B,) tensor. Fading is drawn i.i.d. per symbol,
    so after equalization the channel acts as additive noise ``n / h``.
    """
    b, n = x.shape
    snr = torch.as_tensor(snr_db, dtype=x.dtype).reshape(-1, 1).expand(b, 1)
    sigma2 = 10.0 ** (-snr / 10.0)
    # noise variance sigma^2 per real dimension, as in transmit
    noise = torch.randn(b, n, dtype=x.dtype, generator=generator) * torch.sqrt(sigma2)
    if model == "awgn":
        return x + noise
    k = 0.0 if model == "rayleigh" else k_factor
    m = n // 2
    phi = torch.rand(b, 1, dtype=x.dtype, generator=generator) * 2 * np.pi
    hr = np.sqrt(k / (k + 1)) * torch.cos(phi) + np.sqrt(0.5 / (k + 1)) * torch.randn(
        b, m, dtype=x.dtype, generator=generator)
    hi = np.sqrt(k / (k + 1)) * torch.sin(phi) + np.sqrt(0.5 / (k + 1)) * torch.randn(
        b, m, dtype=x.dtype, generator=generator)
    mag2 = hr ** 2 + hi ** 2
    nr, ni = noise[:, 0::2], noise[:, 1::2]
    # (n / h) = n * conj(h) / |h|^2
    er = (nr * hr + ni * hi) / mag2
    ei = (ni * hr - nr * hi) / mag2
    return torch.stack([x[:, 0::2] + er, x[:, 1::2] + ei], dim=-1).reshape(b, n)

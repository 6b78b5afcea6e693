"""Semantic payload: keep-mask bits plus q-bit quantized kept latents, and its wire format.

Wire layout (all integers little-endian)::

    magic  b"SC3D"          4 bytes
    version                 u8
    S (tokens)              u16
    d_e (latent dim)        u16
    q (bits per scalar)     u8
    rho * 1000              u16
    lo, step                f64, f64   dequantization x = lo + code * step
    clipped count           u32
    mask                    ceil(S / 8) bytes, token i at bit i % 8 of byte i // 8
    codes                   popcount(mask) * d_e codes of q bits each, packed
                            LSB-first, row-major over kept rows, padded to a byte
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from ..errors import FormatError, InvalidArgumentError

logger = logging.getLogger(__name__)

MAGIC = b"SC3D"
WIRE_VERSION = 1
_HEADER = struct.Struct("<4sBHHBHddI")
HEADER_BITS = 8 * _HEADER.size


@dataclass
class SemanticPayload:
    tokens: int
    latent_dim: int
    quant_bits: int
    keep_rate: float
    mask: np.ndarray  # (S,) bool
    codes: np.ndarray  # (k, d_e) uint64
    lo: float
    step: float
    clipped: int = 0

    @property
    def kept(self) -> int:
        return int(self.mask.sum())

    @property
    def kept_bits(self) -> int:
        return self.kept * self.latent_dim * self.quant_bits

    @property
    def bit_size(self) -> int:
        """Kept scalars, S mask bits and the fixed header."""
        return self.kept_bits + self.tokens + HEADER_BITS

    @property
    def wire_bits(self) -> int:
        """Bits on the wire after byte padding of the mask and code sections."""
        return HEADER_BITS + 8 * math.ceil(self.tokens / 8) + 8 * math.ceil(self.kept_bits / 8)

    def to_bytes(self) -> bytes:
        head = _HEADER.pack(MAGIC, WIRE_VERSION, self.tokens, self.latent_dim, self.quant_bits,
                            int(round(self.keep_rate * 1000)), self.lo, self.step, self.clipped)
        mask = np.packbits(self.mask.astype(np.uint8), bitorder="little").tobytes()
        return head + mask + _pack_codes(self.codes.ravel(), self.quant_bits)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "SemanticPayload":
        if len(blob) < _HEADER.size:
            raise FormatError("payload shorter than its header")
        magic, ver, s, d, q, rho, lo, step, clipped = _HEADER.unpack_from(blob)
        if magic != MAGIC:
            raise FormatError(f"bad payload magic {magic!r}")
        if ver != WIRE_VERSION:
            raise FormatError(f"unsupported payload version {ver}")
        off = _HEADER.size
        nmask = math.ceil(s / 8)
        if len(blob) < off + nmask:
            raise FormatError("payload truncated in mask section")
        mask = np.unpackbits(np.frombuffer(blob, np.uint8, nmask, off), bitorder="little")[:s].astype(bool)
        k = int(mask.sum())
        ncode = math.ceil(k * d * q / 8)
        body = blob[off + nmask:]
        if len(body) != ncode:
            raise FormatError(f"expected {ncode} code bytes, found {len(body)}")
        codes = _unpack_codes(body, q, k * d).reshape(k, d)
        return cls(s, d, q, rho / 1000.0, mask, codes, lo, step, clipped)


def _pack_codes(codes: np.ndarray, q: int) -> bytes:
    if codes.size == 0:
        return b""
    bits = ((codes.astype(np.uint64)[:, None] >> np.arange(q, dtype=np.uint64)) & 1).astype(np.uint8)
    return np.packbits(bits.ravel(), bitorder="little").tobytes()


def _unpack_codes(body: bytes, q: int, n: int) -> np.ndarray:
    if n == 0:
        return np.zeros(0, dtype=np.uint64)
    bits = np.unpackbits(np.frombuffer(body, np.uint8), bitorder="little")[: n * q].reshape(n, q)
    return (bits.astype(np.uint64) << np.arange(q, dtype=np.uint64)).sum(axis=1, dtype=np.uint64)


def quantizer(q: int, clip: float):
    """``(lo, step)`` of the uniform q-bit quantizer on ``[-clip, clip]``."""
    if clip <= 0:
        raise InvalidArgumentError(f"clip must be positive, got {clip}")
    return -float(clip), 2.0 * clip / (2 ** q - 1)


def pack_payload(e_minus, mask, keep_rate: float, quant_bits: int = 16, clip: float = 4.0) -> SemanticPayload:
    """Quantize the kept rows of ``E-`` (S, d_e). Values beyond ``+-clip`` are clipped and counted."""
    e = np.asarray(e_minus, dtype=np.float64)
    m = np.asarray(mask).astype(bool).ravel()
    if e.ndim != 2 or e.shape[0] != m.size:
        raise InvalidArgumentError(f"latents {e.shape} do not match mask length {m.size}")
    if not np.all(np.isfinite(e)):
        raise InvalidArgumentError("latents must be finite")
    lo, step = quantizer(quant_bits, clip)
    kept = e[m]
    over = int(np.sum(np.abs(kept) > clip))
    if over:
        logger.warning("%d latent values clipped to +-%g", over, clip)
    codes = np.round((np.clip(kept, -clip, clip) - lo) / step).astype(np.uint64)
    return SemanticPayload(e.shape[0], e.shape[1], quant_bits, float(keep_rate), m, codes, lo, step, over)


def unpack_payload(payload: SemanticPayload):
    """Dequantized ``E_hat`` (S, d_e) with zero rows where the mask is 0, and the mask."""
    out = np.zeros((payload.tokens, payload.latent_dim))
    out[payload.mask] = payload.lo + payload.codes.astype(np.float64) * payload.step
    return out, payload.mask.copy()


def full_bits(tokens: int, latent_dim: int, quant_bits: int) -> int:
    return tokens * latent_dim * quant_bits


def nominal_kept_bits(tokens: int, latent_dim: int, quant_bits: int, keep_rate: float) -> int:
    """Kept-only size at a nominal keep rate, ``floor(rho * full)`` (no mask or header)."""
    return math.floor(Fraction(str(keep_rate)) * full_bits(tokens, latent_dim, quant_bits))


def kept_bits(tokens: int, latent_dim: int, quant_bits: int, kept: int) -> int:
    if not 0 <= kept <= tokens:
        raise InvalidArgumentError(f"kept count {kept} outside [0, {tokens}]")
    return kept * latent_dim * quant_bits


def payload_bits(tokens: int, latent_dim: int, quant_bits: int, kept: int) -> int:
    """Closed-form payload size: kept scalars, S mask bits and the fixed header."""
    return kept_bits(tokens, latent_dim, quant_bits, kept) + tokens + HEADER_BITS

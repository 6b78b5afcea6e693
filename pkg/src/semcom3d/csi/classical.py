"""Pilot layout, two-plane CSI images and the classical estimators (LS, LMMSE, OMP, AMP).

Pilots sit on a rectangular lattice of the K_f x L_t grid and carry unit-modulus
QPSK symbols. A pilot observation is ``y = h * theta + n`` at every lattice
position, with n ~ CN(0, sigma^2) where sigma^2 follows the unit-power SNR
convention of the channel module.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from ..channel import ChannelRealization, noise_power_for_snr
from ..errors import InvalidArgumentError


@dataclass
class CsiImage:
    """Real and imaginary planes of a complex grid, shape (2, K_f, L_t)."""

    planes: np.ndarray

    def __post_init__(self):
        self.planes = np.asarray(self.planes, dtype=np.float64)
        if self.planes.ndim != 3 or self.planes.shape[0] != 2:
            raise InvalidArgumentError(f"CSI image must be (2, K, L), got {self.planes.shape}")
        if not np.all(np.isfinite(self.planes)):
            raise InvalidArgumentError("CSI image must be finite")

    @classmethod
    def from_complex(cls, h) -> "CsiImage":
        h = np.asarray(h)
        return cls(np.stack([h.real, h.imag]))

    def to_complex(self) -> np.ndarray:
        return self.planes[0] + 1j * self.planes[1]

    @property
    def shape(self):
        return self.planes.shape[1:]


@dataclass
class PilotBlock:
    """Known symbols ``theta`` on the full grid (only pilot positions matter) and the position mask."""

    theta: np.ndarray  # complex (K, L)
    positions: np.ndarray  # bool (K, L)

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=complex)
        self.positions = np.asarray(self.positions, dtype=bool)
        if self.theta.shape != self.positions.shape:
            raise InvalidArgumentError("pilot symbols and positions must share the grid shape")
        if not np.allclose(np.abs(self.theta[self.positions]), 1.0, atol=1e-12):
            raise InvalidArgumentError("pilot symbols must have unit modulus")

    @property
    def shape(self):
        return self.positions.shape

    @property
    def count(self) -> int:
        return int(self.positions.sum())

    def lattice(self):
        """Row and column indices if the pilots form a full rectangular lattice, else None."""
        rows = np.flatnonzero(self.positions.any(axis=1))
        cols = np.flatnonzero(self.positions.any(axis=0))
        if self.positions[np.ix_(rows, cols)].all() and len(rows) * len(cols) == self.count:
            return rows, cols
        return None


def qpsk(rng, shape):
    return np.exp(1j * (np.pi / 4 + np.pi / 2 * rng.integers(0, 4, size=shape)))


def make_pilots(grid=(16, 16), spacing: int = 4, seed: int = 0, offset: int = 0) -> PilotBlock:
    """QPSK pilots every ``spacing``-th row and column (``spacing=1`` fills the grid)."""
    if spacing < 1:
        raise InvalidArgumentError(f"pilot spacing must be >= 1, got {spacing}")
    pos = np.zeros(grid, dtype=bool)
    pos[offset::spacing, offset::spacing] = True
    theta = qpsk(np.random.default_rng(seed), grid)
    return PilotBlock(np.where(pos, theta, 0), pos)


def observe_pilots(h, pilots: PilotBlock, snr_db: float, seed: int = 0) -> np.ndarray:
    """Received grid ``y = h * theta + n``; entries off the pilot lattice are zero."""
    h = h.gains if isinstance(h, ChannelRealization) else np.asarray(h)
    if h.shape != pilots.shape:
        raise InvalidArgumentError(f"channel shape {h.shape} does not match pilot grid {pilots.shape}")
    sigma2 = noise_power_for_snr(1.0, snr_db)
    rng = np.random.default_rng(seed)
    n = np.sqrt(sigma2 / 2) * (rng.standard_normal(h.shape) + 1j * rng.standard_normal(h.shape))
    return np.where(pilots.positions, h * pilots.theta + n, 0)


def _interp_axis(values, known_idx, n):
    """Linear interpolation along axis 0 with linear extrapolation past the end points."""
    if len(known_idx) == 1:
        return np.repeat(values, n, axis=0)
    f = RegularGridInterpolator((known_idx.astype(float),), values, method="linear",
                                bounds_error=False, fill_value=None)
    return f(np.arange(n, dtype=float)[:, None])


def ls_estimate(y, pilots: PilotBlock) -> CsiImage:
    """``h = y / theta`` on the pilots, bilinear interpolation (and extrapolation) elsewhere."""
    y = np.asarray(y)
    theta_p = pilots.theta[pilots.positions]
    if np.any(np.abs(theta_p) == 0):
        raise InvalidArgumentError("zero pilot symbol")
    if pilots.count == 0:
        raise InvalidArgumentError("no pilot positions")
    h = np.zeros(pilots.shape, dtype=complex)
    h[pilots.positions] = y[pilots.positions] / theta_p
    if pilots.positions.all():
        return CsiImage.from_complex(h)
    lat = pilots.lattice()
    if lat is None:
        raise InvalidArgumentError("interpolation needs pilots on a rectangular lattice")
    rows, cols = lat
    hp = h[np.ix_(rows, cols)]
    k, l_ = pilots.shape
    along_rows = _interp_axis(hp, rows, k)  # (K, len(cols))
    full = _interp_axis(along_rows.T, cols, l_).T
    return CsiImage.from_complex(full)


def channel_statistics(draws) -> tuple:
    """Empirical mean (N,) and covariance (N, N) of flattened complex channel draws."""
    x = np.asarray([d.gains if isinstance(d, ChannelRealization) else d for d in draws]).reshape(len(draws), -1)
    mu = x.mean(axis=0)
    xc = x - mu
    return mu, xc.T @ xc.conj() / len(x)


def _check_psd(r):
    if r.ndim != 2 or r.shape[0] != r.shape[1]:
        raise InvalidArgumentError("covariance must be square")
    if not np.allclose(r, r.conj().T, atol=1e-9 * max(1.0, np.abs(r).max())):
        raise InvalidArgumentError("covariance must be Hermitian")
    ev = np.linalg.eigvalsh(r)
    if ev.min() < -1e-9 * max(1.0, ev.max()):
        raise InvalidArgumentError(f"covariance is not positive semidefinite (min eigenvalue {ev.min():.3g})")


def mmse_estimate(y, pilots: PilotBlock, r_h, sigma2: float, mean=None) -> CsiImage:
    """Linear MMSE over the whole grid from the pilot LS values.

    ``h = mu + R_hp (R_pp + sigma^2 I)^-1 (h_LS,p - mu_p)``; with unit-modulus
    pilots the LS noise on each pilot is CN(0, sigma^2). ``r_h`` is the (N, N)
    covariance of the flattened grid (or a scalar for a 1x1 grid).
    """
    r_h = np.atleast_2d(np.asarray(r_h, dtype=complex))
    _check_psd(r_h)
    if sigma2 < 0:
        raise InvalidArgumentError("noise power must be >= 0")
    n = pilots.positions.size
    if r_h.shape != (n, n):
        raise InvalidArgumentError(f"covariance shape {r_h.shape} does not match {n} grid points")
    mu = np.zeros(n, dtype=complex) if mean is None else np.asarray(mean, dtype=complex).ravel()
    p = pilots.positions.ravel()
    y = np.asarray(y).ravel()
    h_ls_p = y[p] / pilots.theta.ravel()[p]
    if np.isinf(sigma2):
        return CsiImage.from_complex(mu.reshape(pilots.shape))
    r_pp = r_h[np.ix_(p, p)]
    r_hp = r_h[:, p]
    a = r_pp + sigma2 * np.eye(p.sum())
    # lstsq copes with a singular R_pp in the noiseless limit
    gain = np.linalg.lstsq(a, h_ls_p - mu[p], rcond=None)[0] if sigma2 == 0 else np.linalg.solve(a, h_ls_p - mu[p])
    return CsiImage.from_complex((mu + r_hp @ gain).reshape(pilots.shape))


def dft_dictionary(grid=(16, 16)) -> np.ndarray:
    """Unit-norm 2D-DFT atoms as columns (N, N), ordered by increasing centred frequency.

    Ordering matters on a decimated pilot lattice, where aliased atoms tie and
    the greedy search keeps the first (lowest-frequency) one.
    """
    k, l_ = grid
    fk = np.fft.fftfreq(k) * k
    fl = np.fft.fftfreq(l_) * l_
    rk, cl = np.meshgrid(np.arange(k), np.arange(l_), indexing="ij")
    atoms, keys = [], []
    for a in range(k):
        for b in range(l_):
            atoms.append(np.exp(2j * np.pi * (a * rk / k + b * cl / l_)).ravel() / np.sqrt(k * l_))
            keys.append((abs(fk[a]) + abs(fl[b]), abs(fk[a]), a, b))
    order = sorted(range(len(atoms)), key=lambda i: keys[i])
    return np.stack([atoms[i] for i in order], axis=1)


def omp(phi, y, k: int, tol: float = 0.0):
    """Orthogonal matching pursuit: ``k`` greedy atoms, least-squares refit each step.

    Returns the coefficient vector and the chosen support (in selection order).
    """
    phi = np.asarray(phi)
    y = np.asarray(y).ravel()
    m, n = phi.shape
    if k < 0:
        raise InvalidArgumentError("sparsity must be >= 0")
    if k > m:
        raise InvalidArgumentError(f"sparsity {k} exceeds the {m} measurements")
    norms = np.linalg.norm(phi, axis=0)
    norms = np.where(norms > 0, norms, 1.0)
    x = np.zeros(n, dtype=np.result_type(phi, y, float))
    support: list[int] = []
    r = y.astype(x.dtype)
    for _ in range(k):
        if np.linalg.norm(r) <= tol:
            break
        corr = np.abs(phi.conj().T @ r) / norms
        corr[support] = -1.0
        # exact ties (aliased atoms) differ by roundoff; keep the first in dictionary order
        support.append(int(np.flatnonzero(corr >= corr.max() * (1 - 1e-9))[0]))
        coef = np.linalg.lstsq(phi[:, support], y, rcond=None)[0]
        r = y - phi[:, support] @ coef
    if support:
        x[support] = coef
    return x, support


def _pilot_operator(pilots: PilotBlock, dictionary):
    p = pilots.positions.ravel()
    return pilots.theta.ravel()[p][:, None] * dictionary[p]


def omp_estimate(y, pilots: PilotBlock, k: int, dictionary=None) -> CsiImage:
    """Sparse estimate ``H = D c`` with ``c`` from OMP on ``y_p = theta_p * (D c)_p``."""
    d = dft_dictionary(pilots.shape) if dictionary is None else np.asarray(dictionary)
    if k > pilots.count:
        raise InvalidArgumentError(f"sparsity {k} exceeds the {pilots.count} pilots")
    yp = np.asarray(y).ravel()[pilots.positions.ravel()]
    c, _ = omp(_pilot_operator(pilots, d), yp, k)
    return CsiImage.from_complex((d @ c).reshape(pilots.shape))


def soft_threshold(x, tau):
    """Complex soft threshold: shrink magnitudes by ``tau``, keep phases."""
    mag = np.abs(x)
    return np.where(mag > tau, (1.0 - tau / np.maximum(mag, 1e-300)) * x, 0.0)


def amp(phi, y, iters: int = 30, threshold: float = 1.5):
    """Approximate message passing with a soft-threshold denoiser.

    Columns of ``phi`` are rescaled to unit norm internally. The threshold at
    each step is ``threshold * ||z|| / sqrt(M)``. The Onsager term is
    ``z (1/M) sum eta'``; for the complex soft threshold the divergence
    per active entry is ``1 - tau / (2 |v|)``.
    """
    phi = np.asarray(phi)
    y = np.asarray(y).ravel()
    m, n = phi.shape
    if m == 0 or not np.any(y):
        return np.zeros(n, dtype=complex)
    norms = np.linalg.norm(phi, axis=0)
    norms = np.where(norms > 0, norms, 1.0)
    a = phi / norms
    x = np.zeros(n, dtype=complex)
    z = y.astype(complex)
    for _ in range(iters):
        tau = threshold * np.linalg.norm(z) / np.sqrt(m)
        v = x + a.conj().T @ z
        x = soft_threshold(v, tau)
        mag = np.abs(v)
        div = np.where(mag > tau, 1.0 - tau / (2 * np.maximum(mag, 1e-300)), 0.0).sum()
        z = y - a @ x + z * div / m
    return x / norms


def resolvable_atoms(pilots: PilotBlock, dictionary) -> np.ndarray:
    """Indices of atoms whose pilot samples are not a multiple of an earlier atom's.

    On a decimated lattice many DFT atoms alias onto the same pilot samples;
    only the first of each group can be identified from the pilots.
    """
    a = _pilot_operator(pilots, np.asarray(dictionary))
    norms = np.linalg.norm(a, axis=0)
    keep: list[int] = []
    for j in np.flatnonzero(norms > 1e-12):
        col = a[:, j] / norms[j]
        if all(abs(np.vdot(a[:, i] / norms[i], col)) < 1 - 1e-9 for i in keep):
            keep.append(int(j))
    return np.array(keep, dtype=int)


def amp_estimate(y, pilots: PilotBlock, iters: int = 30, threshold: float = 1.5, dictionary=None) -> CsiImage:
    """AMP over the pilot-resolvable atoms of the dictionary (aliased duplicates removed)."""
    d = dft_dictionary(pilots.shape) if dictionary is None else np.asarray(dictionary)
    d = d[:, resolvable_atoms(pilots, d)]
    yp = np.asarray(y).ravel()[pilots.positions.ravel()]
    c = amp(_pilot_operator(pilots, d), yp, iters, threshold)
    return CsiImage.from_complex((d @ c).reshape(pilots.shape))

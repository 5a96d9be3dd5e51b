"""Elongated Morlet band-pass filters, Gaussian low-pass and filter banks.

Filters are sampled on an odd ``N x N`` grid centred at ``u = 0``.  Tap
``taps[i, j]`` sits at ``u = (i - (N-1)/2, j - (N-1)/2)``; the first
coordinate runs along array axis 0 and the matching frequency component
``omega[0]`` is the one returned by ``np.fft.fft2`` along axis 0.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .exceptions import DegenerateInputError, GridError, ParameterError

BAND_PASS = "band_pass"
LOW_PASS = "low_pass"

# Design constants for the two layers of a block.
FIRST_XI = 3 * np.pi / 4
FIRST_SIGMA = 1.25
FIRST_SLANT = 0.5
SECOND_XI = np.pi / np.sqrt(2)
SECOND_SIGMA = 1.25 * np.sqrt(2 / 3)
SECOND_SLANT = np.sqrt(0.2)
LOWPASS_GAMMA = -0.5


@dataclass(frozen=True)
class MorletParams:
    """Parameters of one rotated Morlet filter.

    Attributes
    ----------
    gamma : float
        Scale exponent; the filter scale is ``2**gamma``.
    xi : tuple of float
        Centre frequency of the unrotated mother wavelet (radians/pixel).
    sigma : float
        Bandwidth; the spatial envelope is ``exp(-sigma**2 |u|**2 / 2)``
        along the first axis.
    slant : float
        Anisotropy ``s``; the envelope along the second axis uses
        ``sigma * s``.
    angle : float
        Rotation ``theta`` in ``[0, pi]``.
    """

    gamma: float
    xi: tuple
    sigma: float
    slant: float
    angle: float = 0.0

    def __post_init__(self):
        values = [self.gamma, self.sigma, self.slant, self.angle, *self.xi]
        if len(self.xi) != 2:
            raise ParameterError("xi must be a 2-vector")
        if not all(np.isfinite(v) for v in values):
            raise ParameterError(f"non-finite Morlet parameter in {self}")
        if self.sigma <= 0 or self.slant <= 0:
            raise ParameterError("sigma and slant must be positive")
        if not 0.0 <= self.angle <= np.pi:
            raise ParameterError(f"angle {self.angle} outside [0, pi]")

    @classmethod
    def first_layer(cls, gamma=0.0, angle=0.0):
        """Band-pass parameters for the first layer of a block at scale ``2**gamma``."""
        scale = 2.0 ** (-gamma)
        return cls(gamma, (FIRST_XI * scale, 0.0), FIRST_SIGMA * scale, FIRST_SLANT, angle)

    @classmethod
    def second_layer(cls, angle=0.0):
        """Band-pass parameters for the second (intermediate-scale) layer of a block."""
        return cls(0.0, (SECOND_XI, 0.0), SECOND_SIGMA, SECOND_SLANT, angle)

    def rotated(self, angle):
        return MorletParams(self.gamma, self.xi, self.sigma, self.slant, angle)


@dataclass(frozen=True)
class SpectralStats:
    center_freq: tuple
    bandwidth: float


@dataclass(frozen=True, eq=False)
class Filter:
    """A complex 2-D filter on a centred odd grid."""

    taps: np.ndarray
    kind: str
    params: object

    @property
    def grid(self) -> int:
        return self.taps.shape[0]

    def normalized(self) -> "Filter":
        """Copy rescaled to unit l2 norm, as required by the translation bound."""
        norm = np.linalg.norm(self.taps)
        if norm == 0:
            raise DegenerateInputError("cannot normalize a zero filter")
        return Filter(self.taps / norm, self.kind, self.params)


@dataclass(eq=False)
class FilterBank:
    """A low-pass filter followed by ``L`` band-pass filters at angles ``pi*l/L``."""

    low_pass: Filter
    band_pass: list
    subsample: int = 2
    _spectra: dict = field(default_factory=dict, init=False, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, init=False, repr=False)

    def __post_init__(self):
        grids = {self.low_pass.grid} | {f.grid for f in self.band_pass}
        if len(grids) != 1:
            raise GridError(f"filters of one bank must share a grid, got {sorted(grids)}")
        angles = self.angles
        if any(b <= a for a, b in zip(angles, angles[1:])):
            raise ParameterError("band-pass angles must be strictly increasing")

    def __getstate__(self):
        state = dict(self.__dict__)
        state["_spectra"] = {}
        del state["_lock"]
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        self._lock = threading.Lock()

    @property
    def L(self) -> int:
        return len(self.band_pass)

    @property
    def grid(self) -> int:
        return self.low_pass.grid

    @property
    def angles(self) -> list:
        return [f.params.angle for f in self.band_pass]

    @property
    def filters(self) -> list:
        """All filters in output-channel order: ``g_0, g_1, ..., g_L``."""
        return [self.low_pass, *self.band_pass]

    def spectra(self, shape) -> np.ndarray:
        """DFT of every filter periodized onto an ``H x W`` torus, shape ``(L+1, H, W)``.

        Taps falling outside the torus wrap around, which is exactly what a
        circular convolution with the untruncated filter does.  Results are
        cached per shape; the cache is filled under a lock and read freely.
        """
        shape = tuple(int(s) for s in shape)
        cached = self._spectra.get(shape)
        if cached is None:
            with self._lock:
                cached = self._spectra.get(shape)
                if cached is None:
                    kernels = np.stack([periodize(f.taps, shape) for f in self.filters])
                    cached = np.fft.fft2(kernels)
                    cached.setflags(write=False)
                    self._spectra[shape] = cached
        return cached


def _check_grid(grid):
    if int(grid) != grid or grid < 1 or grid % 2 == 0:
        raise GridError(f"grid size must be a positive odd integer, got {grid}")
    return int(grid)


def _grid_coords(grid):
    half = (grid - 1) // 2
    r = np.arange(-half, half + 1, dtype=float)
    return np.meshgrid(r, r, indexing="ij")


def _snap(v):
    # exact zeros/ones make quarter-turn rotations permute the grid exactly
    for exact in (0.0, 1.0, -1.0):
        if abs(v - exact) < 1e-12:
            return exact
    return v


def default_grid(sigma, slant=1.0):
    """Odd grid size at which a Gaussian envelope has decayed below ``1e-4``."""
    width = sigma * min(slant, 1.0)
    return 2 * math.ceil(4.0 / width) + 1


def build_morlet(params: MorletParams, grid: int) -> Filter:
    """Sample a rotated, zero-mean elongated Morlet filter.

    ``g(u) = sigma^2 s^2 / (2 pi) (exp(i xi.v) - K) exp(-v.Sigma v / 2)`` with
    ``v = r_{-theta} u`` and ``Sigma = diag(sigma^2, sigma^2 s^2)``.  ``K`` is the
    ratio that makes the discrete sum of taps vanish; the sums are computed
    with ``math.fsum`` so the result does not depend on summation order.
    """
    grid = _check_grid(grid)
    u0, u1 = _grid_coords(grid)
    c, s = _snap(math.cos(params.angle)), _snap(math.sin(params.angle))
    v0 = c * u0 + s * u1
    v1 = -s * u0 + c * u1

    sig2 = params.sigma ** 2
    envelope = np.exp(-(sig2 * v0 ** 2 + sig2 * params.slant ** 2 * v1 ** 2) / 2)
    wave = np.exp(1j * (params.xi[0] * v0 + params.xi[1] * v1))

    weighted = (wave * envelope).ravel()
    norm = math.fsum(envelope.ravel())
    K = complex(math.fsum(weighted.real), math.fsum(weighted.imag)) / norm

    amplitude = sig2 * params.slant ** 2 / (2 * np.pi)
    taps = amplitude * (wave - K) * envelope
    return Filter(taps, BAND_PASS, params)


def build_gaussian_lowpass(sigma: float, grid: int) -> Filter:
    """Sample ``g_0(u) = sigma^2 / (2 pi) exp(-sigma^2 |u|^2 / 2)``."""
    grid = _check_grid(grid)
    if not np.isfinite(sigma) or sigma <= 0:
        raise ParameterError(f"low-pass sigma must be positive and finite, got {sigma}")
    u0, u1 = _grid_coords(grid)
    taps = sigma ** 2 / (2 * np.pi) * np.exp(-(sigma ** 2) * (u0 ** 2 + u1 ** 2) / 2)
    return Filter(taps.astype(complex), LOW_PASS, float(sigma))


def build_bank(L: int, block_layer: str = "first", grid: Optional[int] = None) -> FilterBank:
    """Build the filter bank used by one layer of a two-layer block.

    Parameters
    ----------
    L : int
        Number of band-pass orientations; angles are ``pi * l / L`` for
        ``l = 1..L``.
    block_layer : {"first", "second"}
        Selects the band-pass design for the first layer of a block
        (``gamma = 0``) or the intermediate-scale second layer.
    grid : int, optional
        Odd filter grid size.  Defaults to the size at which the slowest
        decaying envelope of the bank has fallen below ``1e-4``.
    """
    if int(L) != L or L < 1:
        raise ParameterError(f"L must be a positive integer, got {L}")
    if block_layer == "first":
        mother = MorletParams.first_layer(0.0)
    elif block_layer == "second":
        mother = MorletParams.second_layer()
    else:
        raise ParameterError(f"block_layer must be 'first' or 'second', got {block_layer!r}")

    lp_sigma = FIRST_SIGMA * 2.0 ** (-LOWPASS_GAMMA)
    if grid is None:
        grid = max(default_grid(mother.sigma, mother.slant), default_grid(lp_sigma))
    low = build_gaussian_lowpass(lp_sigma, grid)
    band = [build_morlet(mother.rotated(np.pi * l / L), grid) for l in range(1, L + 1)]
    return FilterBank(low, band)


def periodize(taps: np.ndarray, shape) -> np.ndarray:
    """Fold centred taps onto an ``H x W`` torus with the origin at index ``(0, 0)``."""
    H, W = shape
    N = taps.shape[0]
    half = (N - 1) // 2
    idx = np.arange(-half, half + 1)
    kernel = np.zeros((H, W), dtype=complex)
    rows = (idx % H)[:, None]
    cols = (idx % W)[None, :]
    np.add.at(kernel, (np.broadcast_to(rows, taps.shape), np.broadcast_to(cols, taps.shape)), taps)
    return kernel


def spectral_stats(filt: Filter, pad: Optional[int] = None) -> SpectralStats:
    """Centre frequency and bandwidth of a filter's normalized power spectrum.

    The two moment integrals are evaluated as Riemann sums over the DFT of
    the unit-norm taps zero-padded to ``pad`` points per axis (default: the
    smallest odd size ``>= 4 N``; odd sizes keep the frequency grid
    symmetric).  The power spectrum is ``2 pi``-periodic, so the integrals
    may be taken over any period cell without invalidating the translation
    bound; the cell used here is ``[-pi, pi)^2`` shifted to be centred on the
    spectral peak.  For filters peaked at zero frequency this is exactly
    ``[-pi, pi)^2``; for high-frequency Morlets it avoids splitting the main
    lobe across the cell boundary.
    """
    psi = filt.normalized().taps
    N = psi.shape[0]
    M = (4 * N) | 1 if pad is None else int(pad)
    if M < N:
        raise GridError(f"pad {M} smaller than filter grid {N}")
    power = np.abs(np.fft.fft2(psi, s=(M, M))) ** 2 / M ** 2
    w = 2 * np.pi * np.fft.fftfreq(M)
    peak = np.unravel_index(np.argmax(power), power.shape)
    w0 = _wrap_around(w, w[peak[0]])[:, None]
    w1 = _wrap_around(w, w[peak[1]])[None, :]
    xi0 = float(np.sum(w0 * power))
    xi1 = float(np.sum(w1 * power))
    var = float(np.sum(((w0 - xi0) ** 2 + (w1 - xi1) ** 2) * power))
    return SpectralStats((xi0, xi1), math.sqrt(max(var, 0.0)))


def _wrap_around(w, center):
    return center + (w - center + np.pi) % (2 * np.pi) - np.pi

"""Periodic convolution, translation, subsampling and the wavelet operator.

Feature maps are plain ``numpy`` arrays whose last three axes are
``(channel, row, col)``; any leading axes are batch axes.  Real inputs are
lifted to complex with zero imaginary part.
"""

from __future__ import annotations

import numpy as np
import scipy.fft

from .exceptions import DomainError, ParameterError, SizeError
from .filterbank import Filter, FilterBank, periodize

# Filters with more taps than this go through the FFT path.
FFT_AREA_THRESHOLD = 49


# Batched 2-D transforms split across cores.  Each transform runs on one
# thread, so results do not depend on the worker count; complex64 input
# stays in single precision.
def _fft2(x):
    return scipy.fft.fft2(x, workers=-1)


def _ifft2(x):
    return scipy.fft.ifft2(x, workers=-1)


def as_feature_map(x) -> np.ndarray:
    """Validate ``x`` as a ``(..., C, H, W)`` array of finite samples, lifted to complex."""
    x = np.asarray(x)
    if x.ndim < 3:
        raise SizeError(f"feature map needs (channel, row, col) axes, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise DomainError("feature map contains non-finite samples")
    if not np.iscomplexobj(x):
        x = x.astype(np.complex64 if x.dtype == np.float32 else np.complex128)
    return x


def _taps(f):
    return f.taps if isinstance(f, Filter) else np.asarray(f)


def conv2d_periodic(x, f, method: str = "auto") -> np.ndarray:
    """Circular convolution of every channel of ``x`` with one centred filter.

    ``out(u) = sum_v f(v) x(u - v)`` with indices taken modulo the image size.

    Parameters
    ----------
    x : array_like, shape (..., H, W)
    f : Filter or array_like of shape (N, N), N odd
    method : {"auto", "fft", "direct"}
        ``auto`` uses the FFT when the filter has more than 49 taps.
    """
    x = np.asarray(x)
    taps = _taps(f)
    N = taps.shape[0]
    H, W = x.shape[-2:]
    if taps.ndim != 2 or taps.shape[1] != N or N % 2 == 0:
        raise SizeError(f"filter taps must be a centred odd square, got {taps.shape}")
    if N > H or N > W:
        raise SizeError(f"filter grid {N} larger than image {H}x{W}")
    if method == "auto":
        method = "fft" if N * N > FFT_AREA_THRESHOLD else "direct"
    if method == "fft":
        kernel = np.fft.fft2(periodize(taps, (H, W)))
        return _ifft2(_fft2(x) * kernel)
    if method == "direct":
        half = (N - 1) // 2
        out = np.zeros(x.shape, dtype=np.result_type(x, taps, np.complex128))
        for i in range(N):
            for j in range(N):
                if taps[i, j] != 0:
                    out += taps[i, j] * np.roll(x, (i - half, j - half), axis=(-2, -1))
        return out
    raise ParameterError(f"unknown convolution method {method!r}")


def conv2d_direct_sum(x, taps) -> np.ndarray:
    """Reference O(n^2 k^2) circular convolution written as an explicit loop."""
    x = np.asarray(x)
    taps = np.asarray(taps)
    H, W = x.shape[-2:]
    N = taps.shape[0]
    half = (N - 1) // 2
    out = np.zeros(x.shape, dtype=complex)
    for r in range(H):
        for c in range(W):
            acc = np.zeros(x.shape[:-2], dtype=complex)
            for i in range(N):
                for j in range(N):
                    acc = acc + taps[i, j] * x[..., (r - (i - half)) % H, (c - (j - half)) % W]
            out[..., r, c] = acc
    return out


def translate(x, tau) -> np.ndarray:
    """Circular shift ``x_tau(u) = x(u - tau)`` over the last two axes."""
    t0, t1 = (int(t) for t in tau)
    return np.roll(x, (t0, t1), axis=(-2, -1))


def subsample2(x) -> np.ndarray:
    """Keep the samples at even (row, col) positions."""
    H, W = x.shape[-2:]
    if H % 2 or W % 2:
        raise SizeError(f"cannot subsample odd spatial size {H}x{W}")
    return x[..., ::2, ::2]


def upsample2_adjoint(g) -> np.ndarray:
    """Adjoint of :func:`subsample2`: place samples at even positions, zeros elsewhere."""
    out = np.zeros(g.shape[:-2] + (2 * g.shape[-2], 2 * g.shape[-1]), dtype=g.dtype)
    out[..., ::2, ::2] = g
    return out


def bank_output_shape(shape, L, do_subsample):
    *lead, C, H, W = shape
    if do_subsample:
        if H % 2 or W % 2:
            raise SizeError(f"cannot subsample odd spatial size {H}x{W}")
        H, W = H // 2, W // 2
    return (*lead, (L + 1) * C, H, W)


def _spectra_like(bank, shape, x):
    spectra = bank.spectra(shape)
    if x.dtype in (np.float32, np.complex64):
        return spectra.astype(np.complex64)
    return spectra


def apply_bank(x, bank: FilterBank, do_subsample: bool = True) -> np.ndarray:
    """Wavelet operator ``W x(u, l) = x * g_l(2u)`` applied to every channel.

    Output channels are ordered input-channel-major, then ``l = 0..L``.
    Filters wider than the image wrap around the torus.  Subsampling is done
    in the Fourier domain by summing the four spectral aliases, which equals
    keeping the even-indexed samples of the full-resolution convolution.
    """
    x = np.asarray(x)
    if x.ndim < 3:
        raise SizeError(f"apply_bank expects (..., C, H, W), got {x.shape}")
    *lead, C, H, W = x.shape
    out_shape = bank_output_shape(x.shape, bank.L, do_subsample)
    spectra = _spectra_like(bank, (H, W), x)
    Y = _fft2(x)[..., :, None, :, :] * spectra
    if do_subsample:
        Y = Y.reshape(*Y.shape[:-2], 2, H // 2, 2, W // 2).sum(axis=(-4, -2)) / 4
    y = _ifft2(Y)
    return y.reshape(out_shape)


def adjoint_bank(g, bank: FilterBank, do_subsample: bool = True) -> np.ndarray:
    """Hermitian adjoint of :func:`apply_bank`.

    ``Re<apply_bank(x), g> = Re<x, adjoint_bank(g)>`` for all ``x`` and ``g``,
    so this is also the backward pass under the real-pair gradient convention.
    """
    g = np.asarray(g)
    *lead, CL, h, w = g.shape
    L1 = bank.L + 1
    if CL % L1:
        raise SizeError(f"{CL} channels is not a multiple of L+1={L1}")
    C = CL // L1
    H, W = (2 * h, 2 * w) if do_subsample else (h, w)
    G = _fft2(g.reshape(*lead, C, L1, h, w))
    if do_subsample:
        # zero-insertion upsampling tiles the spectrum
        G = np.tile(G, (2, 2))
    spectra = _spectra_like(bank, (H, W), g)
    X = np.sum(G * np.conj(spectra), axis=-3)
    return _ifft2(X)

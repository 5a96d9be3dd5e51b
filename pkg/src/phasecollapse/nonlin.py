"""Pointwise complex nonlinearities and their real-pair derivatives.

Phase collapse is the complex modulus.  Amplitude reductions keep the phase
and shrink the magnitude, ``rho(z) = exp(i arg z) f(|z|)``.

Gradients follow the real-pair convention: for a loss ``L`` the gradient
with respect to a complex array ``z`` is ``dL/dRe(z) + 1j * dL/dIm(z)``.
With that convention a phase-preserving map with radial profile ``f`` has
backward pass

    g_z = f'(r) Re(conj(G) e) e + f(r)/r (G - Re(conj(G) e) e),   e = z / |z|

i.e. the radial part of the upstream gradient ``G`` is scaled by ``f'`` and
the tangential part by ``f(r)/r``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import DomainError, ParameterError
from .filterbank import periodize
from .tensor_ops import conv2d_periodic

KINDS = ("modulus", "soft_threshold", "atanh", "asigmoid", "asign", "identity")

DEFAULT_THRESHOLD = 0.1
DEFAULT_SIGMOID_A = 1.0
DEFAULT_SIGMOID_B = 0.0


@dataclass
class NonlinSpec:
    """A nonlinearity kind plus its per-channel learnable parameters.

    ``b`` is the threshold (soft_threshold) or offset (asigmoid) and ``a`` the
    sigmoid slope; both are ``None`` for kinds that do not use them.
    """

    kind: str
    a: np.ndarray = field(default=None, repr=False)
    b: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParameterError(f"unknown nonlinearity {self.kind!r}; expected one of {KINDS}")

    @classmethod
    def init(cls, kind, channels):
        """Default initialisation: thresholds 0.1, sigmoid ``(a, b) = (1, 0)``."""
        if kind == "soft_threshold":
            return cls(kind, b=np.full(channels, DEFAULT_THRESHOLD))
        if kind == "asigmoid":
            return cls(kind, a=np.full(channels, DEFAULT_SIGMOID_A), b=np.full(channels, DEFAULT_SIGMOID_B))
        return cls(kind)

    @property
    def params(self) -> dict:
        return {k: v for k, v in (("a", self.a), ("b", self.b)) if v is not None}

    def project(self):
        """Restore constraints after an optimizer step."""
        if self.kind == "soft_threshold":
            np.maximum(self.b, 0.0, out=self.b)

    def __call__(self, z):
        return apply(self, z)


def _channel(p, z):
    # broadcast a per-channel vector over (..., C, H, W)
    p = np.asarray(p, dtype=float)
    return p[:, None, None] if p.ndim == 1 and z.ndim >= 3 else p


def _unit(z):
    r = np.abs(z)
    e = np.zeros(np.shape(z), np.result_type(z, np.complex64))
    normal = r >= np.finfo(r.dtype).tiny
    np.divide(z, r, out=e, where=normal)
    small = ~normal & (r > 0)
    if np.any(small):
        # divide subnormal inputs by their larger component first so the
        # phase factor still has unit modulus
        zs = np.asarray(z)[small]
        m = np.maximum(np.abs(zs.real), np.abs(zs.imag))
        zs = zs.real / m + 1j * (zs.imag / m)
        e[small] = zs / np.abs(zs)
    return r, e


def modulus(z):
    """Complex modulus returned with the input's complex dtype (zero phase)."""
    z = np.asarray(z)
    return np.abs(z).astype(z.dtype) if np.iscomplexobj(z) else np.abs(z)


def soft_threshold(z, b):
    """``ReLU(|z| - b) exp(i arg z)``, the proximal operator of ``b |.|``."""
    z = np.asarray(z)
    b = np.asarray(b)
    if np.any(b < 0):
        raise ParameterError("soft-threshold b must be nonnegative")
    r, e = _unit(z)
    return np.maximum(r - b, 0) * e


def _sigmoid_amplitude(r, a, b):
    with np.errstate(divide="ignore"):
        logr = np.log(np.where(r > 0, r, 1.0))
    s = 0.5 * (1 + np.tanh((a * logr + b) / 2))  # overflow-free logistic
    return np.where(r > 0, s, 0.0), logr, s


def amplitude_nonlin(z, kind, a=DEFAULT_SIGMOID_A, b=DEFAULT_SIGMOID_B):
    """Phase-preserving amplitude reduction ``exp(i arg z) f(|z|)``.

    ``kind`` is one of ``atanh`` (``tanh r``), ``asigmoid``
    (``1 / (1 + exp(-a log r - b))``, defined as 0 at ``r = 0``) or ``asign``
    (``r / (1 + r)``).
    """
    z = np.asarray(z)
    r, e = _unit(z)
    if kind == "atanh":
        f = np.tanh(r)
    elif kind == "asign":
        f = r / (1 + r)
    elif kind == "asigmoid":
        f = _sigmoid_amplitude(r, a, b)[0]
    else:
        raise ParameterError(f"{kind!r} is not an amplitude nonlinearity")
    return f * e


def apply(spec: NonlinSpec, z):
    """Forward pass of ``spec`` on ``z`` with per-channel parameters broadcast over ``(C, H, W)``."""
    kind = spec.kind
    if kind == "identity":
        return z
    if kind == "modulus":
        return modulus(z)
    if kind == "soft_threshold":
        return soft_threshold(z, _channel(spec.b, z)).astype(z.dtype, copy=False)
    a = _channel(spec.a, z) if spec.a is not None else DEFAULT_SIGMOID_A
    b = _channel(spec.b, z) if spec.b is not None else DEFAULT_SIGMOID_B
    return amplitude_nonlin(z, kind, a, b).astype(z.dtype, copy=False)


def backward(spec: NonlinSpec, z, grad_out):
    """Gradient with respect to ``z`` and to the per-channel parameters.

    Returns ``(grad_z, grads)`` where ``grads`` maps ``"a"``/``"b"`` to arrays
    of the parameter's shape, summed over batch and spatial axes.
    """
    kind = spec.kind
    G = grad_out
    if kind == "identity":
        return G, {}
    r, e = _unit(z)
    radial = np.real(np.conj(G) * e)
    if kind == "modulus":
        # gradient at z = 0 is 0 because e = 0 there
        return (np.real(G) * e).astype(z.dtype, copy=False), {}

    grads = {}
    reduce_axes = tuple(i for i in range(z.ndim) if i != z.ndim - 3)
    safe_r = np.where(r > 0, r, 1.0)
    if kind == "soft_threshold":
        b = _channel(spec.b, z)
        active = r > b
        fprime = active.astype(float)
        f_over_r = np.where(active, (r - b) / safe_r, 0.0)
        grads["b"] = -np.sum(np.where(active, radial, 0.0), axis=reduce_axes)
    elif kind == "atanh":
        t = np.tanh(r)
        fprime = 1 - t ** 2
        f_over_r = np.where(r > 0, t / safe_r, 1.0)
    elif kind == "asign":
        fprime = 1 / (1 + r) ** 2
        f_over_r = 1 / (1 + r)
    elif kind == "asigmoid":
        a = _channel(spec.a, z)
        b = _channel(spec.b, z)
        f, logr, s = _sigmoid_amplitude(r, a, b)
        ds = np.where(r > 0, s * (1 - s), 0.0)
        fprime = ds * a / safe_r
        f_over_r = np.where(r > 0, f / safe_r, 0.0)
        grads["a"] = np.sum(radial * ds * logr, axis=reduce_axes)
        grads["b"] = np.sum(radial * ds, axis=reduce_axes)
    else:
        raise ParameterError(f"unknown nonlinearity {kind!r}")

    tangential = G - radial * e
    grad_z = fprime * radial * e + f_over_r * tangential
    return grad_z.astype(z.dtype, copy=False), grads


def relu_phase_filter(x, f, alpha):
    """``ReLU(x * Re(exp(-i alpha) psi))`` for a real image ``x``.

    The real filter ``Re(exp(-i alpha) psi)`` is one member of the family of
    phase-shifted real filters that a real CNN can hold for one complex
    filter ``psi``.
    """
    x = np.asarray(x)
    if np.iscomplexobj(x):
        raise DomainError("relu_phase_filter requires a real input")
    taps = f.taps if hasattr(f, "taps") else np.asarray(f)
    real_taps = np.real(np.exp(-1j * alpha) * taps)
    return np.maximum(np.real(conv2d_periodic(x, real_taps)), 0.0)


def four_phase_angles():
    return (-np.pi / 2, 0.0, np.pi / 2, np.pi)


def modulus_from_relus(x, f, n_phases=4, mode="quadrature"):
    """Rebuild ``|x * psi|`` from rectified real filter responses.

    ``mode="quadrature"`` evaluates ``(pi / n) sum_k ReLU(x * psi_{alpha_k})``
    with ``alpha_k = -pi + 2 pi k / n``, a Riemann sum of half the integral
    over all phases, which converges to the modulus.  ``mode="four"`` returns
    the four-phase sum over ``alpha in {-pi/2, 0, pi/2, pi}`` which lies
    between ``|x * psi|`` and ``sqrt(2) |x * psi|``.
    """
    x = np.asarray(x)
    if np.iscomplexobj(x):
        raise DomainError("modulus_from_relus requires a real input")
    if mode == "four":
        alphas = four_phase_angles()
        weight = 1.0
    elif mode == "quadrature":
        if int(n_phases) != n_phases or n_phases < 2:
            raise ParameterError(f"n_phases must be an integer >= 2, got {n_phases}")
        alphas = -np.pi + 2 * np.pi * np.arange(n_phases) / n_phases
        weight = np.pi / n_phases
    else:
        raise ParameterError(f"unknown mode {mode!r}")

    taps = f.taps if hasattr(f, "taps") else np.asarray(f)
    H, W = x.shape[-2:]
    X = np.fft.fft2(x)
    K = np.fft.fft2(periodize(taps, (H, W)))
    Kc = np.fft.fft2(periodize(np.conj(taps), (H, W)))
    total = np.zeros(x.shape)
    for alpha in alphas:
        # spectrum of the real filter Re(exp(-i alpha) psi)
        spec = 0.5 * (np.exp(-1j * alpha) * K + np.exp(1j * alpha) * Kc)
        total += np.maximum(np.real(np.fft.ifft2(X * spec)), 0.0)
    return weight * total

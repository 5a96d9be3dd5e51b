"""Scattering and Learned Scattering forward passes with cached backward.

A Learned Scattering of depth ``J`` computes, for ``j = 0 .. J-1``::

    x_{j+1} = rho(W P_j x_j)              (no skip)
    x_{j+1} = [rho(W P_j x_j), W P_j x_j] (skip)

with ``P_0 = Id``.  Every learned ``P_j`` (``1 <= j <= J``) is preceded by a
per-channel complex standardization and followed by a divisive
normalization across channels.  ``P_J`` reduces the dimension of ``x_J``
before the classifier.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import nonlin as nl
from ._seeding import rng_stream
from .exceptions import ConfigError, SizeError
from .filterbank import FilterBank, build_bank
from .tensor_ops import adjoint_bank, apply_bank, as_feature_map

EPS = 1e-5
MOMENTUM = 0.1

CIFAR_WIDTHS = (64, 128, 256, 512, 512, 512, 512, 512)
IMAGENET_WIDTHS = (32, 64, 64, 128, 256, 512, 512, 512, 512, 512, 256)


@dataclass(frozen=True)
class LayerSpec:
    """One wavelet layer ``x_{j+1} = rho(W P_j x_j)``.

    ``out_channels`` is the width ``c_j`` of ``P_j`` (the input width for
    ``j = 0`` where ``P_0 = Id``).
    """

    out_channels: int
    bank_variant: str
    do_subsample: bool
    nonlin: str
    skip: bool


@dataclass
class NetworkConfig:
    """Architecture of a (learned) scattering network.

    ``widths`` lists ``c_1 .. c_J``; its last entry is the width of the final
    projector ``P_J``.  ``learned=False`` gives a plain scattering transform
    (no projectors, no normalization, modulus only).
    """

    depth: int = 6
    widths: tuple = (32, 64, 128, 256, 256, 256)
    L: int = 4
    nonlin: str = "modulus"
    skip: bool = False
    subsample_period: int = 2
    seed: int = 0
    learned: bool = True
    in_channels: int = 3
    image_size: int = 32
    grid: Optional[int] = None

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.L < 1:
            raise ConfigError(f"L must be >= 1, got {self.L}")
        if self.subsample_period < 1:
            raise ConfigError("subsample_period must be >= 1")
        if self.nonlin not in nl.KINDS:
            raise ConfigError(f"unknown nonlinearity {self.nonlin!r}")
        if self.learned:
            if len(self.widths) != self.depth:
                raise ConfigError(f"expected {self.depth} widths, got {len(self.widths)}")
            for j, w in enumerate(self.widths, start=1):
                if w < 1:
                    raise ConfigError(f"width must be >= 1, got {w}", layer=j)
        elif self.nonlin != "modulus" or self.skip:
            raise ConfigError("plain scattering uses the modulus without skip connections")

    @classmethod
    def cifar(cls, **kw):
        """Full CIFAR-10 architecture: ``J = 8``, widths up to 512, ``L = 4``."""
        return cls(depth=8, widths=CIFAR_WIDTHS, L=4, **kw)

    @classmethod
    def desk(cls, **kw):
        """Desk-scale CIFAR architecture: halved widths, depth capped at 6."""
        return cls(depth=6, widths=tuple(w // 2 for w in CIFAR_WIDTHS[:6]), L=4, **kw)

    @classmethod
    def plain(cls, depth, L=4, **kw):
        return cls(depth=depth, widths=(), L=L, learned=False, **kw)

    def layer_specs(self) -> list:
        specs = []
        for j in range(self.depth):
            width = self.in_channels if j == 0 or not self.learned else self.widths[j - 1]
            specs.append(LayerSpec(
                out_channels=width,
                bank_variant="first" if j % self.subsample_period == 0 else "second",
                do_subsample=(j + 1) % self.subsample_period == 0,
                nonlin=self.nonlin,
                skip=self.skip,
            ))
        return specs

    def filter_grid(self) -> Optional[int]:
        if self.grid is not None:
            return self.grid
        return 15 if self.image_size == 32 else None

    def output_shape(self) -> tuple:
        """``(C, H, W)`` of the network output, from closed-form shape arithmetic."""
        C, H = self.in_channels, self.image_size
        for j, spec in enumerate(self.layer_specs()):
            c = C if j == 0 or not self.learned else spec.out_channels
            C = (self.L + 1) * c * (2 if spec.skip else 1)
            if spec.do_subsample:
                if H % 2:
                    raise SizeError(f"spatial size {H} exhausted at layer {j}")
                H //= 2
        if self.learned:
            C = self.widths[-1]
        return (C, H, H)


def standardize(x, mean=None, var=None, eps=EPS):
    """Per-channel complex standardization over all non-channel axes.

    Removes the complex mean and divides by the root mean squared modulus of
    the centred samples, with the variance floored at ``eps``.  When ``mean``
    and ``var`` are given they are used instead of the batch statistics.

    Returns ``(out, mean, var)``.
    """
    axes = tuple(i for i in range(x.ndim) if i != x.ndim - 3)
    if mean is None:
        mean = x.mean(axis=axes)
        centred = x - mean[:, None, None]
        var = np.mean(np.abs(centred) ** 2, axis=axes)
    else:
        centred = x - np.asarray(mean)[:, None, None]
    scale = np.sqrt(np.maximum(var, eps))
    return centred / scale[:, None, None].astype(x.real.dtype), mean, var


def standardize_backward(grad_out, out, var, eps=EPS):
    """Backward through :func:`standardize` with batch statistics.

    The mean and variance are treated as functions of the batch, as in batch
    normalization.  Channels whose variance hit the floor have a constant
    scale.
    """
    axes = tuple(i for i in range(out.ndim) if i != out.ndim - 3)
    scale = np.sqrt(np.maximum(var, eps))[:, None, None]
    G = grad_out
    mean_G = G.mean(axis=axes, keepdims=True)
    proj = np.mean(np.real(np.conj(G) * out), axis=axes, keepdims=True)
    live = (var > eps)[:, None, None]
    g = (G - mean_G - np.where(live, proj * out, 0)) / scale
    return g.astype(out.dtype, copy=False)


def divisive_normalize(x, eps=EPS):
    """Scale every spatial position's channel vector to unit norm.

    Columns with norm below ``eps`` are divided by ``eps`` instead, so zero
    columns stay zero.  Returns ``(out, norm)``.
    """
    norm = np.sqrt(np.sum(np.abs(x) ** 2, axis=-3, keepdims=True))
    return x / np.maximum(norm, eps), norm


def divisive_normalize_backward(grad_out, out, norm, eps=EPS):
    G = grad_out
    live = norm > eps
    radial = np.sum(np.real(np.conj(out) * G), axis=-3, keepdims=True)
    g = np.where(live, G - radial * out, G) / np.maximum(norm, eps)
    return g.astype(out.dtype, copy=False)


def update_running(running, mean, var, seeded):
    """EMA update of ``[mean, var]`` in place; an unseeded pair is overwritten.

    Overwriting on the first batch keeps the arbitrary initial values from
    dominating short runs, where ``(1 - MOMENTUM)**steps`` is still large.
    """
    if seeded:
        running[0] = (1 - MOMENTUM) * running[0] + MOMENTUM * mean
        running[1] = (1 - MOMENTUM) * running[1] + MOMENTUM * var
    else:
        running[0] = np.array(mean, dtype=np.result_type(running[0], mean))
        running[1] = np.array(var, dtype=float)


def _channels_first(x):
    # (B, C, H, W) -> (C, B*H*W) so a projection is one matrix product
    B, C = x.shape[0], x.shape[1]
    return x.reshape(B, C, -1).transpose(1, 0, 2).reshape(C, -1)


def _channels_back(m, shape):
    B, _, H, W = shape
    return m.reshape(m.shape[0], B, H * W).transpose(1, 0, 2).reshape(B, m.shape[0], H, W)


def project(P, x):
    """Apply a complex 1x1 convolution ``P`` (``c_out x c_in``) across channels."""
    *lead, C, H, W = x.shape
    if P.shape[1] != C:
        raise SizeError(f"projector expects {P.shape[1]} channels, got {C}")
    P = P.astype(x.dtype, copy=False)
    if x.ndim != 4:
        return np.matmul(P, x.reshape(*lead, C, H * W)).reshape(*lead, P.shape[0], H, W)
    return _channels_back(P @ _channels_first(x), (x.shape[0], P.shape[0], H, W))


def project_backward(P, x, grad_out):
    """Gradients of :func:`project` with respect to ``P`` and ``x``."""
    *lead, C, H, W = x.shape
    O = P.shape[0]
    G2 = _channels_first(grad_out.reshape(-1, O, H, W))
    X2 = _channels_first(x.reshape(-1, C, H, W))
    grad_P = G2 @ np.conj(X2).T
    grad_x = np.conj(P.T).astype(x.dtype, copy=False) @ G2
    return grad_P, _channels_back(grad_x, (G2.shape[1] // (H * W), C, H, W)).reshape(x.shape)


def make_banks(config: NetworkConfig) -> list:
    grid = config.filter_grid()
    cache = {}
    banks = []
    for spec in config.layer_specs():
        if spec.bank_variant not in cache:
            cache[spec.bank_variant] = build_bank(config.L, spec.bank_variant, grid)
        banks.append(cache[spec.bank_variant])
    return banks


def forward_plain(x, banks, J: int, subsample=True) -> np.ndarray:
    """Scattering cascade ``x_{j+1} = |W x_j|`` for ``J`` layers.

    ``banks`` is one :class:`FilterBank` or a list with one bank per layer;
    ``subsample`` is a flag or a per-layer list of flags.
    """
    if isinstance(banks, FilterBank):
        banks = [banks] * J
    if isinstance(subsample, bool):
        subsample = [subsample] * J
    if len(banks) < J or len(subsample) < J:
        raise ConfigError(f"need {J} banks and subsample flags")
    x = as_feature_map(x)
    for j in range(J):
        H, W = x.shape[-2:]
        if subsample[j] and (H % 2 or W % 2 or H < 2):
            raise SizeError(f"spatial size {H}x{W} exhausted at layer {j}")
        x = nl.modulus(apply_bank(x, banks[j], subsample[j]))
    return x


@dataclass
class LayerCache:
    std: tuple = None
    proj_in: np.ndarray = None
    norm: tuple = None
    pre: np.ndarray = None


class ScatteringNetwork:
    """Weights, filters and running statistics of a (learned) scattering network.

    Parameters are exposed through :meth:`parameters` as a flat dict of
    arrays that the optimizer updates in place: ``"P{j}"`` for the complex
    projectors ``P_1 .. P_J`` and ``"rho{j}.a"`` / ``"rho{j}.b"`` for the
    per-channel nonlinearity parameters.
    """

    def __init__(self, config: NetworkConfig, dtype=np.complex128):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.specs = config.layer_specs()
        self.banks = make_banks(config)
        self.projectors = []
        self.nonlins = []
        self.running = []
        rng = rng_stream(config.seed, "projectors")
        C = config.in_channels
        for j, spec in enumerate(self.specs):
            c = C
            if j > 0 and config.learned:
                c = spec.out_channels
                self.projectors.append(self._init_projector(rng, c, C))
                self.running.append([np.zeros(C, complex), np.ones(C)])
            wave_channels = (config.L + 1) * c
            self.nonlins.append(nl.NonlinSpec.init(spec.nonlin, wave_channels))
            C = wave_channels * (2 if spec.skip else 1)
        if config.learned:
            self.projectors.append(self._init_projector(rng, config.widths[-1], C))
            self.running.append([np.zeros(C, complex), np.ones(C)])
        self.out_channels = config.widths[-1] if config.learned else C
        self.stat_updates = 0

    @staticmethod
    def _init_projector(rng, c_out, c_in):
        std = np.sqrt(1.0 / (2 * c_in))
        return rng.normal(0, std, (c_out, c_in)) + 1j * rng.normal(0, std, (c_out, c_in))

    @property
    def is_fixed(self) -> bool:
        return not self.parameters()

    def parameters(self) -> dict:
        params = {f"P{j + 1}": P for j, P in enumerate(self.projectors)}
        for j, spec in enumerate(self.nonlins):
            for name, value in spec.params.items():
                params[f"rho{j}.{name}"] = value
        return params

    def project_constraints(self):
        for spec in self.nonlins:
            spec.project()

    def check_shapes(self):
        """Raise :class:`ConfigError` naming the first layer whose channel counts disagree."""
        C = self.config.in_channels
        k = 0
        for j, spec in enumerate(self.specs):
            c = C
            if j > 0 and self.config.learned:
                P = self.projectors[k]
                if P.shape[1] != C:
                    raise ConfigError(f"P_{j} expects {P.shape[1]} input channels, layer provides {C}", layer=j)
                c = P.shape[0]
                k += 1
            C = (self.config.L + 1) * c * (2 if spec.skip else 1)
        if self.config.learned and self.projectors[k].shape[1] != C:
            raise ConfigError(f"P_J expects {self.projectors[k].shape[1]} channels, got {C}", layer=len(self.specs))

    def _standardize(self, idx, x, training, cache):
        stats = self.running[idx]
        if training:
            out, mean, var = standardize(x)
            update_running(stats, mean, var, self.stat_updates > 0)
            cache.std = (out, var)
        else:
            out, _, _ = standardize(x, stats[0], stats[1])
            cache.std = None
        return out

    def _learned_block(self, idx, x, training, cache):
        x = self._standardize(idx, x, training, cache)
        cache.proj_in = x
        p = project(self.projectors[idx], x)
        out, norm = divisive_normalize(p)
        cache.norm = (out, norm)
        return out

    def forward(self, x, training: bool = False):
        """Return the network output and a list of per-layer caches for :meth:`backward`.

        In training mode standardizations use (and update) batch statistics.
        """
        self.check_shapes()
        x = as_feature_map(x).astype(self.dtype, copy=False)
        caches = []
        k = 0
        for j, (spec, bank) in enumerate(zip(self.specs, self.banks)):
            cache = LayerCache()
            if j > 0 and self.config.learned:
                x = self._learned_block(k, x, training, cache)
                k += 1
            H, W = x.shape[-2:]
            if spec.do_subsample and (H % 2 or W % 2):
                raise SizeError(f"spatial size {H}x{W} exhausted at layer {j}")
            y = apply_bank(x, bank, spec.do_subsample)
            cache.pre = y
            out = nl.apply(self.nonlins[j], y)
            x = np.concatenate([out, y], axis=-3) if spec.skip else out
            caches.append(cache)
        if self.config.learned:
            cache = LayerCache()
            x = self._learned_block(k, x, training, cache)
            caches.append(cache)
        if training and self.running:
            self.stat_updates += 1
        return x, caches

    def _learned_backward(self, idx, G, cache, grads):
        out, norm = cache.norm
        G = divisive_normalize_backward(G, out, norm)
        grad_P, G = project_backward(self.projectors[idx], cache.proj_in, G)
        grads[f"P{idx + 1}"] = grad_P
        if cache.std is None:
            raise RuntimeError("backward requires a forward pass in training mode")
        s_out, var = cache.std
        return standardize_backward(G, s_out, var)

    def backward(self, caches, grad_out) -> tuple:
        """Reverse-mode pass; returns ``(grad_input, grads)`` keyed like :meth:`parameters`."""
        grads = {}
        G = grad_out
        k = len(self.projectors) - 1
        if self.config.learned:
            G = self._learned_backward(k, G, caches[-1], grads)
            k -= 1
        for j in range(len(self.specs) - 1, -1, -1):
            spec, cache = self.specs[j], caches[j]
            y = cache.pre
            if spec.skip:
                half = y.shape[-3]
                G_rho, G_raw = G[..., :half, :, :], G[..., half:, :, :]
            else:
                G_rho, G_raw = G, 0
            G_y, pgrads = nl.backward(self.nonlins[j], y, G_rho)
            G_y = G_y + G_raw
            for name, value in pgrads.items():
                grads[f"rho{j}.{name}"] = value
            G = adjoint_bank(G_y, self.banks[j], spec.do_subsample)
            if j > 0 and self.config.learned:
                G = self._learned_backward(k, G, cache, grads)
                k -= 1
        return G, grads

    def state_arrays(self) -> dict:
        """All arrays needed to restore the network (parameters and running statistics)."""
        arrays = {k: np.asarray(v) for k, v in self.parameters().items()}
        for i, (mean, var) in enumerate(self.running):
            arrays[f"running{i}.mean"] = mean
            arrays[f"running{i}.var"] = var
        if self.running:
            arrays["stat_updates"] = np.array([float(self.stat_updates)])
        return arrays

    def load_state_arrays(self, arrays: dict):
        for name, value in self.parameters().items():
            if name not in arrays:
                raise ConfigError(f"missing array {name!r} in saved state")
            if arrays[name].shape != value.shape:
                raise ConfigError(f"array {name!r} has shape {arrays[name].shape}, expected {value.shape}")
            value[...] = arrays[name]
        for i, stats in enumerate(self.running):
            stats[0] = np.array(arrays[f"running{i}.mean"], dtype=complex)
            stats[1] = np.array(np.real(arrays[f"running{i}.var"]), dtype=float)
        self.stat_updates = int(np.real(arrays.get("stat_updates", [1])[0]))


def forward_learned(x, network: ScatteringNetwork) -> np.ndarray:
    """Evaluation-mode output of a Learned Scattering (features after ``P_J``)."""
    return network.forward(x, training=False)[0]

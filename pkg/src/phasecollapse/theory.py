"""Numerical checks of the phase-collapse identities and bounds.

Every check is seeded, returns a :class:`TheoremReport` and never raises on
a failed inequality: a failure is recorded as ``violations > 0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import digamma

from ._seeding import rng_stream
from .exceptions import DegenerateInputError, ParameterError
from .filterbank import Filter, periodize, spectral_stats
from .nonlin import modulus_from_relus, soft_threshold
from .tensor_ops import translate

SQRT_PI_OVER_2 = math.sqrt(math.pi) / 2
LOG_2PI = math.log(2 * math.pi)


@dataclass
class TheoremReport:
    """Outcome of one numerical check.

    ``worst_slack`` is the smallest ``bound - observed`` over all trials (or
    the analogous signed margin); it is negative exactly when some trial
    violated the bound beyond tolerance.
    """

    name: str
    trials: int
    violations: int
    worst_slack: float
    params: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.violations == 0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{self.name:<32} {status}  trials={self.trials:<8d} violations={self.violations:<6d} worst_slack={self.worst_slack:+.3e}"

    def csv_row(self):
        return [self.name, self.trials, self.violations, f"{self.worst_slack:.6e}", int(self.passed)]


CSV_HEADER = ("name", "trials", "violations", "worst_slack", "pass")


def _circular_conv(x, taps):
    H, W = x.shape[-2:]
    return np.fft.ifft2(np.fft.fft2(x) * np.fft.fft2(periodize(taps, (H, W))))


# ---------------------------------------------------------------------------
# Fourier shift


def check_fourier_shift(x, tau, tol=1e-10) -> TheoremReport:
    """DFT of a circular translate equals the DFT times ``exp(-i omega . tau)``."""
    x = np.asarray(x)
    H, W = x.shape[-2:]
    w0 = 2 * np.pi * np.fft.fftfreq(H)[:, None]
    w1 = 2 * np.pi * np.fft.fftfreq(W)[None, :]
    lhs = np.fft.fft2(translate(x, tau))
    rhs = np.exp(-1j * (w0 * tau[0] + w1 * tau[1])) * np.fft.fft2(x)
    scale = max(np.linalg.norm(rhs), np.finfo(float).tiny)
    err = np.abs(lhs - rhs) / scale
    bad = int(np.sum(err > tol))
    return TheoremReport("fourier_shift", int(err.size), bad, tol - float(err.max()),
                         {"tau": tuple(int(t) for t in tau), "shape": (H, W)})


def check_fourier_shift_random(trials=100, size=16, seed=0, tol=1e-10) -> TheoremReport:
    violations, worst, total = 0, np.inf, 0
    for t in range(trials):
        rng = rng_stream(seed, "fourier_shift", t)
        x = rng.normal(size=(size, size)) + 1j * rng.normal(size=(size, size))
        tau = rng.integers(-size, size + 1, 2)
        r = check_fourier_shift(x, tau, tol)
        violations += r.violations
        total += r.trials
        worst = min(worst, r.worst_slack)
    return TheoremReport("fourier_shift", total, violations, worst, {"images": trials, "size": size, "seed": seed})


# ---------------------------------------------------------------------------
# Translation bound


def _shifts_of_norm(n):
    return [(n, 0), (-n, 0), (0, n), (0, -n)]


def check_translation_bound(filt: Filter, trials=1000, seed=0, size=32, norms=(1, 2, 4),
                            tol=1e-9, complex_input=False) -> TheoremReport:
    """Check ``||x_tau * psi - exp(-i xi.tau)(x * psi)||_inf <= sigma |tau| ||x||_2``.

    ``psi`` is the unit-norm version of ``filt``; ``xi`` and ``sigma`` come
    from :func:`spectral_stats`.  Images are random unit-norm ``size x size``
    arrays on the torus and ``tau`` is drawn among integer shifts with
    Euclidean norm in ``norms``.
    """
    psi = filt.normalized().taps
    if psi.shape[0] + 2 * max(norms) > size:
        raise ParameterError(f"filter of grid {psi.shape[0]} too large for {size}x{size} checks")
    stats = spectral_stats(filt)
    xi = np.asarray(stats.center_freq)
    sigma = stats.bandwidth
    rng = rng_stream(seed, "translation_bound")
    x = rng.normal(size=(trials, size, size))
    if complex_input:
        x = x + 1j * rng.normal(size=(trials, size, size))
    x /= np.linalg.norm(x, axis=(1, 2), keepdims=True)
    choices = [tau for n in norms for tau in _shifts_of_norm(n)]
    taus = np.array(choices)[rng.integers(0, len(choices), trials)]

    base = _circular_conv(x, psi)
    worst_slack, worst_ratio, violations = np.inf, 0.0, 0
    for t in range(trials):
        tau = taus[t]
        shifted = _circular_conv(translate(x[t], tau), psi)
        lhs = np.max(np.abs(shifted - np.exp(-1j * xi @ tau) * base[t]))
        bound = sigma * np.linalg.norm(tau) * np.linalg.norm(x[t])
        worst_slack = min(worst_slack, bound - lhs)
        if bound > 0:
            worst_ratio = max(worst_ratio, lhs / bound)
        violations += int(lhs > bound + tol)
    return TheoremReport("translation_bound", trials, violations, float(worst_slack),
                         {"xi": tuple(xi), "sigma": sigma, "worst_ratio": float(worst_ratio),
                          "size": size, "seed": seed})


# ---------------------------------------------------------------------------
# Modulus from ReLUs


def check_modulus_relu(filt: Filter, n_grid=1024, n_images=100, size=32, seed=0,
                       rel_tol=1e-3, sandwich_tol=1e-10) -> TheoremReport:
    """Quadrature of rectified phase-shifted filters versus the exact modulus.

    Two claims per image: the ``n_grid``-phase Riemann sum matches
    ``|x * psi|`` within ``rel_tol`` relative l-infinity error, and the
    four-phase sum ``S4`` satisfies ``|x * psi| <= S4 <= sqrt(2) |x * psi|``
    everywhere.  ``worst_slack`` is the smallest margin over both claims.
    """
    rng = rng_stream(seed, "modulus_relu")
    x = rng.normal(size=(n_images, size, size))
    exact = np.abs(_circular_conv(x, filt.taps))
    quad = modulus_from_relus(x, filt, n_grid, mode="quadrature")
    four = modulus_from_relus(x, filt, mode="four")

    peak = exact.reshape(n_images, -1).max(axis=1)
    rel = np.abs(quad - exact).reshape(n_images, -1).max(axis=1) / peak
    lower = four - exact
    upper = np.sqrt(2) * exact - four
    quad_bad = rel > rel_tol
    sandwich_bad = ((lower < -sandwich_tol) | (upper < -sandwich_tol)).reshape(n_images, -1).any(axis=1)
    worst = min(float(np.min(rel_tol - rel)), float(lower.min()), float(upper.min()))
    return TheoremReport("modulus_relu", n_images, int(np.sum(quad_bad | sandwich_bad)), worst,
                         {"n_grid": n_grid, "max_rel_err": float(rel.max()),
                          "quadrature_failures": int(quad_bad.sum()),
                          "sandwich_failures": int(sandwich_bad.sum()), "seed": seed})


def quadrature_convergence(filt: Filter, ns=(4, 8, 16, 32, 64, 128, 256, 512, 1024), size=32, seed=0):
    """Max relative error of the phase quadrature for each ``n`` on one random image."""
    x = rng_stream(seed, "quadrature_convergence").normal(size=(size, size))
    exact = np.abs(_circular_conv(x, filt.taps))
    return {n: float(np.max(np.abs(modulus_from_relus(x, filt, n) - exact)) / exact.max()) for n in ns}


# ---------------------------------------------------------------------------
# Proximal operator


def _prox_objective(w, z, b):
    return b * np.abs(w) + 0.5 * np.abs(w - z) ** 2


def grid_prox_search(z, b, points=41, levels=12, zoom=8.0):
    """Brute-force minimizer of ``b|w| + |w - z|^2 / 2`` over ``w`` in C.

    A square grid covering the disc of radius ``|z|`` is refined around
    its best point ``levels`` times.  Returns ``(w_best, f_best)`` over
    every grid point evaluated.
    """
    z = np.atleast_1d(np.asarray(z, dtype=complex))
    b = np.broadcast_to(np.asarray(b, dtype=float), z.shape)
    t = np.linspace(-1, 1, points)
    offsets = t[None, :, None] + 1j * t[None, None, :]
    center = np.zeros_like(z)
    half = np.abs(z) + 1e-12
    best_w = np.zeros_like(z)
    best_f = _prox_objective(best_w, z, b)
    for _ in range(levels):
        cand = center[:, None, None] + half[:, None, None] * offsets
        f = _prox_objective(cand, z[:, None, None], b[:, None, None])
        flat = f.reshape(len(z), -1)
        arg = np.argmin(flat, axis=1)
        fmin = flat[np.arange(len(z)), arg]
        wmin = cand.reshape(len(z), -1)[np.arange(len(z)), arg]
        better = fmin < best_f
        best_w = np.where(better, wmin, best_w)
        best_f = np.where(better, fmin, best_f)
        center = best_w
        half = half * (2.0 / (points - 1)) * zoom / 2
    return best_w, best_f


def check_prox_soft_threshold(samples, b, tol_w=1e-4, tol_f=1e-8) -> TheoremReport:
    """Soft-thresholding is the proximal operator of ``b |.|`` on C."""
    z = np.atleast_1d(np.asarray(samples, dtype=complex))
    b = np.broadcast_to(np.asarray(b, dtype=float), z.shape)
    if np.any(b < 0):
        raise ParameterError("thresholds must be nonnegative")
    w_star = soft_threshold(z, b)
    f_star = _prox_objective(w_star, z, b)
    w_grid, f_grid = grid_prox_search(z, b)
    dist = np.abs(w_grid - w_star)
    gain = f_star - f_grid
    bad = (dist > tol_w) | (gain > tol_f)
    worst = min(float(np.min(tol_w - dist)), float(np.min(tol_f - gain)))
    return TheoremReport("prox_soft_threshold", int(z.size), int(bad.sum()), worst,
                         {"max_dist": float(dist.max()), "max_gain": float(gain.max())})


def check_prox_random(n=10_000, seed=0, scale=3.0) -> TheoremReport:
    rng = rng_stream(seed, "prox")
    z = scale * (rng.normal(size=n) + 1j * rng.normal(size=n))
    b = rng.uniform(0, 2 * scale, n)
    report = check_prox_soft_threshold(z, b)
    report.params["seed"] = seed
    return report


# ---------------------------------------------------------------------------
# Haar unitaries


def random_unitary(d: int, seed=0, rng=None) -> np.ndarray:
    """Haar-distributed unitary from the QR factorization of a complex Gaussian matrix."""
    if d < 1:
        raise ParameterError(f"dimension must be >= 1, got {d}")
    rng = rng_stream(seed, "unitary") if rng is None else rng
    Z = (rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))) / np.sqrt(2)
    Q, R = np.linalg.qr(Z)
    phases = np.diagonal(R) / np.abs(np.diagonal(R))
    return Q * phases[None, :]


def _check_unitary(D):
    D = np.asarray(D)
    if D.ndim != 2 or D.shape[0] != D.shape[1]:
        raise ParameterError(f"D must be square, got shape {D.shape}")
    err = np.linalg.norm(D.conj().T @ D - np.eye(len(D)))
    if err > 1e-8:
        raise ParameterError(f"D is not unitary: ||D*D - I|| = {err:.3e}")
    return D


# ---------------------------------------------------------------------------
# Entropy estimation


def knn_entropy(samples, k=5, boxsize=None):
    """Kozachenko-Leonenko entropy estimate (nats) with max-norm balls.

    With ``boxsize`` the samples live on a torus of that period in every
    coordinate.  Returns ``(entropy, stderr)``; the standard error is the
    naive one of the per-sample log-distance terms.
    """
    X = np.asarray(samples, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n, d = X.shape
    if n <= k:
        raise DegenerateInputError(f"need more than k={k} samples, got {n}")
    if boxsize is not None:
        X = np.mod(X, boxsize)
        X[X >= boxsize] = 0.0  # mod can round up to the period itself
    tree = cKDTree(X, boxsize=boxsize)
    dist, _ = tree.query(X, k=k + 1, p=np.inf)
    eps = np.maximum(dist[:, k], np.finfo(float).tiny)
    terms = d * np.log(2 * eps)
    H = digamma(n) - digamma(k) + terms.mean()
    return float(H), float(terms.std(ddof=1) / np.sqrt(n))


def histogram_entropy(samples, bins=256, period=2 * np.pi):
    """Plug-in differential entropy of scalar samples on ``[0, period)``."""
    x = np.mod(np.asarray(samples, dtype=float).ravel(), period)
    counts, _ = np.histogram(x, bins=bins, range=(0, period))
    n = counts.sum()
    p = counts[counts > 0] / n
    width = period / bins
    H = -np.sum(p * np.log(p)) + np.log(width)
    # delta-method standard error of the plug-in estimate
    logs = -np.log(p)
    stderr = np.sqrt(max(np.sum(p * logs ** 2) - np.sum(p * logs) ** 2, 0.0) / n)
    return float(H), float(stderr)


def phase_entropy(phases, k=5, bins=256):
    """Entropy of phase vectors in ``[0, 2 pi)^d`` with circular distance."""
    phases = np.asarray(phases, dtype=float)
    if phases.ndim == 1 or phases.shape[1] == 1:
        return histogram_entropy(phases, bins)
    return knn_entropy(phases, k=k, boxsize=2 * np.pi)


def _quantile_cells(amplitudes, per_axis, min_count):
    n, d = amplitudes.shape
    codes = np.zeros(n, dtype=np.int64)
    for j in range(d):
        edges = np.quantile(amplitudes[:, j], np.linspace(0, 1, per_axis + 1)[1:-1])
        codes = codes * per_axis + np.searchsorted(edges, amplitudes[:, j], side="right")
    cells = [np.flatnonzero(codes == c) for c in np.unique(codes)]
    cells.sort(key=len)
    merged, pending = [], np.array([], dtype=np.int64)
    for cell in cells:
        pending = np.concatenate([pending, cell])
        if len(pending) >= min_count:
            merged.append(pending)
            pending = np.array([], dtype=np.int64)
    if len(pending):
        if merged:
            merged[-1] = np.concatenate([merged[-1], pending])
        else:
            merged.append(pending)
    return merged


def conditional_phase_entropy(Y, per_axis=None, min_count=100, k=5):
    """Estimate ``H(phase(Y) | |Y|)`` by averaging within-cell phase entropies.

    Amplitude vectors are binned into per-coordinate quantile cells; cells
    with fewer than ``min_count`` samples are merged with their neighbours
    in size order.  Returns ``(entropy, stderr)``.
    """
    Y = np.asarray(Y)
    if Y.ndim == 1:
        Y = Y[:, None]
    n, d = Y.shape
    if per_axis is None:
        per_axis = {1: 8, 2: 4, 3: 3}.get(d, 2)
    phases = np.mod(np.angle(Y), 2 * np.pi)
    cells = _quantile_cells(np.abs(Y), per_axis, min_count)
    H, var = 0.0, 0.0
    for cell in cells:
        h, se = phase_entropy(phases[cell], k=k)
        w = len(cell) / n
        H += w * h
        var += (w * se) ** 2
    return H, float(np.sqrt(var))


def complex_gaussian_entropy(cov) -> float:
    """Entropy (nats, Lebesgue measure on R^{2d}) of a circular complex Gaussian."""
    cov = np.atleast_2d(cov)
    d = len(cov)
    _, logdet = np.linalg.slogdet(cov)
    return float(d * np.log(np.pi * np.e) + logdet)


def check_entropy_bound(ensemble, D=None, mc_samples=100_000, scale=1.0, n_se=3.0,
                        uniform_tol=0.02) -> TheoremReport:
    """Monte-Carlo check of the phase-entropy lower bound.

    ``ensemble`` is a complex-Gaussian :class:`SyntheticEnsemble` (an integer
    ``d`` means the isotropic one with seed 0), so ``H(X)`` is known in closed
    form; ``X`` is scaled by ``scale``.  The bound
    ``H(phase(DX) | |DX|) >= H(X) - d - 2d log(E||DX||_1 / d)`` is accepted
    when the estimated slack is above ``-n_se`` combined standard errors.
    For isotropic ``X`` the phases of ``DX`` are exactly uniform, and an
    estimate further than ``uniform_tol`` (relative) from ``d log 2 pi``
    also counts as a violation.
    """
    if not isinstance(ensemble, SyntheticEnsemble):
        ensemble = SyntheticEnsemble("complex_gaussian", int(ensemble))
    if ensemble.kind != "complex_gaussian":
        raise ParameterError("the entropy check needs a complex_gaussian ensemble")
    d, seed = ensemble.d, ensemble.seed
    if D is None:
        D = random_unitary(d, rng=rng_stream(seed, "entropy_unitary", d))
    D = _check_unitary(D)
    cov = ensemble.covariance()
    isotropic = np.allclose(cov, cov[0, 0] * np.eye(d))
    Y = scale * ensemble.sample(mc_samples) @ D.T

    H_X = ensemble.entropy() + 2 * d * np.log(scale)
    l1 = np.abs(Y).sum(axis=1)
    mean_l1 = l1.mean()
    se_l1 = l1.std(ddof=1) / np.sqrt(mc_samples)
    rhs = H_X - d - 2 * d * np.log(mean_l1 / d)
    se_rhs = 2 * d * se_l1 / mean_l1
    lhs, se_lhs = conditional_phase_entropy(Y)
    slack = lhs - rhs
    se = float(np.hypot(se_lhs, se_rhs))
    rel_dev = abs(lhs - d * LOG_2PI) / (d * LOG_2PI)
    violations = int(slack < -n_se * se) + int(isotropic and rel_dev > uniform_tol)
    return TheoremReport("entropy_bound", mc_samples, violations, float(slack),
                         {"d": d, "lhs": lhs, "rhs": float(rhs), "stderr": se, "H_X": H_X,
                          "mean_l1": float(mean_l1), "uniform_phase_entropy": d * LOG_2PI,
                          "rel_dev_from_uniform": rel_dev, "isotropic": bool(isotropic),
                          "scale": scale, "seed": seed})


# ---------------------------------------------------------------------------
# Synthetic ensembles


ENSEMBLE_KINDS = ("complex_gaussian", "uniform_phase", "natural_image_patches")


@dataclass(frozen=True)
class SyntheticEnsemble:
    """Reproducible generator of random vectors in C^d.

    ``complex_gaussian`` draws circular Gaussians with covariance ``cov``
    (identity by default).  ``uniform_phase`` multiplies amplitudes from
    ``amplitudes`` (a law name accepted by the sparsification check) by
    independent uniform phases.  ``natural_image_patches`` takes wavelet
    coefficients of ``images`` at ``d`` consecutive pixels of a row; it is
    the only kind without a closed-form density.
    """

    kind: str
    d: int
    seed: int = 0
    cov: object = None
    amplitudes: str = "rayleigh"
    images: object = None

    def __post_init__(self):
        if self.kind not in ENSEMBLE_KINDS:
            raise ParameterError(f"unknown ensemble {self.kind!r}; expected one of {ENSEMBLE_KINDS}")
        if self.d < 1:
            raise ParameterError(f"dimension must be >= 1, got {self.d}")
        if self.kind == "natural_image_patches" and self.images is None:
            raise ParameterError("natural_image_patches needs images")

    def covariance(self):
        return np.eye(self.d) if self.cov is None else np.asarray(self.cov, dtype=float)

    def entropy(self) -> float:
        if self.kind != "complex_gaussian":
            raise ParameterError(f"no closed-form entropy for {self.kind!r}")
        return complex_gaussian_entropy(self.covariance())

    def sample(self, n: int) -> np.ndarray:
        rng = rng_stream(self.seed, "ensemble_" + self.kind, self.d)
        if self.kind == "complex_gaussian":
            Lc = np.linalg.cholesky(self.covariance())
            Z = (rng.normal(size=(n, self.d)) + 1j * rng.normal(size=(n, self.d))) / np.sqrt(2)
            return Z @ Lc.T
        if self.kind == "uniform_phase":
            return _amplitudes(rng, n, self.d, self.amplitudes) * np.exp(1j * rng.uniform(0, 2 * np.pi, (n, self.d)))
        from .filterbank import build_bank
        psi = build_bank(1).band_pass[0].taps
        imgs = np.asarray(self.images, dtype=float).reshape(-1, *np.shape(self.images)[-2:])
        coeffs = _circular_conv(imgs, psi)
        H, W = coeffs.shape[-2:]
        if W < self.d:
            raise ParameterError(f"images narrower than d={self.d}")
        i = rng.integers(0, len(coeffs), n)
        r = rng.integers(0, H, n)
        c = rng.integers(0, W - self.d + 1, n)
        return coeffs[i[:, None], r[:, None], c[:, None] + np.arange(self.d)]


# ---------------------------------------------------------------------------
# Sparsification floor


def _amplitudes(rng, n, d, kind):
    if kind == "equal":
        return np.ones((n, d))
    if kind == "rayleigh":
        return np.abs(rng.normal(size=(n, d)) + 1j * rng.normal(size=(n, d))) / np.sqrt(2)
    if kind == "sparse":
        # soft-thresholded Rayleigh amplitudes: many exact zeros
        r = np.abs(rng.normal(size=(n, d)) + 1j * rng.normal(size=(n, d))) / np.sqrt(2)
        return np.maximum(r - 1.0, 0.0)
    if kind == "exponential":
        return rng.exponential(size=(n, d))
    raise ParameterError(f"unknown amplitude law {kind!r}")


def l1_ratio(D, amplitudes, phases):
    """``E||D X||_1 / E||X||_1`` for samples ``X = amplitudes * exp(i phases)``."""
    X = amplitudes * np.exp(1j * phases)
    return float(np.abs(X @ D.T).sum(axis=1).mean() / np.abs(X).sum(axis=1).mean())


def check_sparsification_floor(d, trials=100, mc_samples=100_000, seed=0, amplitudes="equal",
                               floor=SQRT_PI_OVER_2 - 0.02, unitaries=None) -> TheoremReport:
    """Minimum l1 ratio under unitary changes of basis of uniform-phase vectors.

    ``X'`` has i.i.d. uniform phases independent of its amplitudes.  For
    each of ``trials`` Haar unitaries (or the given ``unitaries``) the ratio
    ``E||D' X'||_1 / E||X'||_1`` is estimated by Monte Carlo; a trial
    violates when the ratio is below ``floor``.
    """
    if d < 1:
        raise ParameterError(f"dimension must be >= 1, got {d}")
    rng = rng_stream(seed, "sparsification", d)
    amp = _amplitudes(rng, mc_samples, d, amplitudes)
    phases = rng.uniform(0, 2 * np.pi, (mc_samples, d))
    if unitaries is None:
        unitaries = (random_unitary(d, rng=rng_stream(seed, "sparsification_unitary", d, t)) for t in range(trials))
    ratios = np.array([l1_ratio(_check_unitary(D), amp, phases) for D in unitaries])
    return TheoremReport("sparsification_floor", len(ratios), int(np.sum(ratios < floor)),
                         float(ratios.min() - floor),
                         {"d": d, "min_ratio": float(ratios.min()), "mean_ratio": float(ratios.mean()),
                          "floor": floor, "sqrt_pi_over_2": SQRT_PI_OVER_2, "amplitudes": amplitudes,
                          "seed": seed})


def dft_matrix(d):
    k = np.arange(d)
    return np.exp(-2j * np.pi * np.outer(k, k) / d) / np.sqrt(d)

import math

import numpy as np
import pytest

from phasecollapse import theory
from phasecollapse.exceptions import ParameterError
from phasecollapse.filterbank import MorletParams, build_bank, build_morlet
from phasecollapse.nonlin import modulus_from_relus
from phasecollapse.tensor_ops import translate


@pytest.fixture(scope="module")
def morlet():
    return build_morlet(MorletParams.first_layer(0.0, np.pi / 4), 15)


def direct_dft(x):
    """O(N^4) DFT used as an oracle for the FFT."""
    H, W = x.shape
    k0 = np.arange(H)[:, None]
    k1 = np.arange(W)[:, None]
    F0 = np.exp(-2j * np.pi * k0 * np.arange(H)[None, :] / H)
    F1 = np.exp(-2j * np.pi * k1 * np.arange(W)[None, :] / W)
    return F0 @ x @ F1.T


class TestReport:
    def test_pass_flag_and_row(self):
        r = theory.TheoremReport("x", 3, 0, 0.5)
        assert r.passed and r.csv_row() == ["x", 3, 0, "5.000000e-01", 1]
        assert "PASS" in r.line()
        assert not theory.TheoremReport("x", 3, 1, -0.5).passed


class TestFourierShift:
    def test_zero_shift_exact(self):
        x = np.random.default_rng(0).normal(size=(8, 8))
        r = theory.check_fourier_shift(x, (0, 0))
        assert r.passed and r.worst_slack == 1e-10

    def test_dirac_gives_phase_ramp(self):
        x = np.zeros((8, 8))
        x[0, 0] = 1.0
        spectrum = np.fft.fft2(translate(x, (1, 0)))
        w0 = 2 * np.pi * np.fft.fftfreq(8)[:, None]
        np.testing.assert_allclose(spectrum, np.broadcast_to(np.exp(-1j * w0), (8, 8)), atol=1e-15)
        assert theory.check_fourier_shift(x, (1, 0)).passed

    def test_fft_matches_direct_dft(self):
        x = np.random.default_rng(1).normal(size=(6, 5)) + 0j
        np.testing.assert_allclose(np.fft.fft2(x), direct_dft(x), atol=1e-12)

    def test_random(self):
        r = theory.check_fourier_shift_random(trials=100, size=16, seed=0)
        assert r.passed and r.trials == 100 * 256

    def test_flags_wrong_identity(self, monkeypatch):
        monkeypatch.setattr(theory, "translate", lambda x, tau: np.roll(x, (tau[0], tau[1] + 1), axis=(-2, -1)))
        x = np.random.default_rng(0).normal(size=(8, 8))
        assert not theory.check_fourier_shift(x, (1, 0)).passed


class TestTranslationBound:
    def test_zero_shift(self, morlet):
        r = theory.check_translation_bound(morlet, trials=20, norms=(0,))
        assert r.passed and r.worst_slack == 0.0 and r.params["worst_ratio"] == 0.0

    def test_pure_tone_phase_shift_exact(self, morlet):
        n = 32
        u0, u1 = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        xi = 2 * np.pi * np.array([5, 3]) / n
        x = np.exp(1j * (xi[0] * u0 + xi[1] * u1))
        psi = morlet.normalized().taps
        base = theory._circular_conv(x, psi)
        for tau in [(1, 0), (0, -2), (4, 4), (7, -3)]:
            shifted = theory._circular_conv(translate(x, tau), psi)
            lhs = np.max(np.abs(shifted - np.exp(-1j * xi @ np.array(tau)) * base))
            assert lhs < 1e-12

    def test_morlet_zero_violations(self, morlet):
        r = theory.check_translation_bound(morlet, trials=1000, seed=0)
        assert r.passed and r.trials == 1000
        assert 0 < r.params["worst_ratio"] < 1

    def test_complex_input(self, morlet):
        assert theory.check_translation_bound(morlet, trials=200, complex_input=True).passed

    def test_filter_too_large(self):
        f = build_bank(2, grid=31).band_pass[0]
        with pytest.raises(ParameterError):
            theory.check_translation_bound(f, trials=1, size=32)

    def test_deterministic(self, morlet):
        a = theory.check_translation_bound(morlet, trials=50, seed=3)
        b = theory.check_translation_bound(morlet, trials=50, seed=3)
        assert a.worst_slack == b.worst_slack


class TestModulusRelu:
    def test_real_response_four_phase_exact(self):
        low = build_bank(4).low_pass
        x = np.random.default_rng(0).normal(size=(32, 32))
        exact = np.abs(theory._circular_conv(x, low.taps))
        np.testing.assert_allclose(modulus_from_relus(x, low, mode="four"), exact, atol=1e-12)

    def test_convergence_nonincreasing(self, morlet):
        table = theory.quadrature_convergence(morlet, ns=(4, 16, 64, 256, 1024))
        errs = [table[n] for n in (4, 16, 64, 256, 1024)]
        assert all(b <= a for a, b in zip(errs, errs[1:]))
        assert errs[-1] < 1e-3

    def test_check_passes(self, morlet):
        r = theory.check_modulus_relu(morlet, n_images=20)
        assert r.passed and r.params["sandwich_failures"] == 0

    def test_coarse_quadrature_flagged(self, morlet):
        r = theory.check_modulus_relu(morlet, n_grid=3, n_images=5)
        assert r.params["quadrature_failures"] == 5 and not r.passed


class TestProx:
    def test_zero_threshold(self):
        z = np.array([1 + 2j, -0.5j])
        w, _ = theory.grid_prox_search(z, 0.0)
        np.testing.assert_allclose(w, z, atol=1e-6)

    def test_dead_zone(self):
        w, _ = theory.grid_prox_search(np.array([0.3 + 0.4j]), 1.0)
        assert abs(w[0]) < 1e-6

    def test_three_four(self):
        w, _ = theory.grid_prox_search(np.array([3 + 4j]), 2.0)
        assert abs(w[0] - (1.8 + 2.4j)) < 1e-4
        assert theory.check_prox_soft_threshold(3 + 4j, 2.0).passed

    def test_random(self):
        r = theory.check_prox_random(n=1000, seed=1)
        assert r.passed and r.params["max_dist"] < 1e-4

    def test_wrong_operator_flagged(self, monkeypatch):
        monkeypatch.setattr(theory, "soft_threshold", lambda z, b: 0.9 * z)
        assert not theory.check_prox_soft_threshold(np.array([3 + 4j]), 1.0).passed

    def test_negative_threshold(self):
        with pytest.raises(ParameterError):
            theory.check_prox_soft_threshold(1j, -1.0)


class TestUnitary:
    def test_scalar(self):
        D = theory.random_unitary(1, seed=4)
        assert D.shape == (1, 1) and abs(abs(D[0, 0]) - 1) < 1e-12

    @pytest.mark.parametrize("d", [2, 5, 16])
    def test_unitarity(self, d):
        D = theory.random_unitary(d, seed=d)
        assert np.linalg.norm(D.conj().T @ D - np.eye(d)) <= 1e-10
        np.testing.assert_allclose(np.linalg.norm(D, axis=0), 1.0, atol=1e-12)

    @pytest.mark.parametrize("d", [2, 4])
    def test_haar_second_moment(self, d):
        rng = np.random.default_rng(0)
        vals = np.array([abs(theory.random_unitary(d, rng=rng)[0, 0]) ** 2 for _ in range(10_000)])
        se = vals.std(ddof=1) / np.sqrt(len(vals))
        assert abs(vals.mean() - 1 / d) < 3 * se

    def test_haar_phase_uniform(self):
        # without the diagonal phase fix the QR diagonal is real positive
        rng = np.random.default_rng(1)
        phases = np.array([np.angle(theory.random_unitary(3, rng=rng)[0, 0]) for _ in range(4000)])
        assert abs(np.mean(np.cos(phases))) < 0.05 and abs(np.mean(np.sin(phases))) < 0.05

    def test_bad_dimension(self):
        with pytest.raises(ParameterError):
            theory.random_unitary(0)


class TestEntropy:
    def test_gaussian_closed_form(self):
        # a standard real Gaussian per component with variance 1/2 each
        assert theory.complex_gaussian_entropy(np.eye(1)) == pytest.approx(math.log(math.pi * math.e))
        assert theory.complex_gaussian_entropy(4 * np.eye(2)) == pytest.approx(2 * math.log(4 * math.pi * math.e))

    @pytest.mark.parametrize("d", [1, 2, 3, 4])
    def test_estimator_uniform(self, d):
        phases = np.random.default_rng(d).uniform(0, 2 * np.pi, (100_000, d))
        H, _ = theory.phase_entropy(phases)
        assert abs(H - d * theory.LOG_2PI) / (d * theory.LOG_2PI) < 0.02

    def test_knn_gaussian(self):
        x = np.random.default_rng(0).normal(size=(20_000, 2))
        H, se = theory.knn_entropy(x)
        assert abs(H - math.log(2 * math.pi * math.e)) < max(0.03, 3 * se)

    def test_von_mises_below_uniform(self):
        phases = np.random.default_rng(0).vonmises(0, 2.0, 50_000)
        H, _ = theory.histogram_entropy(phases)
        assert H < theory.LOG_2PI - 0.2

    def test_d1_uniform(self):
        r = theory.check_entropy_bound(1, mc_samples=100_000)
        assert r.passed
        assert r.params["lhs"] == pytest.approx(math.log(2 * math.pi), rel=0.01)

    def test_d2_slack_nonnegative(self):
        r = theory.check_entropy_bound(2, mc_samples=100_000)
        assert r.passed and r.worst_slack > -3 * r.params["stderr"]

    def test_scaling_leaves_slack(self):
        a = theory.check_entropy_bound(2, mc_samples=50_000)
        b = theory.check_entropy_bound(2, mc_samples=50_000, scale=2.0)
        assert b.params["H_X"] - a.params["H_X"] == pytest.approx(4 * math.log(2))
        assert b.params["mean_l1"] == pytest.approx(2 * a.params["mean_l1"])
        assert abs(a.worst_slack - b.worst_slack) < 3 * a.params["stderr"]

    def test_anisotropic(self):
        ens = theory.SyntheticEnsemble("complex_gaussian", 2, seed=1, cov=np.diag([1.0, 0.25]))
        r = theory.check_entropy_bound(ens, D=np.eye(2), mc_samples=50_000)
        assert not r.params["isotropic"] and r.passed

    def test_non_unitary(self):
        with pytest.raises(ParameterError):
            theory.check_entropy_bound(2, D=np.array([[1.0, 0.1], [0.0, 1.0]]), mc_samples=1000)

    def test_wrong_ensemble(self):
        with pytest.raises(ParameterError):
            theory.check_entropy_bound(theory.SyntheticEnsemble("uniform_phase", 2), mc_samples=1000)


class TestEnsembles:
    def test_reproducible(self):
        e = theory.SyntheticEnsemble("uniform_phase", 3, seed=5, amplitudes="exponential")
        np.testing.assert_array_equal(e.sample(10), e.sample(10))

    def test_gaussian_covariance(self):
        cov = np.array([[2.0, 0.5], [0.5, 1.0]])
        Y = theory.SyntheticEnsemble("complex_gaussian", 2, cov=cov).sample(200_000)
        np.testing.assert_allclose(Y.T @ Y.conj() / len(Y), cov, atol=0.02)

    def test_patches(self):
        imgs = np.random.default_rng(0).normal(size=(2, 32, 32))
        Y = theory.SyntheticEnsemble("natural_image_patches", 4, images=imgs).sample(100)
        assert Y.shape == (100, 4) and np.iscomplexobj(Y)

    def test_errors(self):
        with pytest.raises(ParameterError):
            theory.SyntheticEnsemble("laplace", 2)
        with pytest.raises(ParameterError):
            theory.SyntheticEnsemble("natural_image_patches", 2)
        with pytest.raises(ParameterError):
            theory.SyntheticEnsemble("uniform_phase", 2).entropy()


class TestSparsification:
    def test_d1_exact(self):
        r = theory.check_sparsification_floor(1, trials=5, mc_samples=1000, amplitudes="rayleigh")
        assert r.params["min_ratio"] == pytest.approx(1.0, abs=1e-12)

    def test_dft_tends_to_sqrt_pi_over_2(self):
        ratios = []
        for d in (2, 8, 32):
            r = theory.check_sparsification_floor(d, mc_samples=20_000, unitaries=[theory.dft_matrix(d)])
            ratios.append(r.params["min_ratio"])
        assert ratios[0] > ratios[1] > ratios[2]
        assert abs(ratios[-1] - theory.SQRT_PI_OVER_2) < 0.01

    def test_identity_is_one(self):
        r = theory.check_sparsification_floor(4, mc_samples=1000, unitaries=[np.eye(4)])
        assert r.params["min_ratio"] == pytest.approx(1.0)

    def test_floor_small_run(self):
        r = theory.check_sparsification_floor(4, trials=10, mc_samples=20_000)
        assert r.passed and r.params["min_ratio"] >= theory.SQRT_PI_OVER_2 - 0.02

    def test_non_unitary(self):
        with pytest.raises(ParameterError):
            theory.check_sparsification_floor(2, mc_samples=10, unitaries=[2 * np.eye(2)])

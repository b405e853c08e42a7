import math

import numpy as np
import pytest

from modules.errors import InputError
from modules.evaluation.metrics import (
    CLAP_UNAVAILABLE, EmbeddingSetStats, capped, clap_score, fad, kl_div, log_spectrogram, si_sdr, si_sdri,
    spectrogram_ssim, ssim,
)
from modules.media.audio_io import Waveform


@pytest.fixture
def signals():
    rng = np.random.default_rng(0)
    return rng.normal(size=4096), rng.normal(size=4096), rng.normal(size=4096)


class TestSiSdr:
    def test_hand_example(self):
        assert si_sdr(np.array([1.0, 1.0]), np.array([1.0, 0.0])) == pytest.approx(0.0, abs=1e-12)

    def test_perfect_estimate(self, signals):
        ref = signals[0]
        assert si_sdr(ref, ref) == math.inf
        assert capped(si_sdr(ref, ref)) == 100.0

    def test_silent_estimate_scores_worst(self, signals):
        _, ref, noise = signals
        assert si_sdr(np.zeros_like(ref), ref) == -math.inf
        assert capped(si_sdr(np.zeros_like(ref), ref)) == -100.0
        assert si_sdr(np.zeros_like(ref), ref) < si_sdr(ref + 1e-3 * noise, ref)

    def test_orthogonal_estimate(self):
        assert si_sdr(np.array([0.0, 2.0]), np.array([1.0, 0.0])) == -math.inf

    def test_scale_invariance(self, signals):
        est, ref, _ = signals
        base = si_sdr(est + ref, ref)
        for c in (-3.0, 0.01, 250.0):
            assert si_sdr(c * (est + ref), ref) == pytest.approx(base, abs=1e-9)

    def test_accepts_waveforms(self, signals):
        est, ref, _ = signals
        assert si_sdr(Waveform(est, 16000), Waveform(ref, 16000)) == si_sdr(est, ref)

    def test_errors(self, signals):
        with pytest.raises(InputError):
            si_sdr(signals[0], np.zeros(4096))
        with pytest.raises(InputError):
            si_sdr(signals[0], signals[1][:100])


class TestSiSdri:
    def test_silent_estimate_never_improves(self, signals):
        _, ref, noise = signals
        for condition in (ref + 0.5 * noise, noise, ref):
            assert si_sdri(np.zeros_like(ref), condition, ref) <= 0.0
        assert si_sdri(np.zeros_like(ref), ref, ref) == -200.0

    def test_copy_is_zero(self, signals):
        _, ref, condition = signals
        assert si_sdri(condition, condition, ref) == 0.0

    def test_oracle_reaches_cap(self, signals):
        _, ref, noise = signals
        condition = ref + 0.5 * noise
        assert si_sdri(ref, condition, ref) == pytest.approx(100.0 - si_sdr(condition, ref))

    def test_composes_two_calls(self, signals):
        est, ref, condition = signals
        est, condition = ref + est, ref + 2 * condition
        assert si_sdri(est, condition, ref) == pytest.approx(si_sdr(est, ref) - si_sdr(condition, ref))

    def test_custom_cap(self, signals):
        _, ref, noise = signals
        condition = ref + noise
        assert si_sdri(ref, condition, ref, cap=30.0) == pytest.approx(30.0 - si_sdr(condition, ref))


class TestSsim:
    def test_identity_is_exactly_one(self, signals):
        assert ssim(signals[0], signals[0]) == 1.0

    def test_symmetric(self, signals):
        a, b, _ = signals
        assert ssim(a, b) == ssim(b, a)

    def test_bounded(self, signals):
        a, b, _ = signals
        assert -1.0 <= ssim(a, b) <= 1.0
        assert ssim(a, a + 0.01 * b) > ssim(a, b)

    def test_constant_images(self):
        value = spectrogram_ssim(np.ones((16, 16)), np.zeros((16, 16)))
        c1 = 0.01 ** 2
        assert value == pytest.approx(c1 / (1.0 + c1), rel=1e-9)
        assert value == pytest.approx(9.999e-5, rel=1e-4)

    def test_spectrogram_frames(self):
        spec = log_spectrogram(np.zeros(1024 + 3 * 256), window=1024, hop=256)
        assert spec.shape == (513, 4)
        assert np.all(spec == 0.0)

    def test_too_short(self):
        with pytest.raises(InputError):
            ssim(np.zeros(500), np.zeros(500))


class TestFad:
    def test_identical_stats(self, signals):
        stats = EmbeddingSetStats.from_features(np.stack(signals, axis=1))
        assert abs(fad(stats, stats)) < 1e-8

    def test_shifted_unit_gaussians(self):
        a = EmbeddingSetStats(np.array([0.0]), np.array([[1.0]]), 100)
        b = EmbeddingSetStats(np.array([3.0]), np.array([[1.0]]), 100)
        assert fad(a, b) == pytest.approx(9.0, abs=1e-12)

    def test_symmetric_and_nonnegative(self, signals):
        rng = np.random.default_rng(4)
        a = EmbeddingSetStats.from_features(rng.normal(size=(200, 3)))
        b = EmbeddingSetStats.from_features(rng.normal(size=(150, 3)) * [1.0, 2.0, 0.5] + 1.0)
        assert fad(a, b) == pytest.approx(fad(b, a), rel=1e-12)
        assert fad(a, b) >= -1e-8

    def test_covariance_is_psd(self):
        stats = EmbeddingSetStats.from_features(np.random.default_rng(5).normal(size=(3, 6)))
        assert np.allclose(stats.cov, stats.cov.T, atol=1e-12)
        assert np.linalg.eigvalsh(stats.cov).min() >= -1e-10
        assert stats.count == 3 and stats.dim == 6

    def test_errors(self):
        a = EmbeddingSetStats(np.zeros(2), np.eye(2), 10)
        b = EmbeddingSetStats(np.zeros(3), np.eye(3), 10)
        with pytest.raises(InputError):
            fad(a, b)
        with pytest.raises(InputError):
            EmbeddingSetStats.from_features(np.zeros((1, 4)))


class TestKl:
    def test_identical_sets(self, signals):
        features = np.stack(signals, axis=1)
        assert abs(kl_div(features, features)) < 1e-8

    def test_unit_mean_shift(self):
        a = np.array([[-1.0], [1.0]])
        b = np.array([[0.0], [2.0]])
        assert kl_div(a, b) == pytest.approx(0.5)

    def test_nonnegative(self):
        rng = np.random.default_rng(6)
        for _ in range(5):
            assert kl_div(rng.normal(size=(30, 4)), rng.normal(size=(40, 4)) * 3) >= 0.0

    def test_constant_dimension_uses_floor(self):
        a = np.zeros((5, 1))
        assert kl_div(a, a) == 0.0

    def test_dimension_mismatch(self):
        with pytest.raises(InputError):
            kl_div(np.zeros((4, 2)), np.zeros((4, 3)))


def test_clap_is_unavailable():
    assert clap_score(np.zeros(10), "Add drums") == CLAP_UNAVAILABLE

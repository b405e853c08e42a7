"""
Audio editing metrics.

Per-pair metrics (SI-SDR, SI-SDRi, spectrogram SSIM) and set-level metrics
(FAD, diagonal-Gaussian KL) over pluggable frame embeddings. Every function
here is pure.
"""

from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy import linalg, signal
from scipy.ndimage import uniform_filter

from ..constants import KL_VARIANCE_FLOOR, SI_SDR_CAP_DB, SSIM_FILTER_SIZE, SSIM_HOP, SSIM_K1, SSIM_K2, SSIM_WINDOW
from ..errors import InputError
from ..media.audio_io import Waveform

CLAP_UNAVAILABLE = 'unavailable'

AudioLike = Union[Waveform, np.ndarray]


def _samples(audio: AudioLike) -> np.ndarray:
    samples = audio.samples if isinstance(audio, Waveform) else audio
    return np.asarray(samples, dtype=np.float64).reshape(-1)


def _pair(a: AudioLike, b: AudioLike):
    a, b = _samples(a), _samples(b)
    if a.shape != b.shape:
        raise InputError(f"Signals differ in length: {a.size} vs {b.size}")
    return a, b


# Separation metrics

def si_sdr(est: AudioLike, ref: AudioLike) -> float:
    """Scale-invariant signal-to-distortion ratio in dB.

    +inf for a zero residual, -inf for an estimate with no component along the
    reference (silence included).

    Raises:
        InputError: On a length mismatch or an all-zero reference
    """
    est, ref = _pair(est, ref)
    ref_energy = float(np.dot(ref, ref))
    if ref_energy == 0.0:
        raise InputError("SI-SDR reference is all zero")
    alpha = float(np.dot(est, ref)) / ref_energy
    projection = alpha * ref
    signal_energy = float(np.dot(projection, projection))
    if signal_energy == 0.0:
        return float('-inf')
    residual = est - projection
    noise = float(np.dot(residual, residual))
    if noise == 0.0:
        return float('inf')
    return 10.0 * np.log10(signal_energy / noise)


def capped(value: float, cap: float = SI_SDR_CAP_DB) -> float:
    return float(np.clip(value, -cap, cap))


def si_sdri(est: AudioLike, condition: AudioLike, ref: AudioLike, cap: float = SI_SDR_CAP_DB) -> float:
    """SI-SDR improvement of ``est`` over ``condition``; both terms are capped at ``cap`` dB."""
    _pair(condition, ref)
    return capped(si_sdr(est, ref), cap) - capped(si_sdr(condition, ref), cap)


# Spectrogram SSIM

def log_spectrogram(audio: AudioLike, window: int = SSIM_WINDOW, hop: int = SSIM_HOP) -> np.ndarray:
    """log(1 + |STFT|), (frequencies, frames), frames fully inside the signal.

    Raises:
        InputError: If the signal is shorter than one window
    """
    samples = _samples(audio)
    if samples.size < window:
        raise InputError(f"Signal of {samples.size} samples is shorter than one {window}-sample frame")
    _, _, spec = signal.stft(samples, nperseg=window, noverlap=window - hop, boundary=None, padded=False)
    return np.log1p(np.abs(spec))


def spectrogram_ssim(a: np.ndarray, b: np.ndarray, filter_size: int = SSIM_FILTER_SIZE,
                     data_range: float = 1.0) -> float:
    """Mean windowed SSIM of two equally shaped images with a uniform window."""
    if a.shape != b.shape:
        raise InputError(f"Spectrograms differ in shape: {a.shape} vs {b.shape}")
    size = min(filter_size, *a.shape)
    if size % 2 == 0:
        size -= 1
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2

    mu_a = uniform_filter(a, size)
    mu_b = uniform_filter(b, size)
    var_a = uniform_filter(a * a, size) - mu_a * mu_a
    var_b = uniform_filter(b * b, size) - mu_b * mu_b
    cov = uniform_filter(a * b, size) - mu_a * mu_b

    numerator = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    denominator = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    ssim_map = numerator / denominator
    pad = size // 2
    valid = ssim_map[pad:ssim_map.shape[0] - pad, pad:ssim_map.shape[1] - pad]
    return float(valid.mean())


def ssim(a: AudioLike, b: AudioLike, window: int = SSIM_WINDOW, hop: int = SSIM_HOP) -> float:
    """SSIM of jointly max-normalised log-magnitude spectrograms."""
    a, b = _pair(a, b)
    spec_a = log_spectrogram(a, window, hop)
    spec_b = log_spectrogram(b, window, hop)
    peak = max(float(spec_a.max()), float(spec_b.max()))
    if peak > 0:
        spec_a, spec_b = spec_a / peak, spec_b / peak
    return spectrogram_ssim(spec_a, spec_b)


# Distribution metrics

def _features(features: np.ndarray) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim == 1:
        features = features[:, None]
    if features.ndim != 2 or features.shape[0] < 2:
        raise InputError(f"Need at least 2 feature rows, got shape {features.shape}")
    return features


def _psd_sqrt(matrix: np.ndarray) -> np.ndarray:
    eigvals, eigvecs = linalg.eigh(matrix)
    return (eigvecs * np.sqrt(np.clip(eigvals, 0.0, None))) @ eigvecs.T


@dataclass(frozen=True)
class EmbeddingSetStats:
    """Gaussian fitted to a set of embeddings."""
    mean: np.ndarray
    cov: np.ndarray
    count: int

    @property
    def dim(self) -> int:
        return int(self.mean.shape[0])

    @classmethod
    def from_features(cls, features: np.ndarray) -> 'EmbeddingSetStats':
        """Fit mean and unbiased covariance; the covariance is symmetrised and
        negative eigenvalues are floored at zero."""
        features = _features(features)
        cov = np.atleast_2d(np.cov(features, rowvar=False, ddof=1))
        cov = (cov + cov.T) / 2.0
        eigvals, eigvecs = linalg.eigh(cov)
        if eigvals.min() < 0:
            cov = (eigvecs * np.clip(eigvals, 0.0, None)) @ eigvecs.T
        return cls(features.mean(axis=0), cov, features.shape[0])


def _trace_sqrt_product(cov_a: np.ndarray, cov_b: np.ndarray) -> float:
    root = _psd_sqrt(cov_a)
    eigvals = linalg.eigvalsh(root @ cov_b @ root)
    return float(np.sqrt(np.clip(eigvals, 0.0, None)).sum())


def fad(stats_a: EmbeddingSetStats, stats_b: EmbeddingSetStats) -> float:
    """Frechet distance between two fitted Gaussians.

    Raises:
        InputError: On an embedding dimension mismatch
    """
    if stats_a.dim != stats_b.dim:
        raise InputError(f"Embedding dimensions differ: {stats_a.dim} vs {stats_b.dim}")
    diff = stats_a.mean - stats_b.mean
    trace_sqrt = 0.5 * (_trace_sqrt_product(stats_a.cov, stats_b.cov)
                        + _trace_sqrt_product(stats_b.cov, stats_a.cov))
    return float(diff @ diff + np.trace(stats_a.cov) + np.trace(stats_b.cov) - 2.0 * trace_sqrt)


def kl_div(features_a: np.ndarray, features_b: np.ndarray, floor: float = KL_VARIANCE_FLOOR) -> float:
    """Mean over dimensions of KL(N_a || N_b) between per-dimension Gaussian fits.

    Raises:
        InputError: On an embedding dimension mismatch
    """
    a, b = _features(features_a), _features(features_b)
    if a.shape[1] != b.shape[1]:
        raise InputError(f"Embedding dimensions differ: {a.shape[1]} vs {b.shape[1]}")
    mean_a, mean_b = a.mean(axis=0), b.mean(axis=0)
    var_a = np.maximum(a.var(axis=0), floor)
    var_b = np.maximum(b.var(axis=0), floor)
    per_dim = 0.5 * (np.log(var_b / var_a) + (var_a + (mean_a - mean_b) ** 2) / var_b - 1.0)
    return float(np.maximum(per_dim, 0.0).mean())


def clap_score(audio: AudioLike, text: str) -> str:
    """Text-audio similarity needs a pretrained contrastive model that is not bundled."""
    return CLAP_UNAVAILABLE

"""
Residual vector quantization codec.

Waveforms are cut into non-overlapping windows of ``sample_rate / frame_rate``
samples, projected onto the first ``feature_dim`` orthonormal DCT-II basis
vectors, and quantized by a cascade of codebooks where stage ``n`` encodes the
residual left by stages ``1..n-1``. Decoding sums the selected codewords and
maps them back through the transpose of the analysis matrix.
"""

import hashlib
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
from scipy.fft import dct
from sklearn.cluster import KMeans
from sklearn.exceptions import ConvergenceWarning

from ..constants import (
    SAMPLE_RATE, FRAME_RATE, N_CODEBOOKS, CODEBOOK_SIZE, FEATURE_DIM, KMEANS_MAX_ITER,
    FORMAT_VERSION,
)
from ..errors import ConfigurationError, InputError
from ..media.audio_io import Waveform
from ..utils.config import Config
from ..utils.logger import get_logger

logger = get_logger(__name__)

# Frames processed per block in nearest-codeword search
SEARCH_BLOCK = 1024


@dataclass
class CodecConfig:
    """Codec hyperparameters (``codec`` config section)."""
    sample_rate: int = SAMPLE_RATE
    frame_rate: int = FRAME_RATE
    n_codebooks: int = N_CODEBOOKS
    codebook_size: int = CODEBOOK_SIZE
    feature_dim: int = FEATURE_DIM
    kmeans_max_iter: int = KMEANS_MAX_ITER
    reserve_zero_codeword: bool = True
    max_training_frames: int = 20000

    @property
    def hop(self) -> int:
        """Samples per frame (window = hop)."""
        return self.sample_rate // self.frame_rate

    @classmethod
    def from_config(cls, config: Config) -> 'CodecConfig':
        return cls(**config.section('codec'))


@dataclass(frozen=True)
class TokenGrid:
    """N x T matrix of codebook indices at ``frame_rate`` frames per second."""
    tokens: np.ndarray
    frame_rate: int
    codebook_size: int

    def __post_init__(self):
        tokens = np.asarray(self.tokens)
        if tokens.ndim != 2:
            raise InputError(f"Token grid must be 2-D (N, T), got shape {tokens.shape}")
        if not np.issubdtype(tokens.dtype, np.integer):
            raise InputError(f"Token grid must hold integers, got {tokens.dtype}")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.codebook_size):
            raise InputError(f"Token out of range [0, {self.codebook_size})")
        object.__setattr__(self, 'tokens', tokens.astype(np.int64))

    @property
    def n_codebooks(self) -> int:
        return int(self.tokens.shape[0])

    @property
    def n_frames(self) -> int:
        return int(self.tokens.shape[1])

    def clip(self, n_frames: int) -> 'TokenGrid':
        """First ``n_frames`` frames."""
        return TokenGrid(self.tokens[:, :n_frames], self.frame_rate, self.codebook_size)


@dataclass(frozen=True)
class CodebookStack:
    """Trained codebooks (N x L x D) plus the frame analysis matrix (D x window)."""
    codebooks: np.ndarray
    analysis: np.ndarray
    sample_rate: int
    frame_rate: int
    _digest: str = field(default='', compare=False, repr=False)

    def __post_init__(self):
        codebooks = np.asarray(self.codebooks, dtype=np.float64)
        analysis = np.asarray(self.analysis, dtype=np.float64)
        if codebooks.ndim != 3:
            raise InputError(f"Codebooks must be (N, L, D), got {codebooks.shape}")
        if analysis.shape[0] != codebooks.shape[2]:
            raise InputError("Analysis matrix rows must match codeword dimension")
        if not np.all(np.isfinite(codebooks)):
            raise InputError("Codebooks contain non-finite values")
        if self.sample_rate % self.frame_rate != 0 or analysis.shape[1] != self.sample_rate // self.frame_rate:
            raise InputError("Analysis window must equal sample_rate / frame_rate")
        object.__setattr__(self, 'codebooks', codebooks)
        object.__setattr__(self, 'analysis', analysis)

    @property
    def n_codebooks(self) -> int:
        return int(self.codebooks.shape[0])

    @property
    def codebook_size(self) -> int:
        return int(self.codebooks.shape[1])

    @property
    def feature_dim(self) -> int:
        return int(self.codebooks.shape[2])

    @property
    def hop(self) -> int:
        return int(self.analysis.shape[1])

    def truncated(self, n_codebooks: int) -> 'CodebookStack':
        """Stack restricted to the first ``n_codebooks`` stages."""
        if not 1 <= n_codebooks <= self.n_codebooks:
            raise InputError(f"Cannot truncate {self.n_codebooks} codebooks to {n_codebooks}")
        return CodebookStack(self.codebooks[:n_codebooks], self.analysis, self.sample_rate, self.frame_rate)

    def digest(self) -> str:
        """SHA-256 over the stack contents; used as a cache and provenance key."""
        if not self._digest:
            h = hashlib.sha256()
            h.update(np.ascontiguousarray(self.codebooks).tobytes())
            h.update(np.ascontiguousarray(self.analysis).tobytes())
            h.update(f"{self.sample_rate}/{self.frame_rate}".encode())
            object.__setattr__(self, '_digest', h.hexdigest())
        return self._digest

    def save(self, path: Union[str, Path]) -> Path:
        """Serialize as a named-array container with a version field."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'wb') as f:
            np.savez(f, version=np.array(FORMAT_VERSION), codebooks=self.codebooks,
                     analysis=self.analysis, sample_rate=np.array(self.sample_rate),
                     frame_rate=np.array(self.frame_rate))
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> 'CodebookStack':
        path = Path(path)
        if not path.exists():
            raise InputError(f"Codebook file not found: {path}")
        with np.load(path) as data:
            version = int(data['version'])
            if version != FORMAT_VERSION:
                raise ConfigurationError(f"Unsupported codebook format version {version} in {path}")
            return cls(data['codebooks'], data['analysis'], int(data['sample_rate']), int(data['frame_rate']))


def analysis_matrix(window: int, feature_dim: int) -> np.ndarray:
    """First ``feature_dim`` rows of the orthonormal DCT-II matrix of size ``window``."""
    if not 1 <= feature_dim <= window:
        raise ConfigurationError(f"feature_dim must be in [1, {window}], got {feature_dim}")
    return dct(np.eye(window), type=2, norm='ortho', axis=0)[:feature_dim]


def frame_features(waveform: Waveform, analysis: np.ndarray) -> np.ndarray:
    """Project zero-padded, non-overlapping frames onto the analysis basis.

    Args:
        waveform: Input audio
        analysis: (D, window) analysis matrix

    Returns:
        np.ndarray: (T, D) features with T = ceil(len / window)
    """
    window = analysis.shape[1]
    n_frames = math.ceil(len(waveform) / window)
    padded = np.zeros(n_frames * window)
    padded[:len(waveform)] = waveform.samples
    return padded.reshape(n_frames, window) @ analysis.T


def nearest_codewords(vectors: np.ndarray, codebook: np.ndarray) -> np.ndarray:
    """Index of the nearest codeword (squared Euclidean; lowest index on ties)."""
    indices = np.empty(len(vectors), dtype=np.int64)
    for start in range(0, len(vectors), SEARCH_BLOCK):
        block = vectors[start:start + SEARCH_BLOCK]
        distances = ((block[:, None, :] - codebook[None, :, :]) ** 2).sum(axis=-1)
        indices[start:start + SEARCH_BLOCK] = np.argmin(distances, axis=1)
    return indices


def quantize_features(features: np.ndarray, codebooks: np.ndarray) -> np.ndarray:
    """Greedy residual quantization of (T, D) features; returns (N, T) indices."""
    residual = np.array(features, dtype=np.float64, copy=True)
    tokens = np.empty((codebooks.shape[0], len(features)), dtype=np.int64)
    for n, codebook in enumerate(codebooks):
        tokens[n] = nearest_codewords(residual, codebook)
        residual -= codebook[tokens[n]]
    return tokens


def quantization_mse(features: np.ndarray, codebooks: np.ndarray) -> np.ndarray:
    """Feature-space MSE after using 1..N codebooks; entry n-1 is the MSE with n stages."""
    tokens = quantize_features(features, codebooks)
    reconstruction = np.zeros_like(features, dtype=np.float64)
    errors = []
    for n, codebook in enumerate(codebooks):
        reconstruction += codebook[tokens[n]]
        errors.append(float(np.mean((features - reconstruction) ** 2)))
    return np.array(errors)


def train_codebooks(frames: np.ndarray, n_codebooks: int, codebook_size: int, seed: int,
                    config: Optional[CodecConfig] = None) -> CodebookStack:
    """Fit residual k-means codebooks.

    Codebook ``c`` is fit on the residuals left after quantizing with codebooks
    ``1..c-1``. When ``reserve_zero_codeword`` is set, stages after the first
    keep index 0 as the zero vector so adding a stage never increases a frame's
    residual.

    Args:
        frames: (K, D) feature corpus
        n_codebooks: Number of stages N
        codebook_size: Codewords per stage L
        seed: Seed for k-means initialisation
        config: Codec settings (window, iteration cap, zero-codeword policy)

    Returns:
        CodebookStack: Trained stack with an analysis matrix matching D

    Raises:
        ConfigurationError: If the corpus is smaller than the codebook
    """
    config = config or CodecConfig()
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2:
        raise InputError(f"Training frames must be (K, D), got shape {frames.shape}")
    if n_codebooks < 1:
        raise ConfigurationError(f"n_codebooks must be >= 1, got {n_codebooks}")
    if codebook_size < 1:
        raise ConfigurationError(f"codebook_size must be >= 1, got {codebook_size}")
    if len(frames) < codebook_size:
        raise ConfigurationError(
            f"Corpus of {len(frames)} frames is smaller than codebook size {codebook_size}"
        )

    residual = frames.copy()
    codebooks = np.zeros((n_codebooks, codebook_size, frames.shape[1]))
    for stage in range(n_codebooks):
        reserve = config.reserve_zero_codeword and stage > 0
        n_clusters = codebook_size - 1 if reserve else codebook_size
        if n_clusters > 0:
            # Sparse residuals legitimately give fewer distinct points than clusters
            with warnings.catch_warnings():
                warnings.simplefilter('ignore', ConvergenceWarning)
                kmeans = KMeans(n_clusters=n_clusters, init='k-means++', n_init=1,
                                max_iter=config.kmeans_max_iter, random_state=seed + stage,
                                algorithm='lloyd')
                kmeans.fit(residual)
            offset = 1 if reserve else 0
            codebooks[stage, offset:] = kmeans.cluster_centers_

        assignment = nearest_codewords(residual, codebooks[stage])
        residual = residual - codebooks[stage][assignment]
        logger.debug(f"Codebook {stage + 1}/{n_codebooks}: residual MSE {np.mean(residual ** 2):.6g}")

    return CodebookStack(codebooks, analysis_matrix(config.hop, frames.shape[1]),
                         config.sample_rate, config.frame_rate)


def build_codebook_stack(waveforms, config: CodecConfig, seed: int) -> CodebookStack:
    """Train a codebook stack on frame features drawn from ``waveforms``.

    At most ``config.max_training_frames`` frames are used, sampled with ``seed``.
    """
    analysis = analysis_matrix(config.hop, config.feature_dim)
    features = np.concatenate([frame_features(w, analysis) for w in waveforms], axis=0)
    if len(features) > config.max_training_frames:
        rng = np.random.default_rng(seed)
        keep = np.sort(rng.choice(len(features), config.max_training_frames, replace=False))
        features = features[keep]
    logger.info(f"Training {config.n_codebooks} codebooks of {config.codebook_size} on {len(features)} frames")
    return train_codebooks(features, config.n_codebooks, config.codebook_size, seed, config)


def encode(waveform: Waveform, stack: CodebookStack) -> TokenGrid:
    """Tokenize a waveform into an N x T grid.

    Args:
        waveform: Input audio at the stack's sample rate
        stack: Trained codebooks

    Returns:
        TokenGrid: T = ceil(duration * frame_rate)

    Raises:
        InputError: On empty input or a sample-rate mismatch
    """
    if len(waveform) == 0:
        raise InputError("Cannot encode an empty waveform")
    if waveform.sample_rate != stack.sample_rate:
        raise InputError(f"Waveform at {waveform.sample_rate} Hz, codec expects {stack.sample_rate} Hz")
    features = frame_features(waveform, stack.analysis)
    tokens = quantize_features(features, stack.codebooks)
    return TokenGrid(tokens, stack.frame_rate, stack.codebook_size)


def decode_features(grid: TokenGrid, stack: CodebookStack) -> np.ndarray:
    """(T, D) features: per frame, the sum of the selected codewords."""
    if grid.n_codebooks != stack.n_codebooks:
        raise InputError(f"Grid has {grid.n_codebooks} codebooks, stack has {stack.n_codebooks}")
    if grid.codebook_size != stack.codebook_size or (grid.tokens.size and grid.tokens.max() >= stack.codebook_size):
        raise InputError(f"Token out of range for codebook size {stack.codebook_size}")
    features = np.zeros((grid.n_frames, stack.feature_dim))
    for n in range(stack.n_codebooks):
        features += stack.codebooks[n][grid.tokens[n]]
    return features


def decode(grid: TokenGrid, stack: CodebookStack) -> Waveform:
    """Reconstruct a waveform from a token grid.

    Args:
        grid: Tokens with the stack's codebook count
        stack: Trained codebooks

    Returns:
        Waveform: ``T * window`` samples

    Raises:
        InputError: On codebook-count mismatch or out-of-range tokens
    """
    frames = decode_features(grid, stack) @ stack.analysis
    return Waveform(frames.reshape(-1), stack.sample_rate)

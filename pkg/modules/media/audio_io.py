"""Waveform container and single-channel WAV input/output."""

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
import soundfile as sf

from ..constants import WAV_SUBTYPES
from ..errors import AudioIOError, InputError
from ..utils.logger import get_logger

logger = get_logger(__name__)


@dataclass(frozen=True)
class Waveform:
    """Mono audio: float samples (nominal range [-1, 1]) at ``sample_rate`` Hz."""
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise InputError(f"Waveform must be one-dimensional, got shape {samples.shape}")
        if self.sample_rate <= 0:
            raise InputError(f"Sample rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(samples)):
            raise InputError("Waveform contains non-finite samples")
        object.__setattr__(self, 'samples', samples)

    def __len__(self) -> int:
        return int(self.samples.shape[0])

    @property
    def duration(self) -> float:
        """Duration in seconds."""
        return len(self) / self.sample_rate

    @classmethod
    def silence(cls, n_samples: int, sample_rate: int) -> 'Waveform':
        return cls(np.zeros(n_samples), sample_rate)

    def clip(self, start: int, length: int) -> 'Waveform':
        """Return ``length`` samples starting at sample ``start``."""
        if start < 0 or start + length > len(self):
            raise InputError(f"Clip [{start}, {start + length}) outside waveform of {len(self)} samples")
        return Waveform(self.samples[start:start + length].copy(), self.sample_rate)


def read_wav(path: Union[str, Path], expected_rate: Optional[int] = None) -> Waveform:
    """Read a single-channel WAV file.

    Args:
        path: WAV file path
        expected_rate: Sample rate the caller's configuration expects

    Returns:
        Waveform: Decoded audio as float64

    Raises:
        AudioIOError: If the file is missing or unreadable
        InputError: If the file is multi-channel or at an unexpected rate
    """
    path = Path(path)
    if not path.exists():
        raise AudioIOError("Audio file not found", str(path))
    try:
        data, rate = sf.read(str(path), dtype='float64', always_2d=True)
    except (RuntimeError, sf.LibsndfileError) as e:
        raise AudioIOError(f"Could not read audio ({e})", str(path))

    if data.shape[1] != 1:
        raise InputError(f"Expected mono audio, found {data.shape[1]} channels in {path}")
    if expected_rate is not None and rate != expected_rate:
        raise InputError(f"Sample rate {rate} Hz in {path} does not match configured {expected_rate} Hz")
    return Waveform(data[:, 0], int(rate))


def write_wav(path: Union[str, Path], waveform: Waveform, subtype: str = 'FLOAT',
              peak_normalize: bool = False) -> Path:
    """Write a waveform as single-channel WAV.

    Args:
        path: Destination path; parent directories are created
        waveform: Audio to write
        subtype: ``FLOAT`` (32-bit float) or ``PCM_16``
        peak_normalize: Scale to unit peak before export (export-time only)

    Returns:
        Path: The written path

    Raises:
        AudioIOError: If the file cannot be written
    """
    if subtype not in WAV_SUBTYPES:
        raise InputError(f"Unsupported WAV subtype: {subtype}")
    path = Path(path)
    samples = waveform.samples
    if peak_normalize:
        peak = float(np.max(np.abs(samples))) if len(samples) else 0.0
        if peak > 0:
            samples = samples / peak
    if subtype == 'PCM_16':
        samples = np.clip(samples, -1.0, 1.0)

    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        sf.write(str(path), samples.astype(np.float32), waveform.sample_rate, subtype=subtype, format='WAV')
    except (OSError, RuntimeError, sf.LibsndfileError) as e:
        raise AudioIOError(f"Could not write audio ({e})", str(path))
    logger.debug(f"Wrote {len(samples)} samples to {path}")
    return path

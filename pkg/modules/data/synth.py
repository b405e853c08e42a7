"""
Synthetic multi-stem corpus.

Every instrument label has its own oscillator family and pitch range. Notes
sit on a fixed tempo grid with random rests, and each stem also gets one
longer silent gap. Stems are scaled to a fixed peak and quantized to a
2^-24 grid, which keeps sums and differences of up to a few stems exact in
float64 and representable in 32-bit float WAV.
"""

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import signal

from ..constants import INSTRUMENTS, SAMPLE_RATE
from ..errors import AudioIOError, ConfigurationError, InputError
from ..media.audio_io import Waveform, read_wav, write_wav
from ..utils.logger import get_logger

logger = get_logger(__name__)

TEMPO_BPM = 120.0
STEM_PEAK = 0.15
QUANTUM = 2.0 ** -24
TRACKS_FILE = 'tracks.jsonl'
TRACKS_SUBDIR = 'tracks'


@dataclass(frozen=True)
class Stem:
    """One instrument group of a track."""
    label: str
    waveform: Waveform

    def __post_init__(self):
        if self.label not in INSTRUMENTS:
            raise InputError(f"Unknown instrument label: {self.label}")


@dataclass(frozen=True)
class Track:
    """A multi-stem track; all stems share length and sample rate."""
    track_id: str
    stems: Tuple[Stem, ...]

    def __post_init__(self):
        stems = tuple(self.stems)
        if len(stems) < 2:
            raise InputError(f"Track {self.track_id} needs at least 2 stems, got {len(stems)}")
        lengths = {len(s.waveform) for s in stems}
        rates = {s.waveform.sample_rate for s in stems}
        if len(lengths) != 1 or len(rates) != 1:
            raise InputError(f"Stems of track {self.track_id} differ in length or sample rate")
        object.__setattr__(self, 'stems', stems)

    @property
    def sample_rate(self) -> int:
        return self.stems[0].waveform.sample_rate

    @property
    def n_samples(self) -> int:
        return len(self.stems[0].waveform)

    @property
    def duration(self) -> float:
        return self.n_samples / self.sample_rate

    @property
    def labels(self) -> List[str]:
        return [s.label for s in self.stems]


def _midi_to_hz(midi: float) -> float:
    return 440.0 * 2.0 ** ((midi - 69.0) / 12.0)


def _envelope(t: np.ndarray, length: float, attack: float, decay: float = 0.0) -> np.ndarray:
    """Linear attack, optional exponential decay, short linear release at the note end."""
    env = np.minimum(t / attack, 1.0)
    if decay > 0:
        env = env * np.exp(-decay * t)
    release = np.clip((length - t) / 0.01, 0.0, 1.0)
    return env * release


def _bass(freq, t, length, rng):
    phase = 2 * np.pi * freq * t
    wave = sum(np.sin(k * phase) / k for k in range(1, 7))
    return wave * _envelope(t, length, 0.01, 1.0)


def _piano(freq, t, length, rng):
    phase = 2 * np.pi * freq * t
    wave = np.sin(phase) + 0.5 * np.sin(2 * phase) + 0.25 * np.sin(3 * phase)
    return wave * _envelope(t, length, 0.005, 3.0)


def _guitar(freq, t, length, rng):
    wave = signal.sawtooth(2 * np.pi * freq * t, width=0.5)
    return wave * _envelope(t, length, 0.003, 6.0)


def _strings(freq, t, length, rng):
    vibrato = 0.004 * np.sin(2 * np.pi * 5.0 * t)
    wave = np.sin(2 * np.pi * freq * t * (1.0 + vibrato))
    return wave * _envelope(t, length, 0.15)


def _synth(freq, t, length, rng):
    wave = signal.square(2 * np.pi * freq * t, duty=0.3)
    return wave * _envelope(t, length, 0.01, 2.0)


def _drums(kind, t, length, rng):
    if kind == 0:  # kick
        # pitch glides from 120 Hz down to 50 Hz
        phase = 2 * np.pi * (50.0 * t + 70.0 * (1.0 - np.exp(-30.0 * t)) / 30.0)
        return np.sin(phase) * _envelope(t, length, 0.002, 10.0)
    noise = rng.standard_normal(len(t))
    if kind == 1:  # snare
        return 0.7 * noise * _envelope(t, length, 0.001, 12.0)
    return 0.5 * noise * _envelope(t, length, 0.001, 20.0)  # hat


@dataclass(frozen=True)
class InstrumentSpec:
    """Voice function, pitch range (MIDI), grid step in beats and rest probability."""
    voice: Callable
    low: int
    high: int
    step_beats: float
    rest_probability: float


INSTRUMENT_SPECS: Dict[str, InstrumentSpec] = {
    'drums': InstrumentSpec(_drums, 0, 2, 0.5, 0.15),
    'bass': InstrumentSpec(_bass, 33, 45, 1.0, 0.2),
    'piano': InstrumentSpec(_piano, 52, 76, 0.5, 0.25),
    'guitar': InstrumentSpec(_guitar, 40, 64, 0.5, 0.3),
    'strings': InstrumentSpec(_strings, 48, 72, 2.0, 0.2),
    'synth': InstrumentSpec(_synth, 60, 84, 0.5, 0.3),
}


def _note_events(spec: InstrumentSpec, duration: float, rng: np.random.Generator) -> List[Tuple[float, float, int]]:
    step = spec.step_beats * 60.0 / TEMPO_BPM
    events = []
    for i in range(int(np.ceil(duration / step))):
        pitch = int(rng.integers(spec.low, spec.high + 1))
        if rng.random() >= spec.rest_probability:
            events.append((i * step, step, pitch))
    return events


def _render_stem(label: str, duration: float, sample_rate: int, rng: np.random.Generator) -> np.ndarray:
    spec = INSTRUMENT_SPECS[label]
    n_samples = int(round(duration * sample_rate))
    buffer = np.zeros(n_samples)
    for start, length, pitch in _note_events(spec, duration, rng):
        begin = int(round(start * sample_rate))
        end = min(n_samples, int(round((start + length) * sample_rate)))
        if end <= begin:
            continue
        t = np.arange(end - begin) / sample_rate
        arg = pitch if label == 'drums' else _midi_to_hz(pitch)
        buffer[begin:end] += spec.voice(arg, t, length, rng)

    gap = min(rng.uniform(1.0, 2.5), duration / 4.0)
    gap_start = int(round(rng.uniform(0.0, duration - gap) * sample_rate))
    buffer[gap_start:gap_start + int(round(gap * sample_rate))] = 0.0

    peak = float(np.max(np.abs(buffer)))
    if peak > 0:
        buffer = buffer * (STEM_PEAK / peak)
    return quantize(buffer)


def quantize(samples: np.ndarray) -> np.ndarray:
    """Round to the 2^-24 grid used for exact mixing."""
    return np.round(np.asarray(samples, dtype=np.float64) / QUANTUM) * QUANTUM


def gen_synthetic_track(seed: int, n_stems: int, duration: float, sample_rate: int = SAMPLE_RATE,
                        labels: Optional[Sequence[str]] = None, track_id: Optional[str] = None) -> Track:
    """Generate a seeded multi-stem track.

    Args:
        seed: Track seed; the same seed gives a bit-identical track
        n_stems: Number of stems (distinct labels)
        duration: Seconds
        sample_rate: Hz
        labels: Explicit labels instead of a seeded draw
        track_id: Identifier; defaults to one derived from ``seed``

    Raises:
        ConfigurationError: If ``n_stems`` is below 2 or above the label vocabulary
    """
    if not 2 <= n_stems <= len(INSTRUMENTS):
        raise ConfigurationError(f"n_stems must be in [2, {len(INSTRUMENTS)}], got {n_stems}")
    if duration <= 0:
        raise ConfigurationError(f"duration must be positive, got {duration}")
    rng = np.random.default_rng(seed)
    if labels is None:
        labels = [str(label) for label in rng.choice(INSTRUMENTS, size=n_stems, replace=False)]
    elif len(labels) != n_stems or len(set(labels)) != n_stems:
        raise ConfigurationError(f"Need {n_stems} distinct labels, got {list(labels)}")
    stems = tuple(
        Stem(label, Waveform(_render_stem(label, duration, sample_rate, rng), sample_rate))
        for label in labels
    )
    return Track(track_id or f"track_{seed}", stems)


def generate_corpus(n_tracks: int, seed: int, min_stems: int, max_stems: int, duration: float,
                    sample_rate: int = SAMPLE_RATE) -> List[Track]:
    """Generate ``n_tracks`` tracks with stem counts drawn from [min_stems, max_stems]."""
    if n_tracks < 1:
        raise ConfigurationError(f"n_tracks must be >= 1, got {n_tracks}")
    rng = np.random.default_rng(seed)
    tracks = []
    for i in range(n_tracks):
        n_stems = int(rng.integers(min_stems, max_stems + 1))
        track_seed = int(rng.integers(2 ** 31))
        tracks.append(gen_synthetic_track(track_seed, n_stems, duration, sample_rate,
                                          track_id=f"track_{i:04d}"))
    logger.info(f"Generated {n_tracks} tracks ({duration:.1f} s, {min_stems}-{max_stems} stems)")
    return tracks


def save_corpus(tracks: Sequence[Track], out_dir: Union[str, Path]) -> Path:
    """Write stems as ``tracks/<id>/<label>.wav`` plus a ``tracks.jsonl`` index."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    index = out_dir / TRACKS_FILE
    try:
        with open(index, 'w', encoding='utf-8') as f:
            for track in tracks:
                stems = []
                for stem in track.stems:
                    rel = Path(TRACKS_SUBDIR) / track.track_id / f"{stem.label}.wav"
                    write_wav(out_dir / rel, stem.waveform, subtype='FLOAT')
                    stems.append({'label': stem.label, 'path': rel.as_posix()})
                record = {'track_id': track.track_id, 'stems': stems, 'sample_rate': track.sample_rate,
                          'n_samples': track.n_samples}
                f.write(json.dumps(record, sort_keys=True) + '\n')
    except OSError as e:
        raise AudioIOError(f"Could not write corpus index ({e})", str(index))
    return index


def load_corpus(corpus_dir: Union[str, Path], sample_rate: Optional[int] = None) -> List[Track]:
    """Read tracks written by :func:`save_corpus`."""
    corpus_dir = Path(corpus_dir)
    index = corpus_dir / TRACKS_FILE
    if not index.exists():
        raise AudioIOError("Corpus index not found", str(index))
    tracks = []
    with open(index, 'r', encoding='utf-8') as f:
        for line in f:
            if not line.strip():
                continue
            record = json.loads(line)
            stems = tuple(
                Stem(entry['label'], read_wav(corpus_dir / entry['path'], expected_rate=sample_rate))
                for entry in record['stems']
            )
            tracks.append(Track(record['track_id'], stems))
    return tracks

"""
Edit triplet construction: (instruction, condition audio, target audio).

For a chosen task, target stem and set of other stems, with clips cut at one
offset:

- add:     condition = mix(others),          target = mix(others + stem)
- remove:  condition = mix(others + stem),   target = mix(others)
- extract: condition = mix(others + stem),   target = stem
"""

import json
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from ..constants import (
    AUDIO_SUBDIR, CLIP_SECONDS, INSTRUCTION_TEMPLATES, MANIFEST_NAME, MAX_SILENCE_FRACTION,
    OFFSET_RETRY_CAP, SILENCE_FRAME_MS, SILENCE_RMS_THRESHOLD, TASKS,
)
from ..errors import AudioIOError, ConfigurationError, InputError, TrackSkipped
from ..media.audio_io import Waveform, write_wav
from ..utils.config import Config
from ..utils.logger import get_logger
from .synth import Track

logger = get_logger(__name__)

# Draw budget per requested record before giving up on a corpus
MAX_DRAWS_PER_RECORD = 10


@dataclass
class TripletConfig:
    """Clip length and silence rule (``datagen`` config section)."""
    clip_seconds: float = CLIP_SECONDS
    silence_frame_ms: float = SILENCE_FRAME_MS
    silence_rms_threshold: float = SILENCE_RMS_THRESHOLD
    max_silence_fraction: float = MAX_SILENCE_FRACTION
    offset_retry_cap: int = OFFSET_RETRY_CAP

    @classmethod
    def from_config(cls, config: Config) -> 'TripletConfig':
        section = config.section('datagen')
        return cls(**{f.name: section[f.name] for f in fields(cls)})


@dataclass(frozen=True)
class EditTriplet:
    """One training/evaluation unit plus the provenance of how it was cut."""
    instruction: str
    condition: Waveform
    target: Waveform
    task: str
    target_stem: str
    offset_seconds: float
    n_other_stems: int
    stem_clip: Waveform
    other_stems: Tuple[str, ...] = ()

    def __post_init__(self):
        if self.task not in TASKS:
            raise InputError(f"Unknown task: {self.task}")
        if len(self.condition) != len(self.target):
            raise InputError("Condition and target must have equal length")


def render_instruction(task: str, label: str) -> str:
    """Instruction text for ``task`` on stem ``label``."""
    if task not in INSTRUCTION_TEMPLATES:
        raise InputError(f"Unknown task: {task}")
    return INSTRUCTION_TEMPLATES[task].format(label=label)


def mix(stems: Sequence[Waveform]) -> Waveform:
    """Sample-wise sum; no clipping or normalisation.

    Raises:
        InputError: On an empty list or mismatched lengths or sample rates
    """
    if not stems:
        raise InputError("Cannot mix an empty list of stems")
    first = stems[0]
    for stem in stems[1:]:
        if len(stem) != len(first) or stem.sample_rate != first.sample_rate:
            raise InputError("Stems to mix must share length and sample rate")
    total = first.samples.copy()
    for stem in stems[1:]:
        total = total + stem.samples
    return Waveform(total, first.sample_rate)


def silence_fraction(waveform: Waveform, frame_ms: float = SILENCE_FRAME_MS,
                     rms_threshold: float = SILENCE_RMS_THRESHOLD) -> float:
    """Fraction of non-overlapping frames (the last one may be partial) with RMS below the threshold.

    Raises:
        InputError: On an empty waveform
    """
    if len(waveform) == 0:
        raise InputError("Cannot measure silence of an empty waveform")
    frame = max(1, int(round(waveform.sample_rate * frame_ms / 1000.0)))
    n_frames = math.ceil(len(waveform) / frame)
    silent = 0
    for i in range(n_frames):
        chunk = waveform.samples[i * frame:(i + 1) * frame]
        if np.sqrt(np.mean(chunk * chunk)) < rms_threshold:
            silent += 1
    return silent / n_frames


def sample_triplet(track: Track, rng: np.random.Generator, config: Optional[TripletConfig] = None) -> EditTriplet:
    """Draw one edit triplet from ``track``.

    Picks a task, a target stem and ``n`` other stems (``n`` uniform over
    0..k-1 for add and 1..k-1 otherwise, k = stem count), then draws clip
    offsets until the target stem clip is at most ``max_silence_fraction``
    silent.

    Raises:
        InputError: If the track has fewer than 2 stems
        ConfigurationError: If the clip is longer than the track
        TrackSkipped: If no acceptable offset was found within the retry cap
    """
    config = config or TripletConfig()
    k = len(track.stems)
    if k < 2:
        raise InputError(f"Track {track.track_id} needs at least 2 stems")
    clip_len = int(round(config.clip_seconds * track.sample_rate))
    if clip_len > track.n_samples:
        raise ConfigurationError(f"Clip of {clip_len} samples exceeds track of {track.n_samples}")

    task = str(rng.choice(TASKS))
    target_index = int(rng.integers(k))
    candidates = [i for i in range(k) if i != target_index]
    n_others = int(rng.integers(0, k)) if task == 'add' else int(rng.integers(1, k))
    others = sorted(int(i) for i in rng.choice(candidates, size=n_others, replace=False)) if n_others else []
    stem = track.stems[target_index]

    for attempt in range(config.offset_retry_cap):
        offset = int(rng.integers(0, track.n_samples - clip_len + 1))
        stem_clip = stem.waveform.clip(offset, clip_len)
        if silence_fraction(stem_clip, config.silence_frame_ms,
                            config.silence_rms_threshold) <= config.max_silence_fraction:
            break
    else:
        raise TrackSkipped(track.track_id, config.offset_retry_cap)

    other_clips = [track.stems[i].waveform.clip(offset, clip_len) for i in others]
    silence = Waveform.silence(clip_len, track.sample_rate)
    others_mix = mix(other_clips) if other_clips else silence
    full_mix = mix(other_clips + [stem_clip])

    if task == 'add':
        condition, target = others_mix, full_mix
    elif task == 'remove':
        condition, target = full_mix, others_mix
    else:
        condition, target = full_mix, stem_clip

    return EditTriplet(
        instruction=render_instruction(task, stem.label),
        condition=condition,
        target=target,
        task=task,
        target_stem=stem.label,
        offset_seconds=offset / track.sample_rate,
        n_other_stems=n_others,
        stem_clip=stem_clip,
        other_stems=tuple(track.stems[i].label for i in others),
    )


def iter_triplets(tracks: Sequence[Track], count: int, seed: int,
                  config: Optional[TripletConfig] = None) -> Iterator[Tuple[int, Track, EditTriplet]]:
    """Yield ``count`` (record_seed, track, triplet) draws; skipped tracks are redrawn.

    Each record has its own seed, so any record can be regenerated alone.

    Raises:
        InputError: If ``count`` < 1, there are no tracks, or too many draws are skipped
    """
    if count < 1:
        raise InputError(f"count must be >= 1, got {count}")
    if not tracks:
        raise InputError("No tracks to draw triplets from")
    rng = np.random.default_rng(seed)
    produced = draws = 0
    while produced < count:
        if draws >= count * MAX_DRAWS_PER_RECORD:
            raise InputError(f"Gave up after {draws} draws; corpus too silent for the clip settings")
        draws += 1
        track = tracks[int(rng.integers(len(tracks)))]
        record_seed = int(rng.integers(2 ** 31))
        try:
            triplet = sample_triplet(track, np.random.default_rng(record_seed), config)
        except TrackSkipped as e:
            logger.warning(str(e))
            continue
        produced += 1
        yield record_seed, track, triplet


def build_manifest(tracks: Sequence[Track], count: int, seed: int, out_dir: Union[str, Path],
                   config: Optional[TripletConfig] = None) -> Path:
    """Write ``count`` triplets as WAV pairs plus a line-delimited manifest.

    Audio goes to ``{out_dir}/audio/{id}_cond.wav`` and ``{id}_target.wav``;
    manifest paths are relative to ``out_dir``.

    Returns:
        Path: The manifest file

    Raises:
        AudioIOError: On write failures, with the failing path
    """
    out_dir = Path(out_dir)
    (out_dir / AUDIO_SUBDIR).mkdir(parents=True, exist_ok=True)
    manifest_path = out_dir / MANIFEST_NAME
    try:
        with open(manifest_path, 'w', encoding='utf-8') as f:
            for index, (record_seed, track, triplet) in enumerate(iter_triplets(tracks, count, seed, config)):
                record_id = f"{index:06d}"
                cond_rel = f"{AUDIO_SUBDIR}/{record_id}_cond.wav"
                target_rel = f"{AUDIO_SUBDIR}/{record_id}_target.wav"
                write_wav(out_dir / cond_rel, triplet.condition)
                write_wav(out_dir / target_rel, triplet.target)
                record = {
                    'id': record_id,
                    'task': triplet.task,
                    'instruction': triplet.instruction,
                    'condition_path': cond_rel,
                    'target_path': target_rel,
                    'target_stem': triplet.target_stem,
                    'n_other_stems': triplet.n_other_stems,
                    'offset_seconds': triplet.offset_seconds,
                    'seed': record_seed,
                    'track_id': track.track_id,
                }
                f.write(json.dumps(record, sort_keys=True) + '\n')
    except OSError as e:
        raise AudioIOError(f"Could not write manifest ({e})", str(manifest_path))
    logger.info(f"Wrote {count} triplets to {manifest_path}")
    return manifest_path


def describe_stems(labels: Sequence[str]) -> str:
    """Description text listing stems, e.g. ``drums and bass``."""
    return ' and '.join(labels)


def build_pretrain_manifest(tracks: Sequence[Track], count: int, seed: int, out_dir: Union[str, Path],
                            config: Optional[TripletConfig] = None) -> Path:
    """Write (description, waveform) clips for base pretraining.

    Each clip mixes a random non-empty subset of a track's stems; the
    description lists the stems present.
    """
    config = config or TripletConfig()
    if count < 1:
        raise InputError(f"count must be >= 1, got {count}")
    out_dir = Path(out_dir)
    (out_dir / AUDIO_SUBDIR).mkdir(parents=True, exist_ok=True)
    manifest_path = out_dir / MANIFEST_NAME
    rng = np.random.default_rng(seed)
    try:
        with open(manifest_path, 'w', encoding='utf-8') as f:
            for index in range(count):
                track = tracks[int(rng.integers(len(tracks)))]
                clip_len = int(round(config.clip_seconds * track.sample_rate))
                if clip_len > track.n_samples:
                    raise ConfigurationError(f"Clip of {clip_len} samples exceeds track of {track.n_samples}")
                n_stems = int(rng.integers(1, len(track.stems) + 1))
                chosen = sorted(int(i) for i in rng.choice(len(track.stems), size=n_stems, replace=False))
                offset = int(rng.integers(0, track.n_samples - clip_len + 1))
                audio = mix([track.stems[i].waveform.clip(offset, clip_len) for i in chosen])
                labels = [track.stems[i].label for i in chosen]
                record_id = f"{index:06d}"
                audio_rel = f"{AUDIO_SUBDIR}/{record_id}_mix.wav"
                write_wav(out_dir / audio_rel, audio)
                record = {
                    'id': record_id,
                    'description': describe_stems(labels),
                    'audio_path': audio_rel,
                    'stems': labels,
                    'offset_seconds': offset / track.sample_rate,
                    'track_id': track.track_id,
                }
                f.write(json.dumps(record, sort_keys=True) + '\n')
    except OSError as e:
        raise AudioIOError(f"Could not write manifest ({e})", str(manifest_path))
    logger.info(f"Wrote {count} pretraining clips to {manifest_path}")
    return manifest_path


def read_manifest(manifest_path: Union[str, Path]) -> List[Dict[str, Any]]:
    """Load manifest records; relative audio paths stay relative to the manifest directory."""
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / MANIFEST_NAME
    if not manifest_path.exists():
        raise AudioIOError("Manifest not found", str(manifest_path))
    records = []
    with open(manifest_path, 'r', encoding='utf-8') as f:
        for line_no, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise InputError(f"Bad manifest line {line_no} in {manifest_path}: {e}")
    return records

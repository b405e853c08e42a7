"""
Manifest-level evaluation of an edit model.

Per-triplet work (reading audio, running the model, per-pair metrics and
embedding) fans out over a :class:`BatchManager`; everything is reduced in
manifest order so reports are reproducible.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Protocol, Union

import numpy as np

from ..codec.rvq import CodebookStack, decode, encode, frame_features
from ..constants import SI_SDR_CAP_DB, SSIM_HOP, SSIM_WINDOW, TASKS
from ..data.triplets import read_manifest
from ..media.audio_io import Waveform, read_wav
from ..model.editor import InstructionEditor
from ..processing.batch_manager import BatchManager
from ..utils.logger import get_logger
from .metrics import CLAP_UNAVAILABLE, EmbeddingSetStats, capped, fad, kl_div, si_sdr, si_sdri, ssim

logger = get_logger(__name__)

# Tasks whose target is a stem of the condition; SI-SDR is reported only for these
SEPARATION_TASKS = ('remove', 'extract')

EmbeddingFn = Callable[[Waveform], np.ndarray]


@dataclass(frozen=True)
class EvalTriplet:
    record_id: str
    task: str
    instruction: str
    condition: Waveform
    target: Waveform


class EditModel(Protocol):
    """Anything that turns (condition, instruction) into an edited waveform."""

    def edit(self, triplet: EvalTriplet) -> Waveform:
        ...


class FusedEditModel:
    """Tokenize the condition, generate with the fused decoder, decode."""

    name = 'fused'

    def __init__(self, editor: InstructionEditor, stack: CodebookStack, temperature: float = 0.0,
                 top_k: int = 0, seed: int = 0, name: Optional[str] = None):
        self.editor = editor
        self.stack = stack
        self.temperature = temperature
        self.top_k = top_k
        self.seed = seed
        if name:
            self.name = name

    def edit(self, triplet: EvalTriplet) -> Waveform:
        grid = encode(triplet.condition, self.stack)
        edited = self.editor.generate_edit(grid, triplet.instruction, self.temperature, self.top_k, self.seed)
        return fit_length(decode(edited, self.stack), len(triplet.condition))


class CopyConditionModel:
    """Baseline that returns its input unchanged."""

    name = 'copy'

    def edit(self, triplet: EvalTriplet) -> Waveform:
        return triplet.condition


class OracleModel:
    """Upper bound that returns the ground-truth target."""

    name = 'oracle'

    def edit(self, triplet: EvalTriplet) -> Waveform:
        return triplet.target


class CodecEmbedding:
    """Codec frame features as the embedding for FAD and KL."""

    name = 'codec_frame_features'

    def __init__(self, stack: CodebookStack):
        self.analysis = stack.analysis

    def __call__(self, waveform: Waveform) -> np.ndarray:
        return frame_features(waveform, self.analysis)


def fit_length(waveform: Waveform, n_samples: int) -> Waveform:
    """Truncate or zero-pad to ``n_samples``."""
    samples = waveform.samples[:n_samples]
    if len(samples) < n_samples:
        samples = np.pad(samples, (0, n_samples - len(samples)))
    return Waveform(samples, waveform.sample_rate)


@dataclass
class TripletScores:
    record_id: str
    task: str
    ssim: float
    si_sdr: Optional[float]
    si_sdri: Optional[float]
    estimate_features: np.ndarray
    target_features: np.ndarray


@dataclass
class TaskMetrics:
    """Aggregates for one task; SI-SDR fields stay None for ``add``."""
    count: int = 0
    fad: Optional[float] = None
    kl: Optional[float] = None
    ssim: Optional[float] = None
    si_sdr: Optional[float] = None
    si_sdri: Optional[float] = None
    clap: str = CLAP_UNAVAILABLE

    def to_dict(self) -> Dict[str, Any]:
        return {'count': self.count, 'fad': self.fad, 'kl': self.kl, 'ssim': self.ssim,
                'si_sdr': self.si_sdr, 'si_sdri': self.si_sdri, 'clap': self.clap}


@dataclass
class MetricsReport:
    model: str
    tasks: Dict[str, TaskMetrics]
    missing: List[str] = field(default_factory=list)
    failed: Dict[str, str] = field(default_factory=dict)
    embedding: str = CodecEmbedding.name
    config: Dict[str, Any] = field(default_factory=dict)

    @property
    def count(self) -> int:
        return sum(t.count for t in self.tasks.values())

    def to_dict(self) -> Dict[str, Any]:
        return {
            'model': self.model,
            'embedding': self.embedding,
            'count': self.count,
            'tasks': {task: metrics.to_dict() for task, metrics in self.tasks.items()},
            'missing': list(self.missing),
            'failed': dict(self.failed),
            'config': self.config,
        }


def score_triplet(triplet: EvalTriplet, estimate: Waveform, embed: EmbeddingFn,
                  cap: float = SI_SDR_CAP_DB, window: int = SSIM_WINDOW, hop: int = SSIM_HOP) -> TripletScores:
    estimate = fit_length(estimate, len(triplet.target))
    separation = triplet.task in SEPARATION_TASKS
    return TripletScores(
        record_id=triplet.record_id,
        task=triplet.task,
        ssim=ssim(estimate, triplet.target, window, hop),
        si_sdr=capped(si_sdr(estimate, triplet.target), cap) if separation else None,
        si_sdri=si_sdri(estimate, triplet.condition, triplet.target, cap) if separation else None,
        estimate_features=embed(estimate),
        target_features=embed(triplet.target),
    )


def aggregate(scores: List[TripletScores]) -> TaskMetrics:
    """Means of per-pair scores plus FAD and KL over pooled embeddings."""
    if not scores:
        return TaskMetrics()
    estimates = np.concatenate([s.estimate_features for s in scores])
    targets = np.concatenate([s.target_features for s in scores])
    metrics = TaskMetrics(
        count=len(scores),
        fad=fad(EmbeddingSetStats.from_features(estimates), EmbeddingSetStats.from_features(targets)),
        kl=kl_div(estimates, targets),
        ssim=float(np.mean([s.ssim for s in scores])),
    )
    if scores[0].si_sdr is not None:
        metrics.si_sdr = float(np.mean([s.si_sdr for s in scores]))
        metrics.si_sdri = float(np.mean([s.si_sdri for s in scores]))
    return metrics


def evaluate(model: EditModel, manifest_path: Union[str, Path], stack: CodebookStack,
             metrics_config: Optional[Dict[str, Any]] = None, embedding_fn: Optional[EmbeddingFn] = None,
             run_config: Optional[Dict[str, Any]] = None, workers: int = 1) -> MetricsReport:
    """Run ``model`` over every triplet of a manifest and build the per-task report.

    Records whose audio files are absent are listed under ``missing``; records
    that fail while scoring are listed under ``failed``. Neither stops the run.
    """
    metrics_config = metrics_config or {}
    manifest_path = Path(manifest_path)
    manifest_dir = manifest_path if manifest_path.is_dir() else manifest_path.parent
    embed = embedding_fn or CodecEmbedding(stack)
    cap = metrics_config.get('si_sdr_cap_db', SI_SDR_CAP_DB)
    window = metrics_config.get('ssim_window', SSIM_WINDOW)
    hop = metrics_config.get('ssim_hop', SSIM_HOP)

    records, missing = [], []
    for record in read_manifest(manifest_path):
        paths = [manifest_dir / record['condition_path'], manifest_dir / record['target_path']]
        if all(p.exists() for p in paths):
            records.append(record)
        else:
            logger.warning(f"Missing audio for triplet {record['id']}")
            missing.append(record['id'])

    def run(record: Dict[str, Any]) -> TripletScores:
        triplet = EvalTriplet(
            record['id'], record['task'], record['instruction'],
            read_wav(manifest_dir / record['condition_path'], expected_rate=stack.sample_rate),
            read_wav(manifest_dir / record['target_path'], expected_rate=stack.sample_rate),
        )
        return score_triplet(triplet, model.edit(triplet), embed, cap, window, hop)

    manager = BatchManager(max_concurrent=workers, show_progress=workers > 1,
                           on_failed=lambda key, error: logger.warning(f"Scoring failed for triplet {key}: {error}"))
    results = manager.process(run, [(r['id'], r) for r in records])

    by_task: Dict[str, List[TripletScores]] = {task: [] for task in TASKS}
    for scores in results:
        if scores is not None:
            by_task[scores.task].append(scores)
    report = MetricsReport(
        model=getattr(model, 'name', type(model).__name__),
        tasks={task: aggregate(by_task[task]) for task in TASKS},
        missing=missing,
        failed=dict(manager.failures()),
        embedding=getattr(embed, 'name', type(embed).__name__),
        config=run_config or {},
    )
    logger.info(f"Evaluated {report.count} triplets for '{report.model}' "
                f"({len(missing)} missing, {len(report.failed)} failed)")
    return report

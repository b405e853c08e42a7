"""Tokenized views of triplet and pretraining manifests."""

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Union

import numpy as np
import torch

from ..cache_utils import TokenCache
from ..codec.rvq import CodebookStack
from ..errors import InputError
from ..processing.batch_manager import BatchManager
from ..utils.logger import get_logger
from .triplets import read_manifest

logger = get_logger(__name__)


@dataclass(frozen=True)
class TripletExample:
    """Tokenized triplet; condition and target are (N, T) with equal T."""
    record_id: str
    task: str
    instruction: str
    condition: np.ndarray
    target: np.ndarray


@dataclass
class TripletBatch:
    """Stacked (B, N, T) grids and their instructions."""
    condition: torch.Tensor
    target: torch.Tensor
    instructions: List[str]
    tasks: List[str]

    def __len__(self) -> int:
        return int(self.target.shape[0])


@dataclass(frozen=True)
class PretrainExample:
    """Tokenized description clip."""
    record_id: str
    description: str
    tokens: np.ndarray


def _tokenize_records(records, manifest_dir: Path, keys: Sequence[str], stack: CodebookStack,
                      cache: TokenCache, workers: int, kind: str):
    """Tokenize the audio fields ``keys`` of every record on a thread pool.

    Returns the per-record grids (None where a file failed) and the failures.
    """
    def tokenize(record):
        return [cache.tokens_for(manifest_dir / record[key], stack).tokens for key in keys]

    manager = BatchManager(max_concurrent=workers,
                           on_failed=lambda key, error: logger.warning(f"Skipping {kind} {key}: {error}"))
    results = manager.process(tokenize, [(record['id'], record) for record in records])
    return results, manager.failures()


class TripletDataset:
    """In-memory tokenized triplets."""

    def __init__(self, examples: Sequence[TripletExample], missing: Optional[List[str]] = None):
        self.examples = list(examples)
        self.missing = list(missing or [])

    @classmethod
    def from_manifest(cls, manifest_path: Union[str, Path], stack: CodebookStack,
                      cache: Optional[TokenCache] = None, workers: int = 1) -> 'TripletDataset':
        """Tokenize a triplet manifest; records with unreadable audio are skipped and listed."""
        manifest_path = Path(manifest_path)
        records = read_manifest(manifest_path)
        manifest_dir = manifest_path if manifest_path.is_dir() else manifest_path.parent
        results, failures = _tokenize_records(records, manifest_dir, ('condition_path', 'target_path'),
                                              stack, cache or TokenCache(), workers, 'triplet')
        examples = []
        for record, grids in zip(records, results):
            if grids is None:
                continue
            condition, target = grids
            length = min(condition.shape[1], target.shape[1])
            examples.append(TripletExample(record['id'], record['task'], record['instruction'],
                                           condition[:, :length], target[:, :length]))
        if not examples:
            raise InputError(f"No usable triplets in {manifest_path}")
        logger.info(f"Loaded {len(examples)} triplets from {manifest_path}")
        return cls(examples, sorted(failures))

    def __len__(self) -> int:
        return len(self.examples)

    def __getitem__(self, index: int) -> TripletExample:
        return self.examples[index]

    def batch(self, indices: Sequence[int]) -> TripletBatch:
        chosen = [self.examples[i] for i in indices]
        return TripletBatch(
            condition=torch.as_tensor(np.stack([e.condition for e in chosen]), dtype=torch.long),
            target=torch.as_tensor(np.stack([e.target for e in chosen]), dtype=torch.long),
            instructions=[e.instruction for e in chosen],
            tasks=[e.task for e in chosen],
        )

    def sample_batch(self, rng: np.random.Generator, batch_size: int) -> TripletBatch:
        """Batch of ``batch_size`` examples drawn with replacement."""
        return self.batch([int(i) for i in rng.integers(len(self), size=batch_size)])

    def iter_batches(self, batch_size: int) -> Iterator[TripletBatch]:
        """Sequential batches covering every example once."""
        for start in range(0, len(self), batch_size):
            yield self.batch(range(start, min(start + batch_size, len(self))))


class PretrainDataset:
    """In-memory tokenized (description, clip) pairs."""

    def __init__(self, examples: Sequence[PretrainExample]):
        if not examples:
            raise InputError("Pretraining corpus is empty")
        self.examples = list(examples)

    @classmethod
    def from_manifest(cls, manifest_path: Union[str, Path], stack: CodebookStack,
                      cache: Optional[TokenCache] = None, workers: int = 1) -> 'PretrainDataset':
        manifest_path = Path(manifest_path)
        records = read_manifest(manifest_path)
        manifest_dir = manifest_path if manifest_path.is_dir() else manifest_path.parent
        results, failures = _tokenize_records(records, manifest_dir, ('audio_path',), stack,
                                              cache or TokenCache(), workers, 'clip')
        return cls([PretrainExample(r['id'], r['description'], grids[0])
                    for r, grids in zip(records, results) if grids is not None])

    def __len__(self) -> int:
        return len(self.examples)

    def __getitem__(self, index: int) -> PretrainExample:
        return self.examples[index]

    def batch(self, indices: Sequence[int]):
        """(B, N, T) tokens and descriptions."""
        chosen = [self.examples[i] for i in indices]
        length = min(e.tokens.shape[1] for e in chosen)
        tokens = torch.as_tensor(np.stack([e.tokens[:, :length] for e in chosen]), dtype=torch.long)
        return tokens, [e.description for e in chosen]

    def sample_batch(self, rng: np.random.Generator, batch_size: int):
        return self.batch([int(i) for i in rng.integers(len(self), size=batch_size)])

"""
Cache utilities for tokenized audio.

Token grids are stored as ``.npy`` files keyed by the SHA-256 of the source
WAV bytes together with the codebook digest, so a WAV is tokenized once per
codebook stack.
"""

import hashlib
import json
import threading
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np

from .codec.rvq import CodebookStack, TokenGrid, encode
from .media.audio_io import read_wav
from .utils.logger import get_logger

logger = get_logger(__name__)


def file_digest(path: Union[str, Path], chunk_size: int = 1 << 20) -> str:
    """SHA-256 of a file's bytes."""
    h = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(chunk_size), b''):
            h.update(chunk)
    return h.hexdigest()


class TokenCache:
    """Thread-safe on-disk cache of token grids."""

    def __init__(self, cache_dir: Optional[Union[str, Path]] = None):
        """Initialize cache.

        Args:
            cache_dir: Directory for cached grids; caching is disabled when None
        """
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self._lock = threading.Lock()
        self.metadata: Dict[str, Dict[str, Any]] = {}
        self.hits = 0
        self.misses = 0
        if self.cache_dir is not None:
            self.cache_dir.mkdir(parents=True, exist_ok=True)
            self.metadata_file = self.cache_dir / 'metadata.json'
            self._load_metadata()

    def _load_metadata(self):
        """Load cache metadata from disk."""
        try:
            if self.metadata_file.exists():
                with open(self.metadata_file, 'r', encoding='utf-8') as f:
                    self.metadata = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            logger.error(f"Error loading cache metadata: {e}")
            self.metadata = {}

    def _save_metadata(self):
        """Save cache metadata to disk."""
        try:
            with open(self.metadata_file, 'w', encoding='utf-8') as f:
                json.dump(self.metadata, f, sort_keys=True, indent=2)
        except OSError as e:
            logger.error(f"Error saving cache metadata: {e}")

    @staticmethod
    def _get_cache_key(wav_digest: str, stack_digest: str) -> str:
        return hashlib.sha256(f"{wav_digest}|{stack_digest}".encode()).hexdigest()

    def _get_cache_path(self, cache_key: str) -> Path:
        return self.cache_dir / f"{cache_key}.npy"

    def tokens_for(self, wav_path: Union[str, Path], stack: CodebookStack) -> TokenGrid:
        """Tokenize a WAV file, reusing a cached grid when available.

        Args:
            wav_path: Source WAV
            stack: Codebooks used for tokenization

        Returns:
            TokenGrid: Tokens for the file
        """
        if self.cache_dir is None:
            return encode(read_wav(wav_path, expected_rate=stack.sample_rate), stack)

        cache_key = self._get_cache_key(file_digest(wav_path), stack.digest())
        cache_path = self._get_cache_path(cache_key)
        with self._lock:
            cached = cache_key in self.metadata and cache_path.exists()
        if cached:
            try:
                tokens = np.load(cache_path)
                with self._lock:
                    self.hits += 1
                return TokenGrid(tokens, stack.frame_rate, stack.codebook_size)
            except (OSError, ValueError) as e:
                logger.warning(f"Discarding unreadable cache entry {cache_path}: {e}")

        grid = encode(read_wav(wav_path, expected_rate=stack.sample_rate), stack)
        with self._lock:
            self.misses += 1
            np.save(cache_path, grid.tokens)
            self.metadata[cache_key] = {
                'source': str(wav_path),
                'codebooks': stack.digest(),
                'shape': list(grid.tokens.shape),
            }
            self._save_metadata()
        return grid

    def clear(self):
        """Clear entire cache."""
        if self.cache_dir is None:
            return
        with self._lock:
            for cache_key in list(self.metadata):
                path = self._get_cache_path(cache_key)
                if path.exists():
                    path.unlink()
            self.metadata = {}
            self._save_metadata()

    def get_stats(self) -> Dict[str, Any]:
        """Get cache statistics."""
        return {
            'entry_count': len(self.metadata),
            'hits': self.hits,
            'misses': self.misses,
            'cache_dir': str(self.cache_dir) if self.cache_dir else None,
        }

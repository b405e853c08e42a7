import json

import numpy as np
import pytest

from modules.cache_utils import TokenCache, file_digest
from modules.codec.rvq import encode
from modules.media.audio_io import write_wav


@pytest.fixture
def wav_path(tmp_path, tracks):
    return write_wav(tmp_path / 'stem.wav', tracks[0].stems[0].waveform)


def test_disabled_cache_encodes_directly(wav_path, stack, tracks):
    cache = TokenCache()
    grid = cache.tokens_for(wav_path, stack)
    assert np.array_equal(grid.tokens, encode(tracks[0].stems[0].waveform, stack).tokens)
    assert cache.get_stats()['cache_dir'] is None


def test_second_lookup_hits(tmp_path, wav_path, stack):
    cache = TokenCache(tmp_path / 'cache')
    first = cache.tokens_for(wav_path, stack)
    second = cache.tokens_for(wav_path, stack)
    assert np.array_equal(first.tokens, second.tokens)
    assert second.codebook_size == stack.codebook_size
    assert cache.get_stats() == {'entry_count': 1, 'hits': 1, 'misses': 1, 'cache_dir': str(tmp_path / 'cache')}


def test_metadata_persists(tmp_path, wav_path, stack):
    TokenCache(tmp_path / 'cache').tokens_for(wav_path, stack)
    reopened = TokenCache(tmp_path / 'cache')
    reopened.tokens_for(wav_path, stack)
    assert reopened.hits == 1 and reopened.misses == 0
    metadata = json.loads((tmp_path / 'cache' / 'metadata.json').read_text())
    entry = next(iter(metadata.values()))
    assert entry['codebooks'] == stack.digest()
    assert entry['shape'] == [stack.n_codebooks, 150]


def test_other_codebooks_miss(tmp_path, wav_path, stack):
    cache = TokenCache(tmp_path / 'cache')
    cache.tokens_for(wav_path, stack)
    cache.tokens_for(wav_path, stack.truncated(1))
    assert cache.misses == 2


def test_changed_file_misses(tmp_path, wav_path, stack, tracks):
    cache = TokenCache(tmp_path / 'cache')
    cache.tokens_for(wav_path, stack)
    write_wav(wav_path, tracks[1].stems[0].waveform)
    cache.tokens_for(wav_path, stack)
    assert cache.misses == 2 and cache.hits == 0


def test_unreadable_entry_is_rebuilt(tmp_path, wav_path, stack):
    cache = TokenCache(tmp_path / 'cache')
    expected = cache.tokens_for(wav_path, stack).tokens
    for entry in (tmp_path / 'cache').glob('*.npy'):
        entry.write_bytes(b'garbage')
    assert np.array_equal(cache.tokens_for(wav_path, stack).tokens, expected)
    assert cache.misses == 2


def test_clear(tmp_path, wav_path, stack):
    cache = TokenCache(tmp_path / 'cache')
    cache.tokens_for(wav_path, stack)
    cache.clear()
    assert cache.get_stats()['entry_count'] == 0
    assert not list((tmp_path / 'cache').glob('*.npy'))


def test_file_digest(tmp_path):
    (tmp_path / 'a').write_bytes(b'abc')
    assert file_digest(tmp_path / 'a') == 'ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad'

"""Shared fixtures: tiny configurations, seeded tracks and trained codebooks."""

import numpy as np
import pytest
import torch

from modules.codec.rvq import CodecConfig, build_codebook_stack
from modules.data.synth import gen_synthetic_track
from modules.data.triplets import TripletConfig
from modules.model.editor import InstructionEditor
from modules.model.token_lm import ModelConfig, TokenLM
from modules.utils.config import Config, save_config

TINY_OVERRIDES = {
    'codec.n_codebooks': 2,
    'codec.codebook_size': 16,
    'codec.feature_dim': 16,
    'codec.kmeans_max_iter': 20,
    'model.n_layers': 2,
    'model.d_model': 16,
    'model.n_heads': 2,
    'model.ffn_dim': 32,
    'model.d_text': 16,
    'model.text_layers': 1,
    'model.text_heads': 2,
    'model.text_ffn_dim': 32,
    'model.max_text_tokens': 8,
    'fusion.t_max': 50,
    'lora.rank': 2,
    'datagen.track_seconds': 3.0,
    'datagen.clip_seconds': 1.0,
    'trainer.batch_size': 2,
    'trainer.grad_accumulation': 2,
    'trainer.warmup_steps': 2,
    'trainer.total_steps': 6,
    'trainer.val_every': 3,
    'trainer.checkpoint_every': 3,
    'trainer.log_every': 1,
    'pretrain.steps': 4,
    'pretrain.warmup_steps': 1,
    'pretrain.batch_size': 2,
    'metrics.workers': 1,
}


@pytest.fixture
def tiny_config():
    """Desk configuration shrunk for fast tests."""
    config = Config()
    config.update(TINY_OVERRIDES)
    return config


@pytest.fixture
def model_config(tiny_config):
    return ModelConfig.from_config(tiny_config)


@pytest.fixture
def base_model(model_config):
    return TokenLM.build(model_config, seed=0)


@pytest.fixture
def editor(base_model, tiny_config):
    return InstructionEditor.attach(base_model, tiny_config, seed=0)


@pytest.fixture
def randomized_editor(editor):
    """Editor with nonzero gates and LoRA B factors, so every adapter path is active."""
    generator = torch.Generator().manual_seed(7)
    with torch.no_grad():
        editor.fusion.gates.copy_(torch.randn(editor.fusion.gates.shape, generator=generator))
        for pair in list(editor.lora.q) + list(editor.lora.v):
            pair.B.copy_(torch.randn(pair.B.shape, generator=generator) * 0.3)
    return editor


@pytest.fixture
def random_grids(model_config):
    """Target and condition token grids, (B=2, N, T=6)."""
    rng = np.random.default_rng(3)
    shape = (2, model_config.n_codebooks, 6)
    return (torch.as_tensor(rng.integers(model_config.codebook_size, size=shape)),
            torch.as_tensor(rng.integers(model_config.codebook_size, size=shape)))


@pytest.fixture(scope='session')
def tracks():
    """Three seeded 3-second tracks."""
    return [gen_synthetic_track(seed, n_stems=3, duration=3.0, track_id=f"track_{seed}")
            for seed in (11, 12, 13)]


@pytest.fixture(scope='session')
def codec_config():
    return CodecConfig(n_codebooks=2, codebook_size=16, feature_dim=16, kmeans_max_iter=20)


@pytest.fixture(scope='session')
def stack(tracks, codec_config):
    waveforms = [stem.waveform for track in tracks for stem in track.stems]
    return build_codebook_stack(waveforms, codec_config, seed=0)


@pytest.fixture
def triplet_config():
    return TripletConfig(clip_seconds=1.0)


@pytest.fixture(scope='session')
def tiny_config_file(tmp_path_factory):
    """The tiny configuration written as a JSON file for ``--config``."""
    config = Config()
    config.update(TINY_OVERRIDES)
    path = tmp_path_factory.mktemp('config') / 'tiny.json'
    save_config(config, path)
    return path

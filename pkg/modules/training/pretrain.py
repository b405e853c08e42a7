"""Text-conditioned next-token pretraining of the base model."""

import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch

from ..constants import GRAD_CLIP_NORM
from ..data.dataset import PretrainDataset
from ..errors import TrainingError
from ..model.token_lm import ModelConfig, TokenLM
from ..utils.config import Config
from ..utils.logger import get_logger
from .checkpoint import save_base_checkpoint
from .trainer import compute_loss, lr_at

logger = get_logger(__name__)


@dataclass
class PretrainConfig:
    steps: int = 2000
    learning_rate: float = 1e-3
    warmup_steps: int = 100
    batch_size: int = 8
    grad_clip_norm: float = GRAD_CLIP_NORM
    seed: int = 0

    @property
    def total_steps(self) -> int:
        return self.steps

    @classmethod
    def from_config(cls, config: Config, **overrides) -> 'PretrainConfig':
        values = config.section('pretrain')
        values['seed'] = config.get('seed', 0)
        values.update({k: v for k, v in overrides.items() if v is not None})
        values['warmup_steps'] = min(values['warmup_steps'], values['steps'])
        return cls(**values)


def pretrain_base(dataset: PretrainDataset, model_config: ModelConfig, cfg: PretrainConfig,
                  checkpoint_path: Optional[Union[str, Path]] = None,
                  log_path: Optional[Union[str, Path]] = None,
                  run_config: Optional[dict] = None) -> TokenLM:
    """Train a fresh base model on (description, clip) pairs.

    With ``cfg.steps == 0`` the seeded initialization is returned unchanged.
    The returned model is unfrozen; it is checkpointed when
    ``checkpoint_path`` is given.

    Raises:
        TrainingError: On a non-finite loss
    """
    model = TokenLM.build(model_config, cfg.seed).unfreeze()
    model.train()
    rng = np.random.default_rng(cfg.seed)
    optimizer = torch.optim.AdamW(model.parameters(), lr=lr_at(0, cfg))
    history = []
    log_file = open(log_path, 'a', encoding='utf-8') if log_path else None
    try:
        for step in range(1, cfg.steps + 1):
            started = time.perf_counter()
            tokens, descriptions = dataset.sample_batch(rng, cfg.batch_size)
            lr = lr_at(step, cfg)
            for group in optimizer.param_groups:
                group['lr'] = lr
            optimizer.zero_grad(set_to_none=True)
            loss = compute_loss(model.logits(tokens, model.encode_texts(descriptions)), tokens)
            if not torch.isfinite(loss):
                raise TrainingError(f"Non-finite pretraining loss at step {step}",
                                    {'step': step, 'lr': lr, 'descriptions': descriptions})
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip_norm)
            optimizer.step()
            record = {'step': step, 'loss': float(loss.item()), 'lr': lr,
                      'wall_ms': (time.perf_counter() - started) * 1000.0}
            history.append(record)
            if log_file:
                log_file.write(json.dumps(record, sort_keys=True) + '\n')
            if step % 50 == 0 or step == cfg.steps:
                logger.info(f"pretrain step {step}/{cfg.steps}: loss {record['loss']:.4f}")
    finally:
        if log_file:
            log_file.close()

    model.eval()
    if checkpoint_path:
        save_base_checkpoint(checkpoint_path, model, run_config or {}, cfg.steps,
                             [{'step': r['step'], 'loss': r['loss']} for r in history])
    return model

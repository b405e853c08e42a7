"""
Finetuning of the audio and text fusion adapters on triplet data.

The base model stays frozen; only ``fusion.*`` and ``lora.*`` tensors reach
the optimizer. Each optimizer step accumulates gradients over
``grad_accumulation`` micro-batches, clips the global norm and applies
AdamW with a linear-warmup cosine learning-rate schedule.
"""

import copy
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F

from ..constants import LOSS_MODES, TRAIN_LOG_NAME
from ..data.dataset import TripletBatch, TripletDataset
from ..errors import ConfigurationError, InputError, TrainingError
from ..model.editor import InstructionEditor
from ..model.token_lm import TokenLM
from ..utils.config import Config
from ..utils.logger import get_logger
from .checkpoint import (load_finetune_checkpoint, restore_rng, rng_state,
                         save_finetune_checkpoint)

logger = get_logger(__name__)

FINAL_CHECKPOINT = 'final.pt'


@dataclass
class TrainConfig:
    """Finetuning hyperparameters (config section ``trainer`` plus the global seed)."""
    learning_rate: float = 5e-3
    warmup_steps: int = 100
    total_steps: int = 2000
    batch_size: int = 8
    grad_accumulation: int = 4
    weight_decay: float = 0.01
    grad_clip_norm: float = 1.0
    loss_mode: str = 'cross_entropy'
    text_fusion_enabled: bool = True
    checkpoint_every: int = 500
    val_every: int = 100
    log_every: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.loss_mode not in LOSS_MODES:
            raise ConfigurationError(f"Unknown loss mode: {self.loss_mode}")
        if self.batch_size < 1 or self.grad_accumulation < 1:
            raise ConfigurationError("batch_size and grad_accumulation must be >= 1")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ConfigurationError("warmup_steps must lie in [0, total_steps]")

    @property
    def effective_batch(self) -> int:
        return self.batch_size * self.grad_accumulation

    @classmethod
    def from_config(cls, config: Config, **overrides) -> 'TrainConfig':
        values = config.section('trainer')
        values['seed'] = config.get('seed', 0)
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


@dataclass
class TrainState:
    """Mutable training state; the optimizer only knows trainable tensors."""
    step: int
    optimizer: torch.optim.Optimizer
    rng: np.random.Generator
    running_loss: Optional[float] = None
    history: List[Dict[str, Any]] = field(default_factory=list)
    last_checkpoint: Optional[str] = None


def compute_loss(logits: torch.Tensor, target: torch.Tensor, mode: str = 'cross_entropy',
                 embedding_tables: Optional[Sequence[torch.Tensor]] = None) -> torch.Tensor:
    """Scalar loss of ``logits`` (B, N, T, L) or (N, T, L) against ``target`` tokens.

    ``cross_entropy`` is the mean token negative log-likelihood. ``l2_embedding``
    is the mean squared error between the probability-weighted codebook
    embedding and the embedding of the target token; it needs one (L, d)
    table per codebook.

    Raises:
        ConfigurationError: If ``mode`` is unknown
        InputError: If shapes do not conform
    """
    target = torch.as_tensor(getattr(target, 'tokens', target), device=logits.device).long()
    if logits.dim() == 3:
        logits, target = logits.unsqueeze(0), target.reshape(1, *target.shape[-2:])
    if logits.shape[:3] != target.shape:
        raise InputError(f"Logits {tuple(logits.shape)} do not match target {tuple(target.shape)}")
    codebook_size = logits.shape[-1]

    if mode == 'cross_entropy':
        return F.cross_entropy(logits.reshape(-1, codebook_size), target.reshape(-1))
    if mode == 'l2_embedding':
        if embedding_tables is None or len(embedding_tables) != logits.shape[1]:
            raise ConfigurationError("l2_embedding loss needs one embedding table per codebook")
        probs = logits.softmax(dim=-1)
        errors = []
        for n, table in enumerate(embedding_tables):
            predicted = probs[:, n] @ table
            errors.append((predicted - table[target[:, n]]).pow(2).mean())
        return torch.stack(errors).mean()
    raise ConfigurationError(f"Unknown loss mode: {mode}")


def lr_at(step: int, cfg) -> float:
    """Linear warmup from 0 to ``cfg.learning_rate``, then cosine decay to 0 at ``cfg.total_steps``."""
    step = min(max(step, 0), cfg.total_steps)
    if step < cfg.warmup_steps:
        return cfg.learning_rate * step / cfg.warmup_steps
    if cfg.total_steps == cfg.warmup_steps:
        return cfg.learning_rate
    progress = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
    return cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * progress))


def _decays(name: str) -> bool:
    return 'linear_cond' in name or name.startswith('lora.')


def build_optimizer(editor: InstructionEditor, cfg: TrainConfig) -> torch.optim.AdamW:
    """AdamW over trainable tensors; weight decay on the linears and LoRA factors only."""
    params = editor.trainable_parameters()
    groups = [
        {'params': [p for n, p in params.items() if _decays(n)], 'weight_decay': cfg.weight_decay},
        {'params': [p for n, p in params.items() if not _decays(n)], 'weight_decay': 0.0},
    ]
    return torch.optim.AdamW([g for g in groups if g['params']], lr=lr_at(0, cfg))


def init_train_state(editor: InstructionEditor, cfg: TrainConfig) -> TrainState:
    return TrainState(step=0, optimizer=build_optimizer(editor, cfg), rng=np.random.default_rng(cfg.seed))


def _embedding_tables(base: TokenLM) -> List[torch.Tensor]:
    return [emb.weight for emb in base.token_embeddings]


def _batch_loss(editor: InstructionEditor, batch: TripletBatch, mode: str) -> torch.Tensor:
    logits = editor(batch.target, batch.condition, batch.instructions)
    tables = _embedding_tables(editor.base) if mode == 'l2_embedding' else None
    return compute_loss(logits, batch.target, mode, tables)


def accumulate_gradients(editor: InstructionEditor, micro_batches: Sequence[TripletBatch],
                         cfg: TrainConfig, step: int = 0) -> float:
    """Backpropagate the mean loss over ``micro_batches`` into ``.grad``; returns that mean.

    Raises:
        TrainingError: On a non-finite micro-batch loss
    """
    total = 0.0
    for index, batch in enumerate(micro_batches):
        loss = _batch_loss(editor, batch, cfg.loss_mode)
        if not torch.isfinite(loss):
            raise TrainingError(f"Non-finite loss at step {step}", {
                'step': step, 'micro_batch': index, 'loss': float(loss.item()),
                'instructions': list(batch.instructions),
                'gates': editor.fusion.gates.detach().cpu().tolist(),
            })
        (loss / len(micro_batches)).backward()
        total += float(loss.item()) / len(micro_batches)
    return total


def finetune_step(micro_batches: Sequence[TripletBatch], editor: InstructionEditor, state: TrainState,
                  cfg: TrainConfig) -> float:
    """One optimizer step over ``micro_batches``; returns the mean loss.

    Raises:
        TrainingError: On a non-finite loss or gradient norm
    """
    lr = lr_at(state.step + 1, cfg)
    for group in state.optimizer.param_groups:
        group['lr'] = lr
    state.optimizer.zero_grad(set_to_none=True)
    loss = accumulate_gradients(editor, micro_batches, cfg, state.step + 1)

    params = list(editor.trainable_parameters().values())
    if cfg.grad_clip_norm > 0:
        grad_norm = torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip_norm)
        if not torch.isfinite(grad_norm):
            raise TrainingError(f"Non-finite gradient norm at step {state.step + 1}", {
                'step': state.step + 1, 'loss': loss, 'lr': lr,
            })
    state.optimizer.step()
    state.step += 1
    state.running_loss = loss if state.running_loss is None else 0.95 * state.running_loss + 0.05 * loss
    return loss


def sample_micro_batches(dataset: TripletDataset, rng: np.random.Generator, cfg: TrainConfig) -> List[TripletBatch]:
    return [dataset.sample_batch(rng, cfg.batch_size) for _ in range(cfg.grad_accumulation)]


@torch.no_grad()
def evaluate_loss(editor: InstructionEditor, dataset: TripletDataset, loss_mode: str = 'cross_entropy',
                  batch_size: int = 8) -> float:
    """Teacher-forced loss averaged over every example of ``dataset``."""
    total, count = 0.0, 0
    for batch in dataset.iter_batches(batch_size):
        total += float(_batch_loss(editor, batch, loss_mode).item()) * len(batch)
        count += len(batch)
    return total / count


@torch.no_grad()
def token_accuracy(editor: InstructionEditor, dataset: TripletDataset, batch_size: int = 8) -> float:
    """Fraction of target tokens predicted exactly by the teacher-forced argmax."""
    correct, count = 0, 0
    for batch in dataset.iter_batches(batch_size):
        predicted = editor(batch.target, batch.condition, batch.instructions).argmax(dim=-1)
        correct += int((predicted == batch.target).sum().item())
        count += batch.target.numel()
    return correct / count


class Trainer:
    """Runs finetuning to ``cfg.total_steps`` with logging, validation and checkpoints."""

    def __init__(self, editor: InstructionEditor, train_set: TripletDataset, cfg: TrainConfig,
                 out_dir: Union[str, Path], val_set: Optional[TripletDataset] = None,
                 run_config: Optional[Dict[str, Any]] = None, state: Optional[TrainState] = None):
        if cfg.text_fusion_enabled != editor.text_fusion_enabled:
            raise ConfigurationError("text_fusion_enabled does not match the attached adapters")
        self.editor = editor
        self.train_set = train_set
        self.val_set = val_set
        self.cfg = cfg
        self.out_dir = Path(out_dir)
        self.run_config = run_config or {}
        self.state = state or init_train_state(editor, cfg)
        self.log_path = self.out_dir / TRAIN_LOG_NAME

    @classmethod
    def resume(cls, checkpoint: Union[str, Path], base: TokenLM, train_set: TripletDataset, cfg: TrainConfig,
               out_dir: Union[str, Path], val_set: Optional[TripletDataset] = None,
               run_config: Optional[Dict[str, Any]] = None) -> 'Trainer':
        """Continue a run from a finetune checkpoint."""
        editor, payload = load_finetune_checkpoint(checkpoint, base)
        state = init_train_state(editor, cfg)
        state.optimizer.load_state_dict(payload['optimizer'])
        state.rng = restore_rng(payload['rng'])
        state.step = payload['step']
        state.history = list(payload['history'])
        state.last_checkpoint = str(checkpoint)
        logger.info(f"Resuming from {checkpoint} at step {state.step}")
        return cls(editor, train_set, cfg, out_dir, val_set, run_config, state)

    def _log(self, record: Dict[str, Any]):
        with open(self.log_path, 'a', encoding='utf-8') as f:
            f.write(json.dumps(record, sort_keys=True) + '\n')

    def save_checkpoint(self, name: str) -> Path:
        path = save_finetune_checkpoint(
            self.out_dir / name, self.editor, self.run_config, self.state.step,
            optimizer_state=self.state.optimizer.state_dict(), rng_state=rng_state(self.state.rng),
            history=self.state.history)
        self.state.last_checkpoint = str(path)
        return path

    def validate(self) -> Optional[float]:
        """Validation loss computed on a snapshot of the current weights."""
        if self.val_set is None:
            return None
        snapshot = copy.deepcopy(self.editor)
        val_loss = evaluate_loss(snapshot, self.val_set, self.cfg.loss_mode, self.cfg.batch_size)
        record = {'step': self.state.step, 'val_loss': val_loss}
        self.state.history.append(record)
        self._log(record)
        logger.info(f"step {self.state.step}: val_loss {val_loss:.4f}")
        return val_loss

    def run(self) -> TrainState:
        """Train until ``cfg.total_steps``; the final checkpoint is always written."""
        self.out_dir.mkdir(parents=True, exist_ok=True)
        cfg = self.cfg
        logger.info(f"Finetuning {self.editor.trainable_count()} parameters for "
                    f"{cfg.total_steps - self.state.step} steps (effective batch {cfg.effective_batch})")
        while self.state.step < cfg.total_steps:
            started = time.perf_counter()
            batches = sample_micro_batches(self.train_set, self.state.rng, cfg)
            loss = finetune_step(batches, self.editor, self.state, cfg)
            step = self.state.step
            self._log({'step': step, 'loss': loss, 'lr': lr_at(step, cfg),
                       'wall_ms': (time.perf_counter() - started) * 1000.0})
            if cfg.log_every and step % cfg.log_every == 0:
                logger.info(f"step {step}/{cfg.total_steps}: loss {loss:.4f} "
                            f"(running {self.state.running_loss:.4f})")
            if cfg.val_every and step % cfg.val_every == 0:
                self.validate()
            if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                self.save_checkpoint(f"step_{step:06d}.pt")
        path = self.save_checkpoint(FINAL_CHECKPOINT)
        logger.info(f"Finetuning finished at step {self.state.step}; checkpoint {path}")
        return self.state

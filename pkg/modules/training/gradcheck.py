"""Finite-difference verification of the fused-forward gradients."""

from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np
import torch

from ..constants import INSTRUCTION_TEMPLATES
from ..model.audio_fusion import init_fusion
from ..model.editor import InstructionEditor
from ..model.text_fusion import init_lora
from ..model.token_lm import ModelConfig, TokenLM
from ..utils.logger import get_logger
from .trainer import compute_loss

logger = get_logger(__name__)

STEP = 1e-5
TOLERANCE = 1e-4


def tiny_model_config(n_layers: int = 2, d_model: int = 8) -> ModelConfig:
    """Smallest float64 configuration used for gradient checks."""
    return ModelConfig(n_codebooks=2, codebook_size=8, n_layers=n_layers, d_model=d_model, n_heads=2,
                       ffn_dim=2 * d_model, d_text=8, text_layers=1, text_heads=2, text_ffn_dim=16,
                       max_text_tokens=8, dtype='float64')


@dataclass
class GradCheckReport:
    """Maximum relative error per trainable tensor."""
    errors: Dict[str, float] = field(default_factory=dict)
    tolerance: float = TOLERANCE

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def to_dict(self) -> Dict:
        return {'max_rel_error': dict(self.errors), 'max_error': self.max_error,
                'tolerance': self.tolerance, 'passed': self.passed}


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    scale = max(float(analytic.abs().max()), float(numeric.abs().max()), 1e-12)
    return float((analytic - numeric).abs().max()) / scale


def grad_check(seed: int = 0, n_layers: int = 2, d_model: int = 8, length: int = 4, rank: int = 2,
               loss_mode: str = 'cross_entropy', randomize: bool = True,
               model_config: Optional[ModelConfig] = None) -> GradCheckReport:
    """Compare autograd against central differences for every trainable tensor.

    Args:
        seed: Seeds the base model, adapters and data
        n_layers: Decoder layers of the tiny model
        d_model: Width of the tiny model
        length: Frames per grid (also ``t_max``)
        rank: LoRA rank
        loss_mode: Loss passed to :func:`compute_loss`
        randomize: Draw gates and LoRA B factors away from zero first; with
            ``False`` the check runs at the zero-gate initialization
        model_config: Overrides the tiny float64 configuration
    """
    cfg = model_config or tiny_model_config(n_layers, d_model)
    base = TokenLM.build(cfg, seed)
    fusion = init_fusion(base, length, seed + 1, init_std=0.3)
    lora = init_lora(base, rank, seed + 2, init_std=0.3)
    editor = InstructionEditor(base, fusion, lora)

    generator = torch.Generator().manual_seed(seed + 3)
    if randomize:
        with torch.no_grad():
            fusion.gates.copy_(torch.randn(fusion.gates.shape, generator=generator, dtype=torch.float64))
            for pair in list(lora.q) + list(lora.v):
                pair.B.copy_(torch.randn(pair.B.shape, generator=generator, dtype=torch.float64) * 0.3)

    rng = np.random.default_rng(seed)
    target = torch.as_tensor(rng.integers(cfg.codebook_size, size=(1, cfg.n_codebooks, length)))
    condition = torch.as_tensor(rng.integers(cfg.codebook_size, size=(1, cfg.n_codebooks, length)))
    instruction = editor.encode_instructions(INSTRUCTION_TEMPLATES['add'].format(label='drums'))
    tables = [emb.weight for emb in base.token_embeddings] if loss_mode == 'l2_embedding' else None

    def loss_fn() -> torch.Tensor:
        return compute_loss(editor(target, condition, instruction), target, loss_mode, tables)

    params = editor.trainable_parameters()
    editor.zero_grad(set_to_none=True)
    loss_fn().backward()

    report = GradCheckReport()
    with torch.no_grad():
        for name, param in params.items():
            analytic = param.grad.detach().clone()
            numeric = torch.zeros_like(param)
            flat, flat_numeric = param.view(-1), numeric.view(-1)
            for i in range(flat.numel()):
                original = flat[i].item()
                flat[i] = original + STEP
                plus = loss_fn().item()
                flat[i] = original - STEP
                minus = loss_fn().item()
                flat[i] = original
                flat_numeric[i] = (plus - minus) / (2 * STEP)
            report.errors[name] = relative_error(analytic, numeric)
    logger.info(f"Gradient check over {len(report.errors)} tensors: max relative error {report.max_error:.2e}")
    return report

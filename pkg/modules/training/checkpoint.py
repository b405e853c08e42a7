"""
Checkpoint container.

A checkpoint is a ``torch.save`` dictionary holding a format version, the
resolved run configuration, a manifest that partitions tensor names into
``frozen`` and ``trainable`` groups, the tensors themselves and, for
finetuning runs, optimizer state, step counter, data RNG state and the
SHA-256 of the frozen base tensors it was trained against.
"""

import hashlib
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Union

import numpy as np
import torch

from ..constants import FORMAT_VERSION
from ..errors import ConfigurationError, InputError
from ..model.audio_fusion import AudioFusion
from ..model.editor import InstructionEditor
from ..model.text_fusion import LoraSet
from ..model.token_lm import ModelConfig, TokenLM
from ..utils.logger import get_logger

logger = get_logger(__name__)

KIND_BASE = 'base'
KIND_FINETUNE = 'finetune'


def tensor_digest(tensors: Mapping[str, torch.Tensor]) -> str:
    """SHA-256 over sorted tensor names, dtypes, shapes and bytes."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        tensor = tensors[name].detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(tensor.dtype).encode())
        h.update(str(tuple(tensor.shape)).encode())
        h.update(tensor.numpy().tobytes())
    return h.hexdigest()


def _cpu_state(tensors: Mapping[str, torch.Tensor]) -> Dict[str, torch.Tensor]:
    return {name: t.detach().cpu().clone() for name, t in tensors.items()}


def _write(path: Union[str, Path], payload: Dict[str, Any]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)
    logger.debug(f"Saved {payload['kind']} checkpoint to {path}")
    return path


def read_checkpoint(path: Union[str, Path], kind: Optional[str] = None) -> Dict[str, Any]:
    """Load and validate a checkpoint payload.

    Raises:
        InputError: If the file is missing or of the wrong kind
        ConfigurationError: If the format version is unsupported
    """
    path = Path(path)
    if not path.exists():
        raise InputError(f"Checkpoint not found: {path}")
    payload = torch.load(path, map_location='cpu', weights_only=True)
    if payload.get('version') != FORMAT_VERSION:
        raise ConfigurationError(f"Unsupported checkpoint version {payload.get('version')} in {path}")
    if kind is not None and payload.get('kind') != kind:
        raise InputError(f"{path} is a {payload.get('kind')} checkpoint, expected {kind}")
    return payload


def save_base_checkpoint(path: Union[str, Path], model: TokenLM, config: Dict[str, Any],
                         step: int = 0, history: Optional[list] = None) -> Path:
    """Save a pretrained base model; all of its tensors form the frozen group."""
    tensors = _cpu_state(model.state_dict())
    return _write(path, {
        'version': FORMAT_VERSION,
        'kind': KIND_BASE,
        'config': config,
        'model_config': model.config.to_dict(),
        'manifest': {'frozen': sorted(tensors), 'trainable': []},
        'tensors': tensors,
        'step': step,
        'history': history or [],
        'frozen_hash': tensor_digest(tensors),
    })


def load_base_checkpoint(path: Union[str, Path]) -> Tuple[TokenLM, Dict[str, Any]]:
    """Rebuild the base model from a checkpoint.

    Raises:
        ConfigurationError: If the stored tensors do not match the stored hash
    """
    payload = read_checkpoint(path, KIND_BASE)
    if tensor_digest(payload['tensors']) != payload['frozen_hash']:
        raise ConfigurationError(f"Base checkpoint {path} fails its integrity hash")
    model_config = ModelConfig.from_dict(payload['model_config'])
    model = TokenLM(model_config).to(model_config.torch_dtype)
    model.load_state_dict(payload['tensors'])
    return model, payload


def base_hash(model: TokenLM) -> str:
    return tensor_digest(model.state_dict())


def save_finetune_checkpoint(path: Union[str, Path], editor: InstructionEditor, config: Dict[str, Any],
                             step: int, optimizer_state: Optional[Dict[str, Any]] = None,
                             rng_state: Optional[Dict[str, Any]] = None,
                             history: Optional[list] = None) -> Path:
    """Save trainable tensors plus the state needed to resume training bit-exactly."""
    trainable = _cpu_state(editor.trainable_parameters())
    frozen_names = sorted(editor.frozen_parameters())
    lora = editor.lora
    return _write(path, {
        'version': FORMAT_VERSION,
        'kind': KIND_FINETUNE,
        'config': config,
        'model_config': editor.base.config.to_dict(),
        'adapters': {
            't_max': editor.fusion.t_max,
            'bottleneck': editor.fusion.bottleneck,
            'lora_rank': lora.rank if lora is not None else None,
            'lora_scale': lora.q[0].scale if lora is not None else None,
        },
        'manifest': {'frozen': frozen_names, 'trainable': sorted(trainable)},
        'tensors': trainable,
        'optimizer': optimizer_state or {},
        'step': step,
        'rng': rng_state or {},
        'history': history or [],
        'frozen_hash': base_hash(editor.base),
    })


def load_finetune_checkpoint(path: Union[str, Path], base: TokenLM) -> Tuple[InstructionEditor, Dict[str, Any]]:
    """Attach the adapters stored in ``path`` to ``base``.

    Raises:
        ConfigurationError: If ``base`` is not the model the adapters were trained on
    """
    payload = read_checkpoint(path, KIND_FINETUNE)
    if base_hash(base) != payload['frozen_hash']:
        raise ConfigurationError(f"Checkpoint {path} was trained against a different base model")
    adapters = payload['adapters']
    cfg = base.config
    fusion = AudioFusion(cfg.n_layers, cfg.d_model, adapters['t_max'], adapters['bottleneck']).to(base.dtype)
    lora = None
    if adapters['lora_rank'] is not None:
        lora = LoraSet(cfg.n_layers, cfg.d_model, cfg.d_text, adapters['lora_rank'],
                       adapters['lora_scale']).to(base.dtype)
    editor = InstructionEditor(base, fusion, lora)
    params = editor.trainable_parameters()
    if sorted(params) != sorted(payload['tensors']):
        raise ConfigurationError(f"Trainable tensors in {path} do not match the adapter layout")
    with torch.no_grad():
        for name, value in payload['tensors'].items():
            params[name].copy_(value)
    return editor, payload


def rng_state(rng: np.random.Generator) -> Dict[str, Any]:
    return rng.bit_generator.state


def restore_rng(state: Dict[str, Any]) -> np.random.Generator:
    rng = np.random.default_rng()
    rng.bit_generator.state = state
    return rng

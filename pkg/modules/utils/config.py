"""Configuration management utilities."""

import copy
import json
import os
from pathlib import Path
from typing import Dict, Any, Iterable, Mapping, Optional

from ..constants import (
    SAMPLE_RATE, FRAME_RATE, N_CODEBOOKS, CODEBOOK_SIZE, FEATURE_DIM, KMEANS_MAX_ITER,
    CLIP_SECONDS, SILENCE_FRAME_MS, SILENCE_RMS_THRESHOLD, MAX_SILENCE_FRACTION,
    OFFSET_RETRY_CAP, LEARNING_RATE, WARMUP_STEPS, TOTAL_STEPS, FULL_SCALE_TOTAL_STEPS,
    BATCH_SIZE, GRAD_ACCUMULATION, WEIGHT_DECAY, GRAD_CLIP_NORM, LOSS_MODES,
    SI_SDR_CAP_DB, SSIM_WINDOW, SSIM_HOP, MAX_TEXT_TOKENS, DEFAULT_WORK_DIR, ENV_PREFIX,
    FULL_SCALE_SAMPLE_RATE, FULL_SCALE_CODEBOOK_SIZE,
)
from ..errors import ConfigurationError

# Constants
CONFIG_FILE = "config.json"
DEFAULT_CONFIG: Dict[str, Any] = {
    'seed': 0,
    'codec': {
        'sample_rate': SAMPLE_RATE,
        'frame_rate': FRAME_RATE,
        'n_codebooks': N_CODEBOOKS,
        'codebook_size': CODEBOOK_SIZE,
        'feature_dim': FEATURE_DIM,
        'kmeans_max_iter': KMEANS_MAX_ITER,
        'reserve_zero_codeword': True,
        'max_training_frames': 20000,
    },
    'model': {
        'n_layers': 4,
        'd_model': 64,
        'n_heads': 4,
        'ffn_dim': 256,
        'd_text': 64,
        'text_layers': 2,
        'text_heads': 4,
        'text_ffn_dim': 128,
        'max_text_tokens': MAX_TEXT_TOKENS,
        'dtype': 'float32',
    },
    'fusion': {
        't_max': 250,
        'bottleneck': None,
        'init_std': 0.02,
    },
    'lora': {
        'rank': 8,
        'scale': 1.0,
        'init_std': 0.1,
    },
    'datagen': {
        'n_tracks': 64,
        'min_stems': 2,
        'max_stems': 4,
        'track_seconds': 12.0,
        'clip_seconds': CLIP_SECONDS,
        'silence_frame_ms': SILENCE_FRAME_MS,
        'silence_rms_threshold': SILENCE_RMS_THRESHOLD,
        'max_silence_fraction': MAX_SILENCE_FRACTION,
        'offset_retry_cap': OFFSET_RETRY_CAP,
        'n_triplets': 1000,
        'n_val_triplets': 64,
        'n_pretrain_clips': 256,
    },
    'pretrain': {
        'steps': 2000,
        'learning_rate': 1e-3,
        'warmup_steps': 100,
        'batch_size': 8,
    },
    'trainer': {
        'learning_rate': LEARNING_RATE,
        'warmup_steps': WARMUP_STEPS,
        'total_steps': TOTAL_STEPS,
        'batch_size': BATCH_SIZE,
        'grad_accumulation': GRAD_ACCUMULATION,
        'weight_decay': WEIGHT_DECAY,
        'grad_clip_norm': GRAD_CLIP_NORM,
        'loss_mode': 'cross_entropy',
        'text_fusion_enabled': True,
        'checkpoint_every': 500,
        'val_every': 100,
        'log_every': 10,
    },
    'metrics': {
        'ssim_window': SSIM_WINDOW,
        'ssim_hop': SSIM_HOP,
        'si_sdr_cap_db': SI_SDR_CAP_DB,
        'workers': 4,
        'temperature': 0.0,
        'top_k': 0,
    },
    'paths': {
        'work_dir': DEFAULT_WORK_DIR,
        'corpus_dir': '',
        'triplet_dir': '',
        'val_triplet_dir': '',
        'codec_path': '',
        'base_checkpoint': '',
        'finetune_dir': '',
        'report_dir': '',
        'cache_dir': '',
        'log_dir': '',
    },
}

# Keys whose value may legitimately be None
NULLABLE_KEYS = {'fusion.bottleneck'}

FULL_SCALE_OVERRIDES: Dict[str, Any] = {
    'codec.sample_rate': FULL_SCALE_SAMPLE_RATE,
    'codec.codebook_size': FULL_SCALE_CODEBOOK_SIZE,
    'model.n_layers': 48,
    'model.d_model': 2048,
    'model.n_heads': 32,
    'model.ffn_dim': 8192,
    'model.d_text': 768,
    'model.text_layers': 12,
    'model.text_heads': 12,
    'model.text_ffn_dim': 3072,
    'model.max_text_tokens': 64,
    'fusion.t_max': 250,
    'trainer.total_steps': FULL_SCALE_TOTAL_STEPS,
}


def _flatten(data: Mapping[str, Any], prefix: str = '') -> Dict[str, Any]:
    """Flatten a nested mapping into dot-notation keys."""
    flat = {}
    for key, value in data.items():
        full_key = f"{prefix}{key}"
        if isinstance(value, Mapping):
            flat.update(_flatten(value, full_key + '.'))
        else:
            flat[full_key] = value
    return flat


class Config:
    """Configuration manager class."""

    def __init__(self, data: Optional[Dict[str, Any]] = None):
        """Initialize configuration with optional data.

        Args:
            data (Dict[str, Any], optional): Full configuration; defaults are used when None
        """
        self.data = copy.deepcopy(data) if data is not None else copy.deepcopy(DEFAULT_CONFIG)
        self._validate()

    def _validate(self):
        """Validate configuration data against the default schema."""
        schema = _flatten(DEFAULT_CONFIG)
        flat = _flatten(self.data)

        unknown = sorted(set(flat) - set(schema))
        if unknown:
            raise ConfigurationError(f"Unknown configuration keys: {', '.join(unknown)}")
        missing = sorted(set(schema) - set(flat))
        if missing:
            raise ConfigurationError(f"Missing configuration keys: {', '.join(missing)}")

        for key, default in schema.items():
            value = flat[key]
            if value is None and key in NULLABLE_KEYS:
                continue
            if isinstance(default, bool):
                ok = isinstance(value, bool)
            elif isinstance(default, int):
                ok = isinstance(value, int) and not isinstance(value, bool)
            elif isinstance(default, float):
                ok = isinstance(value, (int, float)) and not isinstance(value, bool)
            elif isinstance(default, str):
                ok = isinstance(value, str)
            else:
                ok = isinstance(value, int) and not isinstance(value, bool)
            if not ok:
                raise ConfigurationError(f"Invalid value for {key}: {value!r}")

        self._validate_ranges(flat)

    @staticmethod
    def _validate_ranges(flat: Dict[str, Any]):
        """Validate cross-field constraints."""
        positive = [
            'codec.sample_rate', 'codec.frame_rate', 'codec.n_codebooks', 'codec.codebook_size',
            'codec.feature_dim', 'model.n_layers', 'model.d_model', 'model.n_heads',
            'model.d_text', 'fusion.t_max', 'lora.rank', 'trainer.batch_size',
            'trainer.grad_accumulation', 'pretrain.batch_size', 'metrics.workers',
        ]
        for key in positive:
            if flat[key] <= 0:
                raise ConfigurationError(f"{key} must be positive, got {flat[key]}")

        if flat['codec.sample_rate'] % flat['codec.frame_rate'] != 0:
            raise ConfigurationError("codec.sample_rate must be a multiple of codec.frame_rate")
        if flat['codec.feature_dim'] > flat['codec.sample_rate'] // flat['codec.frame_rate']:
            raise ConfigurationError("codec.feature_dim cannot exceed the frame window length")
        if flat['model.d_model'] % flat['model.n_heads'] != 0:
            raise ConfigurationError("model.d_model must be divisible by model.n_heads")
        if flat['model.d_text'] % flat['model.text_heads'] != 0:
            raise ConfigurationError("model.d_text must be divisible by model.text_heads")
        if flat['model.dtype'] not in ('float32', 'float64'):
            raise ConfigurationError(f"Unsupported model.dtype: {flat['model.dtype']}")
        if flat['fusion.bottleneck'] is not None and flat['fusion.bottleneck'] < 1:
            raise ConfigurationError("fusion.bottleneck must be >= 1 when set")
        if flat['trainer.loss_mode'] not in LOSS_MODES:
            raise ConfigurationError(f"Unknown trainer.loss_mode: {flat['trainer.loss_mode']}")
        if flat['trainer.warmup_steps'] > flat['trainer.total_steps']:
            raise ConfigurationError("trainer.warmup_steps cannot exceed trainer.total_steps")
        if not 2 <= flat['datagen.min_stems'] <= flat['datagen.max_stems']:
            raise ConfigurationError("datagen stem bounds must satisfy 2 <= min_stems <= max_stems")
        if flat['datagen.clip_seconds'] > flat['datagen.track_seconds']:
            raise ConfigurationError("datagen.clip_seconds cannot exceed datagen.track_seconds")

    def get(self, key: str, default: Any = None) -> Any:
        """Get configuration value by key.

        Args:
            key (str): Configuration key (supports dot notation)
            default (Any): Default value if key not found

        Returns:
            Any: Configuration value
        """
        parts = key.split('.')
        value = self.data
        for part in parts:
            if isinstance(value, dict) and part in value:
                value = value[part]
            else:
                return default
        return value

    def section(self, name: str) -> Dict[str, Any]:
        """Return a copy of one top-level section."""
        if name not in self.data or not isinstance(self.data[name], dict):
            raise ConfigurationError(f"Unknown configuration section: {name}")
        return copy.deepcopy(self.data[name])

    def set(self, key: str, value: Any):
        """Set configuration value.

        Args:
            key (str): Configuration key (supports dot notation)
            value (Any): Value to set

        Raises:
            ConfigurationError: If the key is unknown or the value invalid
        """
        self.update({key: value})

    def update(self, updates: Mapping[str, Any]):
        """Apply several dot-notation updates, validating once at the end.

        The configuration is left untouched when validation fails.

        Args:
            updates (Mapping[str, Any]): Dot-notation keys and values
        """
        snapshot = copy.deepcopy(self.data)
        try:
            for key, value in updates.items():
                parts = key.split('.')
                target = self.data
                for part in parts[:-1]:
                    if part not in target or not isinstance(target[part], dict):
                        raise ConfigurationError(f"Unknown configuration key: {key}")
                    target = target[part]
                if parts[-1] not in target or isinstance(target[parts[-1]], dict):
                    raise ConfigurationError(f"Unknown configuration key: {key}")
                target[parts[-1]] = value
            self._validate()
        except ConfigurationError:
            self.data = snapshot
            raise

    def to_dict(self) -> Dict[str, Any]:
        """Deep copy of the configuration, for provenance records."""
        return copy.deepcopy(self.data)

    def to_json(self) -> str:
        """Canonical JSON form (sorted keys) of the configuration."""
        return json.dumps(self.data, sort_keys=True, indent=2)


def read_config_file(config_file: Path) -> Dict[str, Any]:
    """Read a JSON configuration file into flattened dot-notation updates.

    Args:
        config_file (Path): Path to configuration file

    Returns:
        Dict[str, Any]: Flattened updates

    Raises:
        FileNotFoundError: If config file not found
        ConfigurationError: If config file is invalid JSON
    """
    config_file = Path(config_file)
    if not config_file.exists():
        raise FileNotFoundError(f"Config file not found: {config_file}")

    try:
        with open(config_file, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"Invalid JSON in {config_file}: {e}")

    if not isinstance(data, dict):
        raise ConfigurationError(f"Config file must hold an object: {config_file}")
    return _flatten(data)


def load_config(config_file: Path) -> Config:
    """Load configuration from file, layered over the defaults.

    Args:
        config_file (Path): Path to configuration file

    Returns:
        Config: Configuration instance

    Raises:
        FileNotFoundError: If config file not found
        ConfigurationError: If config file is invalid JSON or has unknown keys
    """
    config = Config()
    update_config(config, read_config_file(config_file))
    return config


def save_config(config: Config, config_file: Path):
    """Save configuration to file.

    Args:
        config (Config): Configuration instance
        config_file (Path): Path to save configuration
    """
    config_file = Path(config_file)
    config_file.parent.mkdir(parents=True, exist_ok=True)

    with open(config_file, 'w', encoding='utf-8') as f:
        f.write(config.to_json() + '\n')


def update_config(config: Config, updates: Dict[str, Any]):
    """Update configuration with new values.

    Args:
        config (Config): Configuration instance
        updates (Dict[str, Any]): Dot-notation updates to apply
    """
    config.update(updates)


def parse_override(text: str) -> Dict[str, Any]:
    """Parse a ``section.key=value`` override; the value is read as JSON when possible.

    Args:
        text (str): Override text from the command line

    Returns:
        Dict[str, Any]: Single-entry update mapping
    """
    if '=' not in text:
        raise ConfigurationError(f"Override must look like section.key=value: {text}")
    key, raw = text.split('=', 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return {key.strip(): value}


def apply_env_overrides(config: Config, environ: Optional[Mapping[str, str]] = None):
    """Apply ``STEMEDIT_PATHS_<KEY>`` environment overrides to ``paths.*``.

    Args:
        config (Config): Configuration instance
        environ (Mapping, optional): Environment to read; defaults to ``os.environ``
    """
    environ = os.environ if environ is None else environ
    updates = {
        'paths.' + name[len(ENV_PREFIX):].lower(): value
        for name, value in sorted(environ.items())
        if name.startswith(ENV_PREFIX)
    }
    config.update(updates)


def full_scale_config() -> Config:
    """Named full-scale configuration (parameter accounting only, never trained)."""
    config = Config()
    update_config(config, FULL_SCALE_OVERRIDES)
    return config


def resolve_config(config_file: Optional[Path] = None, overrides: Iterable[Dict[str, Any]] = (),
                   named: str = 'desk', environ: Optional[Mapping[str, str]] = None) -> Config:
    """Resolve the run configuration.

    Precedence: named defaults < config file < environment (paths only) < overrides.

    Args:
        config_file (Path, optional): JSON configuration file
        overrides (Iterable[Dict]): Dot-notation updates from the command line
        named (str): ``desk`` or ``full_scale``
        environ (Mapping, optional): Environment for path overrides

    Returns:
        Config: Resolved configuration
    """
    if named == 'desk':
        config = Config()
    elif named == 'full_scale':
        config = full_scale_config()
    else:
        raise ConfigurationError(f"Unknown named config: {named}")

    if config_file is not None:
        update_config(config, read_config_file(config_file))

    apply_env_overrides(config, environ)
    for update in overrides:
        update_config(config, update)
    return config

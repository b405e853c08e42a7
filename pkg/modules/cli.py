"""
Command-line interface.

Every subcommand shares ``--config`` and ``--set section.key=value``.
Logs go to standard error; artifacts go to files. Exit codes: 0 on
success, 1 on input or configuration errors, 2 on internal errors.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from dotenv import load_dotenv

from . import __version__
from .cache_utils import TokenCache
from .codec.rvq import CodebookStack, CodecConfig, build_codebook_stack, decode, encode
from .constants import EXIT_INPUT_ERROR, EXIT_INTERNAL_ERROR, EXIT_OK, TRAIN_LOG_NAME
from .data.dataset import PretrainDataset, TripletDataset
from .data.synth import generate_corpus, load_corpus, save_corpus
from .data.triplets import TripletConfig, build_manifest, build_pretrain_manifest
from .errors import StemEditError, TrainingError
from .evaluation.evaluate import CopyConditionModel, FusedEditModel, OracleModel, evaluate, fit_length
from .evaluation.report import format_table, write_report
from .media.audio_io import Waveform, write_wav
from .media.processor import MediaProcessor
from .model.accounting import FULL_SCALE_TEXT_VOCAB, summarize
from .model.editor import InstructionEditor
from .model.token_lm import ModelConfig
from .training.checkpoint import load_base_checkpoint, load_finetune_checkpoint
from .training.gradcheck import grad_check
from .training.pretrain import PretrainConfig, pretrain_base
from .training.trainer import Trainer, TrainConfig
from .utils.config import Config, full_scale_config, parse_override, resolve_config, save_config
from .utils.logger import ROOT_LOGGER_NAME, LoggerConfig, get_logger, setup_logger

logger = get_logger(__name__)

CODEC_FILE = 'codec.npz'
CONFIG_ECHO = 'config.json'
BASELINES = {'copy': CopyConditionModel, 'oracle': OracleModel}


class UsageError(Exception):
    """Raised by the argument parser instead of exiting with status 2."""


class ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _path_or_config(value: Optional[str], config: Config, key: str, what: str) -> Path:
    value = value or config.get(f'paths.{key}')
    if not value:
        raise UsageError(f"No {what} given (use the flag or paths.{key})")
    return Path(value)


def _cache(config: Config) -> TokenCache:
    return TokenCache(config.get('paths.cache_dir') or None)


def _load_codec(args, config: Config) -> CodebookStack:
    return CodebookStack.load(_path_or_config(args.codec, config, 'codec_path', 'codec file'))


def _load_editor(args, config: Config) -> InstructionEditor:
    base, _ = load_base_checkpoint(_path_or_config(args.base, config, 'base_checkpoint', 'base checkpoint'))
    editor, _ = load_finetune_checkpoint(args.checkpoint, base)
    return editor


# Subcommands

def cmd_gen_corpus(args, config: Config) -> int:
    out = _path_or_config(args.out, config, 'corpus_dir', 'corpus directory')
    datagen = config.section('datagen')
    tracks = generate_corpus(datagen['n_tracks'], config.get('seed'), datagen['min_stems'],
                             datagen['max_stems'], datagen['track_seconds'], config.get('codec.sample_rate'))
    save_corpus(tracks, out)
    waveforms = [stem.waveform for track in tracks for stem in track.stems]
    stack = build_codebook_stack(waveforms, CodecConfig.from_config(config), config.get('seed'))
    stack.save(out / CODEC_FILE)
    save_config(config, out / CONFIG_ECHO)
    logger.info(f"Corpus of {len(tracks)} tracks and codec written to {out}")
    return EXIT_OK


def cmd_make_triplets(args, config: Config) -> int:
    corpus = _path_or_config(args.corpus, config, 'corpus_dir', 'corpus directory')
    out = _path_or_config(args.out, config, 'triplet_dir', 'output directory')
    datagen = config.section('datagen')
    seed = config.get('seed')
    triplet_config = TripletConfig.from_config(config)
    tracks = load_corpus(corpus, config.get('codec.sample_rate'))
    build_manifest(tracks, datagen['n_triplets'], seed, out / 'train', triplet_config)
    if datagen['n_val_triplets'] > 0:
        build_manifest(tracks, datagen['n_val_triplets'], seed + 1, out / 'val', triplet_config)
    if datagen['n_pretrain_clips'] > 0:
        build_pretrain_manifest(tracks, datagen['n_pretrain_clips'], seed + 2, out / 'pretrain', triplet_config)
    save_config(config, out / CONFIG_ECHO)
    return EXIT_OK


def cmd_pretrain(args, config: Config) -> int:
    stack = _load_codec(args, config)
    out = _path_or_config(args.out, config, 'base_checkpoint', 'output checkpoint')
    dataset = PretrainDataset.from_manifest(args.manifest, stack, _cache(config), config.get('metrics.workers'))
    cfg = PretrainConfig.from_config(config, steps=args.steps)
    pretrain_base(dataset, ModelConfig.from_config(config), cfg, checkpoint_path=out,
                  log_path=out.parent / f"{out.stem}_{TRAIN_LOG_NAME}", run_config=config.to_dict())
    return EXIT_OK


def cmd_finetune(args, config: Config) -> int:
    stack = _load_codec(args, config)
    out = _path_or_config(args.out, config, 'finetune_dir', 'output directory')
    base, _ = load_base_checkpoint(_path_or_config(args.base, config, 'base_checkpoint', 'base checkpoint'))
    workers = config.get('metrics.workers')
    train_set = TripletDataset.from_manifest(args.manifest, stack, _cache(config), workers)
    val_path = args.val_manifest or config.get('paths.val_triplet_dir')
    val_set = TripletDataset.from_manifest(val_path, stack, _cache(config), workers) if val_path else None
    cfg = TrainConfig.from_config(config)
    save_config(config, out / CONFIG_ECHO)
    if args.resume:
        trainer = Trainer.resume(args.resume, base, train_set, cfg, out, val_set, config.to_dict())
    else:
        editor = InstructionEditor.attach(base, config, config.get('seed'), cfg.text_fusion_enabled)
        trainer = Trainer(editor, train_set, cfg, out, val_set, config.to_dict())
    trainer.run()
    return EXIT_OK


def cmd_edit(args, config: Config) -> int:
    stack = _load_codec(args, config)
    editor = _load_editor(args, config)
    condition = MediaProcessor(stack.sample_rate).load(args.input)
    metrics = config.section('metrics')
    grid = encode(condition, stack)
    edited = editor.generate_edit(grid, args.instruction, metrics['temperature'], metrics['top_k'],
                                  config.get('seed'))
    write_wav(args.output, fit_length(decode(edited, stack), len(condition)))
    logger.info(f"Wrote {args.output} ({condition.duration:.2f} s)")
    return EXIT_OK


def cmd_eval(args, config: Config) -> int:
    stack = _load_codec(args, config)
    out = _path_or_config(args.out, config, 'report_dir', 'report directory')
    metrics = config.section('metrics')
    models = [BASELINES[name]() for name in args.baseline]
    if args.checkpoint:
        base, _ = load_base_checkpoint(_path_or_config(args.base, config, 'base_checkpoint', 'base checkpoint'))
        for path in args.checkpoint:
            editor, _ = load_finetune_checkpoint(path, base)
            models.append(FusedEditModel(editor, stack, metrics['temperature'], metrics['top_k'],
                                         config.get('seed'), name=Path(path).parent.name or Path(path).stem))
    if not models:
        raise UsageError("Nothing to evaluate: give --checkpoint and/or --baseline")
    reports = [evaluate(model, args.manifest, stack, metrics, run_config=config.to_dict(),
                        workers=metrics['workers']) for model in models]
    write_report(reports, out, metrics)
    sys.stderr.write(format_table(reports, metrics))
    return EXIT_OK


def cmd_gradcheck(args, config: Config) -> int:
    report = grad_check(seed=config.get('seed'), n_layers=args.layers, d_model=args.dmodel,
                        length=args.length, rank=args.rank, loss_mode=config.get('trainer.loss_mode'),
                        randomize=not args.at_init)
    result = report.to_dict()
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps(result, indent=2, sort_keys=True) + '\n', encoding='utf-8')
    print(json.dumps(result, indent=2, sort_keys=True))
    if not report.passed:
        logger.error(f"Gradient check failed: max relative error {report.max_error:.2e}")
        return EXIT_INTERNAL_ERROR
    return EXIT_OK


def cmd_params(args, config: Config) -> int:
    width = args.bottleneck
    rows = {
        'desk': summarize(config, text_fusion=not args.no_text_fusion, bottleneck=width),
        'full_scale': summarize(full_scale_config(), FULL_SCALE_TEXT_VOCAB, not args.no_text_fusion, width),
    }
    for name, summary in rows.items():
        logger.info(f"{name}: {summary.trainable:,} trainable ({summary.base:,} base, {summary.ratio:.2%})")
    print(json.dumps({name: s.to_dict() for name, s in rows.items()}, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_generate(args, config: Config) -> int:
    stack = _load_codec(args, config)
    base, _ = load_base_checkpoint(_path_or_config(args.base, config, 'base_checkpoint', 'base checkpoint'))
    metrics = config.section('metrics')
    length = max(1, round(args.seconds * stack.frame_rate))
    grid = base.generate(base.encode_text(args.text), length, metrics['temperature'], metrics['top_k'],
                         config.get('seed'))
    waveform = decode(grid, stack)
    write_wav(args.output, Waveform(waveform.samples[:round(args.seconds * stack.sample_rate)], stack.sample_rate))
    return EXIT_OK


# Parser

def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog='stemedit', description="Instruction-based stem editing on tokenized audio.")
    parser.add_argument('--version', action='version', version=f"%(prog)s {__version__}")
    parser.add_argument('--config', type=Path, help="JSON configuration file layered over the defaults")
    parser.add_argument('--set', dest='overrides', action='append', default=[], metavar='KEY=VALUE',
                        help="Override a configuration value, e.g. trainer.total_steps=100 (repeatable)")
    parser.add_argument('--seed', type=int, help="Global seed (same as --set seed=N)")
    parser.add_argument('--log-dir', help="Also write logs to this directory")
    parser.add_argument('-v', '--verbose', action='store_true', help="Debug logging")
    sub = parser.add_subparsers(dest='command', metavar='COMMAND', required=True)

    p = sub.add_parser('gen-corpus', help="Generate a synthetic multi-stem corpus and train the codec")
    p.add_argument('--out', help="Corpus directory (paths.corpus_dir)")
    p.add_argument('--n-tracks', type=int, help="Number of tracks (datagen.n_tracks)")
    p.add_argument('--max-stems', type=int, help="Maximum stems per track (datagen.max_stems)")
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser('make-triplets', help="Build train, validation and pretraining manifests")
    p.add_argument('--corpus', help="Corpus directory (paths.corpus_dir)")
    p.add_argument('--out', help="Output directory (paths.triplet_dir)")
    p.add_argument('--count', type=int, help="Training triplets (datagen.n_triplets)")
    p.set_defaults(func=cmd_make_triplets)

    p = sub.add_parser('pretrain', help="Pretrain the base token model on description clips")
    p.add_argument('--manifest', required=True, help="Pretraining manifest or its directory")
    p.add_argument('--codec', help="Codebook file (paths.codec_path)")
    p.add_argument('--out', help="Base checkpoint path (paths.base_checkpoint)")
    p.add_argument('--steps', type=int, help="Optimizer steps (pretrain.steps)")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser('finetune', help="Train the fusion adapters on triplets")
    p.add_argument('--manifest', required=True, help="Training manifest or its directory")
    p.add_argument('--val-manifest', help="Validation manifest (paths.val_triplet_dir)")
    p.add_argument('--codec', help="Codebook file (paths.codec_path)")
    p.add_argument('--base', help="Base checkpoint (paths.base_checkpoint)")
    p.add_argument('--out', help="Run directory (paths.finetune_dir)")
    p.add_argument('--steps', type=int, help="Total optimizer steps (trainer.total_steps)")
    p.add_argument('--no-text-fusion', action='store_true', help="Train without the LoRA text fusion")
    p.add_argument('--bottleneck', type=int, metavar='M', help="Bottleneck width of the condition linears")
    p.add_argument('--loss-mode', choices=('cross_entropy', 'l2_embedding'), help="trainer.loss_mode")
    p.add_argument('--resume', help="Finetune checkpoint to continue from")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser('edit', help="Edit one audio file with an instruction")
    p.add_argument('--in', dest='input', required=True, help="Input audio (WAV, or any format ffmpeg reads)")
    p.add_argument('--instruction', required=True, help='Instruction text, e.g. "Extract drums"')
    p.add_argument('--out', dest='output', required=True, help="Output WAV")
    p.add_argument('--checkpoint', required=True, help="Finetune checkpoint")
    p.add_argument('--base', help="Base checkpoint (paths.base_checkpoint)")
    p.add_argument('--codec', help="Codebook file (paths.codec_path)")
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser('eval', help="Evaluate models on a triplet manifest")
    p.add_argument('--manifest', required=True, help="Evaluation manifest or its directory")
    p.add_argument('--checkpoint', action='append', default=[], help="Finetune checkpoint (repeatable)")
    p.add_argument('--baseline', action='append', default=[], choices=sorted(BASELINES),
                   help="Reference model to include (repeatable)")
    p.add_argument('--base', help="Base checkpoint (paths.base_checkpoint)")
    p.add_argument('--codec', help="Codebook file (paths.codec_path)")
    p.add_argument('--out', help="Report directory (paths.report_dir)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser('gradcheck', help="Finite-difference check of the adapter gradients")
    p.add_argument('--layers', type=int, default=2, help="Decoder layers (default: 2)")
    p.add_argument('--dmodel', type=int, default=8, help="Model width (default: 8)")
    p.add_argument('--length', type=int, default=4, help="Frames per grid (default: 4)")
    p.add_argument('--rank', type=int, default=2, help="LoRA rank (default: 2)")
    p.add_argument('--at-init', action='store_true', help="Keep gates and LoRA B at zero")
    p.add_argument('--out', help="Also write the report as JSON")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser('params', help="Parameter counts for the desk and full-scale configurations")
    p.add_argument('--bottleneck', type=int, metavar='M', help="Bottleneck width of the condition linears")
    p.add_argument('--no-text-fusion', action='store_true', help="Exclude the LoRA set")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser('generate', help="Text-to-music generation with the base model")
    p.add_argument('--text', required=True, help='Description, e.g. "drums and bass"')
    p.add_argument('--seconds', type=float, default=5.0, help="Duration (default: 5)")
    p.add_argument('--out', dest='output', required=True, help="Output WAV")
    p.add_argument('--base', help="Base checkpoint (paths.base_checkpoint)")
    p.add_argument('--codec', help="Codebook file (paths.codec_path)")
    p.set_defaults(func=cmd_generate)
    return parser


def _flag_overrides(args, config: Config) -> List[Dict[str, Any]]:
    """Dedicated flags, applied after ``--set``."""
    mapping = {
        'seed': 'seed', 'n_tracks': 'datagen.n_tracks', 'max_stems': 'datagen.max_stems',
        'count': 'datagen.n_triplets', 'loss_mode': 'trainer.loss_mode', 'bottleneck': 'fusion.bottleneck',
    }
    updates = [{key: getattr(args, attr)} for attr, key in mapping.items()
               if getattr(args, attr, None) is not None]
    if args.command == 'finetune':
        if args.steps is not None:
            updates.append({'trainer.total_steps': args.steps,
                            'trainer.warmup_steps': min(config.get('trainer.warmup_steps'), args.steps)})
        if args.no_text_fusion:
            updates.append({'trainer.text_fusion_enabled': False})
    return updates


def _resolve(args) -> Config:
    config = resolve_config(args.config, [parse_override(text) for text in args.overrides])
    for update in _flag_overrides(args, config):
        config.update(update)
    return config


def dispatch(argv: Optional[Sequence[str]] = None) -> int:
    """Parse ``argv``, run the subcommand and return its exit code."""
    load_dotenv()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        sys.stderr.write(f"{e}\n")
        return EXIT_INPUT_ERROR
    except SystemExit as e:
        return int(e.code or 0)

    log_level = logging.DEBUG if args.verbose else logging.INFO
    setup_logger(ROOT_LOGGER_NAME, LoggerConfig(log_dir=args.log_dir, log_level=log_level))
    try:
        config = _resolve(args)
        logger.debug(f"Resolved configuration:\n{config.to_json()}")
        return args.func(args, config)
    except UsageError as e:
        logger.error(str(e))
        parser.print_usage(sys.stderr)
        return EXIT_INPUT_ERROR
    except TrainingError as e:
        logger.error(f"{e} (diagnostics: {e.diagnostics})")
        return EXIT_INTERNAL_ERROR
    except StemEditError as e:
        logger.error(str(e))
        return EXIT_INPUT_ERROR
    except FileNotFoundError as e:
        logger.error(str(e))
        return EXIT_INPUT_ERROR
    except Exception as e:
        logger.critical(f"Unexpected error: {e}", exc_info=True)
        return EXIT_INTERNAL_ERROR


def main():
    sys.exit(dispatch())

"""
Constants used throughout the stem editing pipeline.
"""

import os
from dotenv import load_dotenv

# Container format of checkpoints and codebook files
FORMAT_VERSION = 1

# Load environment variables (paths only; see utils.config)
load_dotenv()

# Base Paths
BASE_DIR = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
DEFAULT_WORK_DIR = os.path.join(BASE_DIR, 'work')
ENV_PREFIX = "STEMEDIT_PATHS_"

# Audio / codec (desk scale)
SAMPLE_RATE = 16000
FRAME_RATE = 50
N_CODEBOOKS = 4
CODEBOOK_SIZE = 64
FEATURE_DIM = 32
KMEANS_MAX_ITER = 50
WAV_SUBTYPES = {'PCM_16', 'FLOAT'}

# Full-scale codec constants, kept for parameter accounting
FULL_SCALE_SAMPLE_RATE = 32000
FULL_SCALE_CODEBOOK_SIZE = 2048

# Stems and instructions
INSTRUMENTS = ('drums', 'bass', 'piano', 'guitar', 'strings', 'synth')
TASKS = ('add', 'remove', 'extract')
INSTRUCTION_TEMPLATES = {
    'add': "Add {label}",
    'remove': "Remove {label}",
    'extract': "Extract {label}",
}

# Text vocabulary for the toy instruction tokenizer
SPECIAL_TOKENS = ('<pad>', '<unk>')
TEXT_VOCAB = SPECIAL_TOKENS + (
    'add', 'remove', 'extract', 'no', 'only', 'with', 'and', 'without',
    'music', 'track', 'mix', 'a', 'the', 'some',
    'drum', 'drums', 'bass', 'piano', 'guitar', 'strings', 'string', 'synth',
)
MAX_TEXT_TOKENS = 16

# Triplet construction
CLIP_SECONDS = 5.0
SILENCE_FRAME_MS = 25.0
SILENCE_RMS_THRESHOLD = 1e-3
MAX_SILENCE_FRACTION = 0.5
OFFSET_RETRY_CAP = 16

# Training
LEARNING_RATE = 5e-3
WARMUP_STEPS = 100
TOTAL_STEPS = 2000
FULL_SCALE_TOTAL_STEPS = 5000
BATCH_SIZE = 8
GRAD_ACCUMULATION = 4
WEIGHT_DECAY = 0.01
GRAD_CLIP_NORM = 1.0
LOSS_MODES = ('cross_entropy', 'l2_embedding')

# Evaluation
SI_SDR_CAP_DB = 100.0
SSIM_WINDOW = 1024
SSIM_HOP = 256
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_FILTER_SIZE = 7
KL_VARIANCE_FLOOR = 1e-8

# File layout
MANIFEST_NAME = 'manifest.jsonl'
AUDIO_SUBDIR = 'audio'
TRAIN_LOG_NAME = 'train_log.jsonl'
REPORT_JSON_NAME = 'report.json'
REPORT_TEXT_NAME = 'report.txt'

# Exit codes
EXIT_OK = 0
EXIT_INPUT_ERROR = 1
EXIT_INTERNAL_ERROR = 2

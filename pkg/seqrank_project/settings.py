"""
Django settings for seqrank_project.
"""

import os
from pathlib import Path

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

# SECURITY WARNING: keep the secret key used in production secret!
SECRET_KEY = os.environ.get('SEQRANK_SECRET_KEY', 'django-insecure-seqrank-key-for-development-only')

# SECURITY WARNING: don't run with debug turned on in production!
DEBUG = os.environ.get('SEQRANK_DEBUG', '1') == '1'

ALLOWED_HOSTS = ['localhost', '127.0.0.1', 'testserver']

# Application definition
INSTALLED_APPS = [
    'seqrank',
]

MIDDLEWARE = [
    'django.middleware.security.SecurityMiddleware',
    'django.middleware.common.CommonMiddleware',
    'django.middleware.csrf.CsrfViewMiddleware',
]

ROOT_URLCONF = 'seqrank_project.urls'

WSGI_APPLICATION = 'seqrank_project.wsgi.application'

# No database: corpora, checkpoints and reports are files.
DATABASES = {}

# Internationalization
LANGUAGE_CODE = 'en-us'
TIME_ZONE = 'UTC'
USE_I18N = False
USE_TZ = True

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'

# ---------------------------------------------------------------------------
# seqrank run configuration
#
# Every key of a run is listed here with its default. A `key = value` config
# file passed with --config overrides these; command-line flags override both.
# Full-scale values used in production: M=255, P=100.
# ---------------------------------------------------------------------------
SEQRANK_RUN_DEFAULTS = {
    # --- run control ---
    'seed': 7,                      # master seed for every random stream
    'float_width': 32,              # 32 for training throughput, 64 for oracle checks
    'corpus_dir': 'corpus',         # directory holding corpus.jsonl / pins.jsonl / users.jsonl
    'out': 'runs',                  # output directory for checkpoints, logs, reports
    'checkpoint': '',               # checkpoint file to read (eval / rank)
    'log_every': 25,                # training progress log interval (steps)

    # --- datasynth ---
    'n_topics': 16,                 # number of topic centroids
    'n_pins': 2000,                 # number of pins
    'n_users': 500,                 # number of users
    'd_pin': 16,                    # pin content embedding width
    'horizon_days': 180,            # length of every user's history window
    'actions_per_day': 4.0,         # median user action rate (Poisson process)
    'drift_rate': 0.005,            # interest drift speed per day (0 = stationary)
    'explore_rate': 0.25,           # share of impressions drawn from a uniform topic
    'pin_spread': 0.6,              # pin scatter around its topic centroid
    'click_min_duration': 10.0,     # seconds a click must last to count as positive
    'compress': False,              # gzip the corpus files

    # --- encoder / user tower ---
    'M': 64,                        # max actions per user sequence
    'd_h': 32,                      # transformer hidden width
    'n_layers': 2,                  # transformer blocks (MHSA + FFN)
    'n_heads': 2,                   # attention heads
    'd_ffn': 64,                    # FFN inner width
    'd_e': 16,                      # output embedding width (user and pin towers)

    # --- objective ---
    'loss_kind': 'dense_all_action',  # dense_all_action | all_action | next_action
    'window_days': 28,              # training target window
    'eval_window_days': 14,         # evaluation future window
    'temperature': 0.1,             # softmax temperature
    'negatives': 128,               # uniform random negatives per example
    'in_batch_negatives': True,     # add other examples' targets as negatives
    'cut_policy': 'random',         # training cut time: random | horizon_end

    # --- optimization ---
    'train_steps': 400,             # tower training steps
    'batch_size': 16,               # examples per step
    'learning_rate': 0.003,         # Adam learning rate
    'beta1': 0.9,                   # Adam first-moment decay
    'beta2': 0.999,                 # Adam second-moment decay
    'adam_eps': 1e-8,               # Adam denominator epsilon
    'holdout_fraction': 0.2,        # last share of users by id never trained on

    # --- real-time ranker ---
    'P': 32,                        # max real-time actions
    't_mask': 3600.0,               # inference time-window mask (seconds)
    't_mask_choices': '0,3600,86400',  # training masks sampled per example (seconds)
    'mask_at_inference': True,      # apply t_mask when scoring
    'ranker_layers': 1,             # ranker TransformerEncoder blocks
    'ranker_heads': 2,              # ranker attention heads
    'ranker_steps': 300,            # ranker training steps
    'ranker_batch_size': 32,        # impressions per ranker step
    'ranker_window_days': 28,       # replay window at the end of each history
    'train_ranker': False,          # train the ranker in `train` as well

    # --- evaluation ---
    'seeds': '1,2,3,4,5',           # seed list for comparison harnesses
    'recall_ks': '1,10,100',        # recall cut-offs

    # --- serving planner ---
    'transfer_overhead_us': 20.0,   # fixed cost per device-crossing transfer
    'transfer_bandwidth': 10.0,     # bytes per microsecond
    'coalesce_transfers': False,    # one overhead per stage pair and direction
    'search_budget': 1 << 20,       # max placements evaluated by search
}

# Serving endpoints (seqrank.views)
SEQRANK_SERVING_CHECKPOINT = os.environ.get('SEQRANK_SERVING_CHECKPOINT', '')
SEQRANK_SERVING_CORPUS = os.environ.get('SEQRANK_SERVING_CORPUS', '')
SEQRANK_PLAN_GRAPH = BASE_DIR / 'seqrank' / 'fixtures' / 'table1.graph'

# Logging configuration
LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'simple': {
            'format': '{levelname} {name}: {message}',
            'style': '{',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'simple',
        },
    },
    'loggers': {
        'seqrank': {
            'handlers': ['console'],
            'level': 'DEBUG' if DEBUG else 'INFO',
        },
    },
}

"""
Django settings for the splatsystem project.

The project has no web surface and no database: Django provides the
management-command CLI, the settings layer and the test runner. Runtime knobs
come from the environment (or a ``.env`` file next to ``manage.py``) through
django-environ; the default hyperparameters live in ``SPLAT_DEFAULTS``.
"""

from pathlib import Path

import environ
import os


env = environ.Env(
    DEBUG=(bool, False),
    SPLAT_THREADS=(int, 1),
    SPLAT_PRECISION=(str, 'float32'),
    SPLAT_LOG_LEVEL=(str, 'INFO'),
)

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

environ.Env.read_env(os.path.join(BASE_DIR, '.env'))


SECRET_KEY = env('SECRET_KEY', default='splatsystem-local-only')

DEBUG = env('DEBUG')

ALLOWED_HOSTS = []


# Application definition

INSTALLED_APPS = [
    'gaussians',
    'rendering',
    'training',
    'initfit',
    'scenes',
]

MIDDLEWARE = []

# No models anywhere in the project.
DATABASES = {}

USE_TZ = True

TIME_ZONE = 'UTC'


# Engine settings

SPLAT_THREADS = env('SPLAT_THREADS')

SPLAT_PRECISION = env('SPLAT_PRECISION')

SPLAT_LOG_LEVEL = env('SPLAT_LOG_LEVEL')

# Built-in defaults for every config key. Precedence at run time:
# these < JSON config file < dotted command-line overrides.
SPLAT_DEFAULTS = {
    'model': {
        'sh_degree': 2,
    },
    'train': {
        'iters_per_frame': 100,          # 30k iterations for 300 frames
        'total_iters': 0,                # 0 -> iters_per_frame * frame_count
        'seed': 0,
        'log_every': 100,
        'checkpoint_every': 1000,
        'velocity_lambda0': 1.0,
        'velocity_lambda1': 0.01,
        'velocity_schedule': 'geometric',
        'background': [0.0, 0.0, 0.0],
    },
    'loss': {
        'lambda_img': 0.8,
        'lambda_ssim': 0.2,
        'lambda_perc': 0.0,
        'lambda_reg': 1e-2,
        'reg_end_fraction': 0.5,
        'reg_decay_fraction': 0.1,
    },
    'initfit': {
        'knn_k': 1,
        'knn_cutoff': 3.0,               # times the seed cloud's point spacing
        'max_seed_points': 20000,        # per frame
        'zero_velocity': False,
    },
    'relocation': {
        'enabled': True,
        'period': 100,
        'lambda_grad': 0.5,
        'lambda_opacity': 0.5,
        'dead_threshold': 0.005,
        'position_jitter': 0.1,
        'time_jitter': 0.1,
        'reset_opacity': 0.1,
    },
    'lr': {
        'position_init': 1.6e-4,
        'position_final': 1.6e-6,
        'opacity': 0.05,
        'scale': 5e-3,
        'rotation': 1e-3,
        'sh': 2.5e-3,
        'time': 1e-4,
        'duration': 2e-3,
        'velocity': 1e-3,
    },
    'raster': {
        'tile_size': 16,
        'temporal_threshold': 0.05,
        'alpha_floor': 1.0 / 255.0,
        'alpha_ceiling': 0.999,
        'transmittance_stop': 1e-4,
        'near': 0.01,
        'dilation': 0.3,
        'deterministic': True,
    },
}


LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'plain': {
            'format': '[{levelname}] {name}: {message}',
            'style': '{',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'plain',
        },
    },
    'loggers': {
        app: {
            'handlers': ['console'],
            'level': SPLAT_LOG_LEVEL,
            'propagate': False,
        }
        for app in ('gaussians', 'rendering', 'training', 'initfit', 'scenes')
    } | {
        # Progress lines always reach train.log, whatever SPLAT_LOG_LEVEL says.
        'training.progress': {
            'level': 'INFO',
        },
    },
}

"""
Base Django settings for the HOI motion-language toolkit.
Pipeline defaults live in HOI_DEFAULTS; services read them through django.conf.settings.
"""

from pathlib import Path
from decouple import config
import os

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent.parent

SECRET_KEY = config('SECRET_KEY', default='django-insecure-hoi-toolkit-local-only')
DEBUG = config('DEBUG', default=False, cast=bool)
ALLOWED_HOSTS = []

# Application definition
INSTALLED_APPS = [
    'hoi',
]

# Database (unused by the pipeline; kept so management commands run with stock settings)
DATABASES = {
    'default': {
        'ENGINE': 'django.db.backends.sqlite3',
        'NAME': BASE_DIR / 'db.sqlite3',
    }
}

LANGUAGE_CODE = 'en-us'
TIME_ZONE = 'UTC'
USE_I18N = False
USE_TZ = True

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'

# Output root for management commands when --out is not given
HOI_OUTPUT_ROOT = Path(config('HOI_OUTPUT_ROOT', default=str(BASE_DIR / 'runs')))

# Instruction prompts shipped with the app
HOI_INSTRUCTION_TEMPLATES = BASE_DIR / 'hoi' / 'fixtures' / 'instruction_templates.json'

# Pipeline defaults. Keys mirror RunConfig sections; anything not listed here
# falls back to the dataclass defaults in hoi.services.config_service.
HOI_DEFAULTS = {
    'kinematics': {
        'count': 200,
        'objects': ['cube', 'sphere', 'cylinder', 'capsule', 'hinged_box'],
        'scripts': ['approach', 'grasp', 'lift', 'rotate', 'pass', 'open_lid'],
        'length_range': [48, 96],
        'noise': 0.01,
        'heldout_fraction': 0.1,
    },
    'tokenizer': {
        # Desk-scale run; the full regime is 2000 epochs.
        'epochs': 300,
        'codebook_size': 512,
        'latent_dim': 64,
        'window': 4,
        'alpha': 0.5,
        'mask_prob': 0.15,
    },
    'geometry': {
        'lambda_pen': 0.2,
        'beta_c': 0.5,
        'gamma_r': 1.0,
        'phi_approach': 0.02,
        'tau_contact': 0.005,
    },
    'lm': {
        'width': 128,
        'layers': 4,
        'heads': 4,
        'context': 512,
        'learning_rate': 2e-4,
        'tune_epochs': 100,
    },
    'eval': {
        'matcher_epochs': 65,
        'embed_dim': 64,
        'r_precision_batch': 32,
    },
}

# Logging
LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'verbose': {
            'format': '{levelname} {asctime} {name} {process:d} {thread:d} {message}',
            'style': '{',
        },
        'simple': {
            'format': '{levelname} {name} {message}',
            'style': '{',
        },
    },
    'handlers': {
        'file': {
            'level': 'INFO',
            'class': 'logging.handlers.RotatingFileHandler',
            'filename': BASE_DIR / 'logs' / 'hoi.log',
            'maxBytes': 5 * 1024 * 1024,
            'backupCount': 3,
            'formatter': 'verbose',
        },
        'console': {
            'level': 'INFO',
            'class': 'logging.StreamHandler',
            'formatter': 'simple',
        },
    },
    'root': {
        'handlers': ['console'],
        'level': 'WARNING',
    },
    'loggers': {
        'django': {
            'handlers': ['file', 'console'],
            'level': 'WARNING',
            'propagate': False,
        },
        'hoi': {
            'handlers': ['file', 'console'],
            'level': config('HOI_LOG_LEVEL', default='INFO'),
            'propagate': False,
        },
        'hoi.services': {
            'handlers': ['file', 'console'],
            'level': config('HOI_LOG_LEVEL', default='INFO'),
            'propagate': False,
        },
        'hoi.nn': {
            'handlers': ['file', 'console'],
            'level': config('HOI_LOG_LEVEL', default='INFO'),
            'propagate': False,
        },
    },
}

# Create logs directory if it doesn't exist
os.makedirs(BASE_DIR / 'logs', exist_ok=True)

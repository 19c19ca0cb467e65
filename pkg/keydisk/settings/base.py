"""
Base settings for the keydisk project.
These settings are shared between development and production.
"""
import os
from pathlib import Path
from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent.parent

# Only management commands and the test runner are used; no sessions or auth.
SECRET_KEY = os.environ.get('SECRET_KEY', 'keydisk-offline-key')

# Application definition
INSTALLED_APPS = [
    # Local apps
    'fields.apps.FieldsConfig',
    'scenes.apps.ScenesConfig',
    'encoding.apps.EncodingConfig',
    'losses.apps.LossesConfig',
    'poses.apps.PosesConfig',
    'segmentation.apps.SegmentationConfig',
    'evaluation.apps.EvaluationConfig',
    'core.apps.CoreConfig',
]

# No app declares models
DATABASES = {}

# Internationalization
LANGUAGE_CODE = 'en-us'
TIME_ZONE = 'UTC'
USE_I18N = False
USE_TZ = True

# Pipeline defaults used by the management commands.
# Library code never reads these; each module carries its own constants.
KEYDISK = {
    'RADIUS': 32.0,
    'SIGMA_HVK': 0.3,
    'SIGMA_LVK': 0.7,
    'SIGMA_INSTANCE': 5.0,
    'IGO_SIGMA': 0.1,
    'THRESHOLD': 0.5,
    'NMS_RADIUS': 10.0,
    'MODE': 'dynamic',
    'MAX_ITERS': 20,
    'TOL': 1e-3,
    'CANVAS': 401,
    'PERSONS': 1,
    'MAX_PERSONS': None,
    'COUNT': 1,
    'OCCLUDE': 0.0,
    'SEED': 0,
    'NOISE': 0.0,
    'OFFSET_NOISE': 0.0,
    'WORKERS': int(os.environ.get('KEYDISK_WORKERS', os.cpu_count() or 1)),
}

# Logging
LOG_LEVEL = os.environ.get('KDC_LOG', 'INFO').upper()

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'verbose': {
            'format': '{levelname} {asctime} {module} {process:d} {thread:d} {message}',
            'style': '{',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'verbose',
        },
    },
    'root': {
        'handlers': ['console'],
        'level': 'WARNING',
    },
    'loggers': {
        app: {
            'handlers': ['console'],
            'level': LOG_LEVEL,
            'propagate': False,
        }
        for app in ['keydisk', 'fields', 'scenes', 'encoding', 'losses',
                    'poses', 'segmentation', 'evaluation', 'core']
    },
}

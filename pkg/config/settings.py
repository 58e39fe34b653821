"""
Django settings for the csgpfa project.

The project is used through management commands (generate, fit, predict,
evaluate); there is no web surface, so only the apps and settings those
commands need are configured here.

For the full list of settings and their values, see
https://docs.djangoproject.com/en/5.1/ref/settings/
"""
from pathlib import Path

BASE_DIR = Path(__file__).resolve().parent.parent

# Not used for anything security related: no sessions, no signing.
SECRET_KEY = 'csgpfa-local-only-not-a-secret'

DEBUG = False

ALLOWED_HOSTS = []


# Application definition

INSTALLED_APPS = [
    'rest_framework',
    'gpfa.apps.GpfaConfig',
]


# Internationalization
# https://docs.djangoproject.com/en/5.1/topics/i18n/

LANGUAGE_CODE = 'en-us'

TIME_ZONE = 'UTC'

USE_I18N = True

USE_TZ = True


# Logging
LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'compact': {
            'format': '{asctime} {levelname} {name}: {message}',
            'style': '{',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'compact',
        },
    },
    'loggers': {
        'gpfa': {
            'handlers': ['console'],
            'level': 'INFO',
            'propagate': False,
        },
    },
}


# CS-GPFA numerical defaults (see gpfa/conf.py for the fallbacks used when
# the library runs without Django settings)
CSGPFA = {
    'JITTER_BASE': 1e-8,
    'MAX_ITERS': 1000,
    'TOLERANCE': 1e-6,
    'PATIENCE': 5,
    'MSTEP_STEPS': 10,
    'MSTEP_STEP_SIZE': 0.01,
    'RETENTION_THRESHOLD': 0.01,
    'THREADS': None,
}

"""App settings for gpfa.

Values come from ``settings.CSGPFA`` when Django is configured and from
``DEFAULTS`` otherwise, so the numerical modules also work as a plain library.
"""
from django.conf import settings


DEFAULTS = {
    'JITTER_BASE': 1e-8,
    'MAX_ITERS': 1000,
    'TOLERANCE': 1e-6,
    'PATIENCE': 5,
    'MSTEP_STEPS': 10,
    'MSTEP_STEP_SIZE': 0.01,
    'RETENTION_THRESHOLD': 0.01,
    'THREADS': None,
}


def get_setting(name):
    if name not in DEFAULTS:
        raise KeyError(f"Unknown CSGPFA setting: {name}")
    if not settings.configured:
        return DEFAULTS[name]
    return getattr(settings, 'CSGPFA', {}).get(name, DEFAULTS[name])

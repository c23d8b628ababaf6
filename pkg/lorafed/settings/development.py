"""Development settings.

Mandatory environment variables:
 - DJANGO_SETTINGS_MODULE=lorafed.settings.development (set by the CLI)
"""
# pylint: disable=wildcard-import,unused-wildcard-import
from .base import *

SECRET_KEY = "very_secret_key"  # nosec
DEBUG = True

LOGGING["loggers"]["federation"]["level"] = "DEBUG"

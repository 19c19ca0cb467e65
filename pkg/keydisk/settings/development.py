"""
Development settings for the keydisk project.
Verbose pipeline logging unless KDC_LOG says otherwise.
"""
import os

from .base import *

DEBUG = True

if 'KDC_LOG' not in os.environ:
    for logger in LOGGING['loggers'].values():
        logger['level'] = 'DEBUG'

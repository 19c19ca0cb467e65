"""
Production settings for the keydisk project.
Used for CI and batch sweeps: quiet logs and a pinned worker count.
"""
import os

from .base import *

DEBUG = False

# Fixed pool size unless KEYDISK_WORKERS is set
KEYDISK['WORKERS'] = int(os.environ.get('KEYDISK_WORKERS', 4))

"""Configure Django before pytest collects the per-app test modules."""
import os

import django

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'keydisk.settings')
django.setup()

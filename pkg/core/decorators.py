"""
Command decorators for keydisk.
Maps pipeline exceptions onto management-command exit codes.
"""
import logging
from functools import wraps

from django.core.exceptions import ValidationError
from django.core.management.base import CommandError

from evaluation.metrics import MetricError

logger = logging.getLogger(__name__)

USAGE_ERROR = 2
METRIC_ERROR = 3


def exit_codes(handle):
    """
    Decorator that turns library failures into CommandError exit codes:
    2 for bad configuration, unreadable inputs and corrupt tensor files,
    3 for evaluation failures.

    Usage:
        class Command(BaseCommand):
            @exit_codes
            def handle(self, *args, **options):
                ...
    """
    @wraps(handle)
    def wrapper(command, *args, **options):
        try:
            return handle(command, *args, **options)
        except CommandError:
            raise
        except MetricError as exc:
            logger.error('evaluation failed: %s', exc)
            raise CommandError(f'evaluation failed: {exc}', returncode=METRIC_ERROR) from exc
        except ValidationError as exc:
            raise CommandError('invalid configuration: ' + '; '.join(exc.messages), returncode=USAGE_ERROR) from exc
        except FileNotFoundError as exc:
            raise CommandError(f'missing input: {exc.filename}', returncode=USAGE_ERROR) from exc
        except ValueError as exc:
            # KDCFError lands here too
            raise CommandError(str(exc), returncode=USAGE_ERROR) from exc
    return wrapper

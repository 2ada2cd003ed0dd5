"""Shared behaviour of the splatsystem management commands.

Exit codes: 0 on success, 1 for usage errors, 2 for data errors
(``ValidationError``, ``OSError``, shape mismatches) and 3 for numerical
failures (`NumericError`). Every failure is reported as one line on stderr.
"""
import sys
from argparse import RawDescriptionHelpFormatter

import numpy as np
from django.conf import settings
from django.core.exceptions import ValidationError
from django.core.management.base import BaseCommand, CommandError, CommandParser, DjangoHelpFormatter

from rendering.rasterizer import RasterSettings
from splatsystem.exceptions import NumericError, ShapeMismatchError


class SplatHelpFormatter(DjangoHelpFormatter, RawDescriptionHelpFormatter):
    """Keeps the line breaks of multi-line descriptions and epilogs."""


class SplatCommandParser(CommandParser):
    """Exits with code 1 on usage errors; argparse would use 2."""

    def error(self, message):
        if self.called_from_command_line:
            self.print_usage(sys.stderr)
            self.exit(1, f"{self.prog}: error: {message}\n")
        raise CommandError(f"Error: {message}")


def one_line(text):
    return ' '.join(str(text).split())


class SplatCommand(BaseCommand):
    """Base class mapping the project's exceptions to exit codes."""
    requires_system_checks = []
    epilog = None

    def create_parser(self, prog_name, subcommand, **kwargs):
        kwargs.setdefault('formatter_class', SplatHelpFormatter)
        parser = super().create_parser(prog_name, subcommand, **kwargs)
        parser.__class__ = SplatCommandParser
        parser.epilog = self.epilog
        parser.add_argument(
            '--threads', type=int, default=None,
            help='Worker cap for tile parallelism (default: SPLAT_THREADS).',
        )
        return parser

    def execute(self, *args, **options):
        try:
            return super().execute(*args, **options)
        except NumericError as exc:
            raise CommandError(one_line(exc), returncode=NumericError.exit_code)
        except ValidationError as exc:
            raise CommandError(one_line('; '.join(exc.messages)), returncode=2)
        except (OSError, ShapeMismatchError) as exc:
            raise CommandError(one_line(exc), returncode=2)

    def raster_settings(self, options, **overrides):
        """Rasterizer settings from the project defaults and ``--threads``."""
        if options.get('threads'):
            overrides['threads'] = options['threads']
        return RasterSettings.from_settings(**overrides)

    @property
    def dtype(self):
        return np.dtype(settings.SPLAT_PRECISION)

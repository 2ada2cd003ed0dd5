#!/usr/bin/env python
"""Command-line entry point for the space-time splatting engine.

Every user-facing operation is a Django management command:

*   ``synth``  writes a synthetic multi-view dynamic scene.
*   ``train``  fits primitives to a scene.
*   ``render`` renders one image from a checkpoint.
*   ``eval``   reports PSNR / DSSIM against a held-out split.
*   ``test``   runs the test suite.
"""
import os
import sys


def main():
    """Points Django at the project settings and dispatches the command.

    Raises:
        ImportError: If Django cannot be imported, likely due to a missing
            installation or an inactive virtual environment.
    """
    os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'splatsystem.settings')
    try:
        from django.core.management import execute_from_command_line
    except ImportError as exc:
        raise ImportError(
            "Couldn't import Django. Are you sure it's installed and "
            "available on your PYTHONPATH environment variable? Did you "
            "forget to activate a virtual environment?"
        ) from exc
    execute_from_command_line(sys.argv)


if __name__ == '__main__':
    main()

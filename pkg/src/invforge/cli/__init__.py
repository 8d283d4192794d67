"""Pipeline orchestration behind the ``invforge`` command."""

from .main import EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL, EXIT_OK, main

__all__ = ["EXIT_CONFIG", "EXIT_DATA", "EXIT_NUMERICAL", "EXIT_OK", "main"]

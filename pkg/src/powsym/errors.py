"""Shared exception taxonomy.

Two top-level families matter for the CLI exit-code contract: configuration
problems (bad scenario files, bad flags) exit with code 2, every numerical or
tolerance failure exits with code 1.
"""


class EngineError(Exception):
    """Base class for numerical / pipeline failures (CLI exit code 1)."""


class ConfigError(Exception):
    """Base class for configuration problems (CLI exit code 2)."""

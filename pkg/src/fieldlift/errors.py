"""Shared exception types, mapped to process exit codes by the CLI."""


class ConfigError(Exception):
    """Invalid or unparseable run configuration (exit code 2)."""


class MissingPrerequisiteError(Exception):
    """A pipeline stage was invoked before its inputs exist (exit code 3)."""


class NumericalError(Exception):
    """Non-finite values or a diverged computation (exit code 4)."""


class VerificationError(Exception):
    """A verification run found a failing check (exit code 5)."""


class ArrayIOError(Exception):
    """Array file could not be written or read back faithfully."""

"""Exception types mapped to the CLI exit-code contract.

Exit codes: 0 all checks pass, 1 checks ran but some failed,
2 invalid configuration, 3 resolution or budget violation,
4 unwritable output location.
"""


class GffThinlabError(Exception):
    """Base for all package errors; carries the CLI exit code."""

    exit_code = 2


class ConfigurationError(GffThinlabError, ValueError):
    """Invalid configuration value (CLI exit code 2)."""

    exit_code = 2


class ResolutionError(GffThinlabError, ValueError):
    """Lattice resolution or memory budget violated (CLI exit code 3)."""

    exit_code = 3


class OutputError(GffThinlabError, OSError):
    """Report destination not writable (CLI exit code 4)."""

    exit_code = 4


class InputError(GffThinlabError, ValueError):
    """Malformed runtime input (empty streams, bad weights)."""

    exit_code = 2

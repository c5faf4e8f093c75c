"""Exception types shared across the package.

Each class carries a short ``category`` string that the CLI prints so that
callers can tell failure modes apart without parsing prose.
"""


class QusStealError(Exception):
    category = "error"


class ArgumentError(QusStealError, ValueError):
    category = "argument"


class ConfigurationError(QusStealError, ValueError):
    category = "configuration"


class InterfaceError(QusStealError, ValueError):
    """Raised by the black-box oracle when inputs do not match its format."""

    category = "interface"


class FormatError(QusStealError, ValueError):
    """Malformed or unsupported file contents."""

    category = "format"

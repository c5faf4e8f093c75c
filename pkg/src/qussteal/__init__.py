"""Black-box functionality stealing between two simulated ultrasound machines."""

from .errors import ArgumentError, ConfigurationError, FormatError, InterfaceError, QusStealError

__version__ = "0.1.0"

__all__ = ["ArgumentError", "ConfigurationError", "FormatError", "InterfaceError", "QusStealError",
           "__version__"]

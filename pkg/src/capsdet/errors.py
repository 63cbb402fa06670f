"""Exception hierarchy shared across the package.

CLI exit codes map onto these: ConfigError -> 2, FormatError and
ContractError -> 3, CapabilityError -> 4.
"""


class ContractError(ValueError):
    """A caller violated an operation's precondition (shape, range, ...)."""


class FormatError(ValueError):
    """A file or byte stream does not match its declared layout."""


class ConfigError(ValueError):
    """Invalid or unknown configuration key/value."""


class CapabilityError(RuntimeError):
    """The requested mode needs inputs this installation cannot produce."""

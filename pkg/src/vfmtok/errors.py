"""Exception hierarchy shared by every module and mapped to CLI exit codes."""


class VFMTokError(Exception):
    """Base class for all package errors."""


class ContractError(VFMTokError):
    """A caller violated an operation's precondition."""


class ShapeError(ContractError):
    """Tensor extents are incompatible with the requested operation."""


class ConfigError(ContractError):
    """A configuration value is invalid or inconsistent."""


class FormatError(ContractError):
    """An on-disk artifact is malformed."""


class NumericError(VFMTokError):
    """A computation produced a non-finite value."""

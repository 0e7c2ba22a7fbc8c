"""Exception types shared across the toolkit.

The CLI maps these onto process exit codes: ConfigError -> 2,
DataError -> 3, DivergenceError -> 4.  Everything else is a plain bug.
"""


class MsrkitError(Exception):
    """Base class for toolkit errors."""


class ConfigError(MsrkitError):
    """Invalid or inconsistent experiment configuration."""


class DataError(MsrkitError):
    """Malformed dataset bytes or unreachable data files."""


class DivergenceError(MsrkitError):
    """Training produced a non-finite loss; diagnostics were dumped."""


class DegenerateFilterError(MsrkitError):
    """A filter kernel collapsed to (near) zero magnitude.

    The unity-magnitude anchor is supposed to prevent this, so hitting it
    signals a misconfigured run rather than a recoverable state.
    """

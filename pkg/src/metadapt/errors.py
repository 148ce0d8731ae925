"""Error taxonomy shared by all modules.

Exit-code mapping for the CLI lives in cli.py; everything here is a plain
exception type so library callers can catch what they care about.
"""


class MetadaptError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(MetadaptError):
    """Invalid or inconsistent configuration."""


class InputError(MetadaptError):
    """Caller passed arguments that violate an operation's preconditions."""


class DimensionError(InputError):
    """Shape-incompatible tensor arguments."""


class NumericError(MetadaptError):
    """A computation produced NaN/Inf or otherwise left the finite domain."""


class StateError(MetadaptError):
    """Operation invoked in an invalid object state (missing grads, stale tape, ...)."""


class DataIntegrityError(MetadaptError):
    """Corpus or registry contents violate a documented invariant."""

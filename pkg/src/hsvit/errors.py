"""Exception types shared across the package.

Everything user-facing derives from HsvitError so callers can catch one
family.  The split mirrors how failures are produced: bad tensor algebra,
bad configuration, bad runtime usage, malformed files, and protocol
violations between workers.
"""


class HsvitError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(HsvitError, ValueError):
    """Operands have incompatible shapes.  Messages name both shapes."""


class ConfigError(HsvitError, ValueError):
    """A configuration value is invalid or inconsistent with another."""


class UsageError(HsvitError, RuntimeError):
    """An API was called in a state it does not support."""


class FormatError(HsvitError, ValueError):
    """A file or byte stream does not match its declared format."""


class ConsistencyError(HsvitError, ValueError):
    """Two inputs that must agree (e.g. image and label counts) do not."""


class ProtocolError(HsvitError, RuntimeError):
    """Worker message traffic violated the execution protocol."""


class NumericsError(HsvitError, RuntimeError):
    """Training produced a non-finite value.

    Carries enough context to point at the first offending parameter.
    """

    def __init__(self, message, step=None, worker_id=None, param_path=None):
        super().__init__(message)
        self.step = step
        self.worker_id = worker_id
        self.param_path = param_path

"""Exception hierarchy shared by all modules.

The CLI maps these onto distinct exit codes (see cli.py).
"""


class KWTError(Exception):
    """Base class for all errors raised by this package."""


class InputError(KWTError):
    """Bad user-supplied data: malformed waveform, empty dataset, shape mismatch at the API boundary."""


class ConfigurationError(KWTError):
    """Inconsistent configuration: incompatible shapes, invalid hyperparameters, checkpoint/config mismatch."""

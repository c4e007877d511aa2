"""Exception taxonomy shared across the package.

The CLI maps each category to a distinct exit code, so library code should
raise the most specific class that applies.
"""


class MoeSenseError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(MoeSenseError):
    """Invalid configuration: scenario parameters, registry entries, missing templates."""


class InputError(MoeSenseError):
    """Malformed or incompatible runtime input (wrong length, kind, too few packets)."""


class RateError(InputError):
    """Requested communication rate exceeds what the stream can provide."""


class TrainingError(MoeSenseError):
    """Dataset unfit for training (empty, missing classes, mixed feature kinds)."""


class FormatError(MoeSenseError):
    """Corrupt or incompatible serialized file (bad magic, version, truncation)."""


EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INPUT = 3
EXIT_IO = 4
EXIT_FORMAT = 5
EXIT_TRAINING = 6

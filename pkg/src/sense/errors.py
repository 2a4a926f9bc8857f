"""Exception hierarchy shared by the library and the command line.

Each class carries the process exit code the CLI maps it to.
"""


class SenseError(Exception):
    exit_code = 1


class ConfigError(SenseError, ValueError):
    """Invalid configuration: bad keys, incompatible variants, wrong resolution."""

    exit_code = 2


class InputError(SenseError, ValueError):
    """Invalid runtime input such as non-finite pixels or an empty prompt."""

    exit_code = 3


class FormatError(InputError):
    """A file exists but its contents do not parse or do not match expectations."""


class MissingFileError(InputError, LookupError):
    exit_code = 3


class InvariantError(SenseError, RuntimeError):
    """An internal invariant was breached (e.g. a pixel no tile covered)."""

    exit_code = 4


class CoverageError(InvariantError):
    pass


class TrainingDivergedError(InvariantError):
    pass

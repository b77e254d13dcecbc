"""Exception hierarchy shared by every stage of the pipeline."""


class FreqPDEError(ValueError):
    """Base class; carries the process exit code used by the CLI."""

    exit_code = 1


class ShapeError(FreqPDEError):
    pass


class ConfigError(FreqPDEError):
    pass


class FormatError(FreqPDEError):
    """Malformed input file (tensor container, CSV, JSON)."""


class DegenerateInputError(FreqPDEError):
    """Input is well-formed but numerically degenerate (e.g. zero variance)."""

    exit_code = 2

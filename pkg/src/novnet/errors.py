"""Exception hierarchy shared across the toolkit.

Every error raised by novnet derives from NovnetError so callers (and the
CLI) can catch toolkit failures with a single except clause.
"""


class NovnetError(Exception):
    """Base class for all novnet errors."""


class ConfigError(NovnetError):
    """Invalid configuration: bad layer chain, bad hyperparameter, bad spec."""


class DimensionError(NovnetError):
    """Input shape does not match what a layer or operation expects."""


class UsageError(NovnetError):
    """API misuse, e.g. backward called without a forward cache."""


class DivergenceError(NovnetError):
    """Training produced a non-finite loss or gradient."""


class LabelError(NovnetError):
    """A class label is outside the valid range."""


class FormatError(NovnetError):
    """A file does not match its documented format (magic, header, layout)."""


class CorruptionError(FormatError):
    """A file is truncated or otherwise damaged mid-stream."""


class ConsistencyError(FormatError):
    """Two files that must agree (e.g. image/label counts) do not."""


class ParseError(FormatError):
    """A cell or token could not be parsed as the expected type."""


class DatasetError(NovnetError):
    """A dataset violates its invariants (empty, ragged, label gaps)."""


class ProtocolError(NovnetError):
    """An experiment-protocol rule was violated (splits, label spaces)."""


class CalibrationError(NovnetError):
    """Threshold calibration is impossible (e.g. no matched scores)."""


class EvaluationError(NovnetError):
    """Evaluation input is degenerate (e.g. empty score list for ROC)."""


class UnsupportedArchitectureError(NovnetError):
    """The model architecture does not support the requested analysis."""

"""Exception types shared across the package.

Every error carries an ``exit_code`` used by the CLI:
2 = configuration problem, 3 = data problem, 4 = numeric failure.
"""


class PipelineError(Exception):
    exit_code = 1


class ParameterError(PipelineError):
    """Invalid configuration value or argument."""

    exit_code = 2


class BuildError(ParameterError):
    """Model configuration produces an inconsistent shape plan."""


class ShapeError(PipelineError):
    """Array shapes incompatible with the requested operation."""

    exit_code = 2


class DataError(PipelineError):
    exit_code = 3


class IngestionError(DataError):
    """Malformed recording file; message includes the offending line."""


class DatasetError(DataError):
    """Inconsistent dataset, e.g. duplicate subject ids."""


class DegenerateSignalError(DataError):
    """Constant signal where variation is required (normalization, correlation)."""


class UnsupportedRateError(DataError):
    """Sample rate below the 30 Hz target; upsampling is not supported."""


class WeightFileError(DataError):
    """Unreadable weight file."""


class BadMagicError(WeightFileError):
    pass


class TruncatedFileError(WeightFileError):
    pass


class NumericError(PipelineError):
    exit_code = 4


class TrainingError(NumericError):
    """Non-finite loss or gradient during optimization."""


class FusionError(NumericError):
    """Segment fusion requested over a region with a coverage gap."""


class NoPeakError(NumericError):
    """Spectrum has no usable peak in the search band."""


class UndefinedCorrelationError(NumericError):
    """Pearson correlation of a constant series."""


class EmptyReportError(NumericError):
    """Metrics aggregation over an empty input."""

"""Exception types shared across the package.

Plain ``ValueError`` is used for bad arguments; the classes here mark failure
modes a caller may want to catch and handle (resample, retry, report).
"""


class AgglomError(Exception):
    """Base class for package-specific failures."""


class SingularFitError(AgglomError):
    """Least-squares design matrix is rank deficient."""


class CalibrationError(AgglomError):
    """Blur calibration curve is unusable (non-monotone measurements)."""


class DeformationFailedError(AgglomError):
    """Area-preserving rescale did not converge; resample the harmonics."""


class PackingFailedError(AgglomError):
    """Tangent sphere placement exhausted its rejection budget."""


class RenderOverflowError(AgglomError):
    """Agglomerate does not fit on the canvas with the required margin."""


class TrainingDivergedError(AgglomError):
    """Training produced a non-finite cost. Carries the history so far."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history


class ExcludedClassError(AgglomError):
    """Requested a regression for the class that is excluded from analysis."""


class FitFailedError(AgglomError):
    """Rational function fit failed for every tried pole position."""


class ModelFormatError(AgglomError):
    """Persisted model file is malformed; message names the offending field."""

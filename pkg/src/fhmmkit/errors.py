"""Exception hierarchy.

Errors fall in three families so the CLI can map them to exit codes:
configuration problems, data problems, and numerical failures.
"""


class FHMMError(Exception):
    """Base class for every error raised by the package."""


class ConfigError(FHMMError):
    pass


class DataError(FHMMError):
    pass


class NumericalError(FHMMError):
    pass


# configuration
class InvalidOptions(ConfigError):
    pass


class InfeasiblePlan(ConfigError):
    pass


class ConfigurationOverflow(ConfigError):
    pass


class DegenerateComparison(ConfigError):
    pass


class BandTooNarrow(ConfigError):
    pass


# data / model validation
class ShapeMismatch(DataError):
    pass


class NonStochasticColumn(DataError):
    pass


class NonPositiveDefiniteCovariance(DataError):
    pass


class NonCanonicalWeights(DataError):
    pass


class SeriesTooShort(DataError):
    pass


# numerical
class SingularCovariance(NumericalError):
    pass


class NumericalUnderflow(NumericalError):
    pass


class DegenerateMoments(NumericalError):
    pass


class SingularInformation(NumericalError):
    """Raised when the negative Hessian is not positive definite.

    Attributes
    ----------
    eigenvalue : float
        Smallest eigenvalue of ``-H``.
    """

    def __init__(self, message, eigenvalue):
        super().__init__(message)
        self.eigenvalue = eigenvalue


class TaskError(FHMMError):
    """A task inside :func:`fhmmkit.runner.execute_parallel` failed.

    Attributes
    ----------
    index : int
        Position of the first failing task.
    results : list
        Results in task order; failed or unfinished tasks hold ``None``.
    cause : BaseException
    """

    def __init__(self, index, results, cause):
        super().__init__(f"task {index} failed: {type(cause).__name__}: {cause}")
        self.index = index
        self.results = results
        self.cause = cause

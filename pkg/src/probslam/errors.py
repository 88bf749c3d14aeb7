"""Exception types raised across the package."""


class ProbSlamError(Exception):
    """Base class for every error raised by this package."""


class NonPositiveDepth(ProbSlamError, ValueError):
    """A point lies behind or on the camera plane."""


class DimensionMismatch(ProbSlamError, ValueError):
    pass


class Underdetermined(ProbSlamError):
    pass


class SolverDiverged(ProbSlamError):
    pass


class ParseError(ProbSlamError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class NonMonotonicTimestamps(ProbSlamError, ValueError):
    pass


class InvalidBox(ProbSlamError, ValueError):
    pass


class DegenerateConfiguration(ProbSlamError, ValueError):
    pass


class InsufficientPairs(ProbSlamError, ValueError):
    pass


class EmptySeries(ProbSlamError, ValueError):
    pass


class EmptyScene(ProbSlamError):
    pass

"""Exception types raised across the package."""


class SemLoamError(Exception):
    """Base class for all package errors."""


# ingestion
class MalformedFile(SemLoamError):
    pass


class CountMismatch(SemLoamError):
    pass


class MalformedLine(SemLoamError):
    pass


class NonOrthonormalRotation(SemLoamError):
    pass


class MissingField(SemLoamError):
    pass


class DatasetNotFound(SemLoamError):
    pass


# surface fitting
class TooFewPoints(SemLoamError):
    pass


class DegenerateFit(SemLoamError):
    pass


# estimation
class InsufficientMatches(SemLoamError):
    def __init__(self, count, required):
        super().__init__(f"{count} matches available, {required} required")
        self.count = count
        self.required = required


class SolverDiverged(SemLoamError):
    pass


class RegistrationFailed(SemLoamError):
    pass


# evaluation
class TooShort(SemLoamError):
    pass

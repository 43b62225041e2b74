"""Exception types shared across the package."""


class PcnavError(Exception):
    """Base class for all package errors."""


class RejectedInput(PcnavError, ValueError):
    pass


class DegenerateFit(PcnavError):
    pass


class OutOfExtent(PcnavError, ValueError):
    pass


class TooFewPoints(PcnavError):
    pass


class InfeasibleMission(PcnavError):
    pass


class InfeasibleEndpoint(PcnavError):
    pass


class PlanningTimeout(PcnavError):
    pass


class EmptyPopulation(PcnavError, ValueError):
    pass


class Collinearity(PcnavError):
    def __init__(self, message, columns=()):
        super().__init__(message)
        self.columns = tuple(columns)

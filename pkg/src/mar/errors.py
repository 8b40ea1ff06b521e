"""Exception hierarchy.

Data problems derive from ``DataError`` and numerical failures from
``NumericalError`` so the CLI can map them onto exit statuses.
"""


class MarError(Exception):
    pass


class DataError(MarError):
    pass


class NumericalError(MarError):
    pass


class DimensionMismatch(DataError, ValueError):
    pass


class DegenerateVector(NumericalError, ValueError):
    pass


class NonFiniteActivation(NumericalError):
    pass


class NonFiniteLoss(NumericalError):
    pass


class BatchTooSmall(DataError, ValueError):
    pass


class EmptyAgentBank(DataError, ValueError):
    pass


class NoValidViews(MarError):
    pass


class EmptyMiningSet(MarError):
    """Raised when P or N is empty; the trainer treats it as a zero term."""


class LabelOutOfRange(DataError, ValueError):
    pass


class NoPretrainStats(MarError):
    pass


class InvalidScale(NoPretrainStats):
    pass


class EmptyDataset(DataError):
    pass


class EmptyGallery(DataError):
    pass


class NoValidProbes(DataError):
    pass


class InvalidSpec(MarError, ValueError):
    pass


class MalformedFile(DataError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line

"""Exception hierarchy.

Every error raised by the package derives from :class:`GroupShapError`. The
``exit_code`` attribute is what the command line reports for it.
"""


class GroupShapError(Exception):
    exit_code = 2


class DataError(GroupShapError):
    """Input data violates a contract (bad rows, missing columns, ...)."""


class ParseError(DataError):
    pass


class IntegrityError(DataError):
    pass


class SchemaError(DataError):
    pass


class AlignmentError(DataError):
    pass


class EmptyWindowError(DataError):
    pass


class InsufficientDataError(DataError):
    pass


class DegenerateEmbeddingError(DataError):
    pass


class ClusteringError(DataError):
    """Fewer distinct vectors than requested groups."""


class DomainError(DataError):
    """Argument outside the mathematical domain of a function."""


class ConfigurationError(GroupShapError):
    exit_code = 1


class EnumerationLimitError(GroupShapError):
    exit_code = 1


class DimensionError(GroupShapError):
    exit_code = 3


class NumericalError(GroupShapError):
    exit_code = 3


class TrainingError(NumericalError):
    pass

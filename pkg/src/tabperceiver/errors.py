"""Exception hierarchy shared by every subpackage."""


class TabPerceiverError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(TabPerceiverError, ValueError):
    pass


class ValidationError(TabPerceiverError, ValueError):
    pass


class SchemaError(TabPerceiverError, ValueError):
    pass


class UsageError(TabPerceiverError, ValueError):
    pass


class PreconditionError(TabPerceiverError, ValueError):
    pass


class TrainingError(TabPerceiverError, RuntimeError):
    pass


class LoadError(TabPerceiverError, ValueError):
    """A data file could not be parsed; carries row/column coordinates."""

    def __init__(self, message, row=None, column=None):
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column!r}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.row = row
        self.column = column


class FormatError(TabPerceiverError, ValueError):
    pass


class SplitError(TabPerceiverError, ValueError):
    pass


class UndefinedMetricError(TabPerceiverError, ValueError):
    pass


class DegenerateTestError(TabPerceiverError, ValueError):
    pass

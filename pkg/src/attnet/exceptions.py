"""Exception hierarchy shared by all attnet modules."""


class AttnetError(Exception):
    """Base class for every error raised by attnet."""

    category = "runtime"


class DimensionError(AttnetError, ValueError):
    category = "dimension"


class ConfigError(AttnetError, ValueError):
    category = "config"


class ContractError(AttnetError, RuntimeError):
    """A documented precondition of an operation was violated."""

    category = "contract"


class ParseError(AttnetError, ValueError):
    """Malformed input file. ``offset`` is a byte offset, ``line`` a 1-based line number."""

    category = "parse"

    def __init__(self, message, *, offset=None, line=None):
        where = []
        if offset is not None:
            where.append(f"byte offset {offset}")
        if line is not None:
            where.append(f"line {line}")
        if where:
            message = f"{message} (at {', '.join(where)})"
        super().__init__(message)
        self.offset = offset
        self.line = line


class EmptyCloudError(ParseError):
    category = "empty-cloud"


class EmptyImageError(AttnetError, ValueError):
    category = "empty-image"


class SamplingError(AttnetError, RuntimeError):
    category = "sampling"


class TrainingError(AttnetError, RuntimeError):
    category = "training"

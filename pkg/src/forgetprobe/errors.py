"""Exception hierarchy shared across the package."""


class ForgetProbeError(Exception):
    """Base class for all package errors."""


class DimensionError(ForgetProbeError, ValueError):
    pass


class StructuralError(ForgetProbeError, ValueError):
    pass


class InputError(ForgetProbeError, ValueError):
    pass


class ConfigurationError(ForgetProbeError, ValueError):
    pass


class UsageError(ForgetProbeError, ValueError):
    pass


class FormatError(ForgetProbeError):
    """Malformed data file. ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, path=None, offset=None):
        self.path = path
        self.offset = offset
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"byte offset {offset}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


class ProtocolError(ForgetProbeError, RuntimeError):
    pass


class DegenerateInputError(ForgetProbeError, ValueError):
    pass


class NumericalError(ForgetProbeError, ArithmeticError):
    pass


class AggregationError(ForgetProbeError, ValueError):
    pass


class ReportError(ForgetProbeError):
    pass

"""Exception types raised across the package."""


class BdjumpError(Exception):
    """Base class for all package errors."""


class BoundViolated(BdjumpError):
    """A kernel's thinning bound was exceeded by its own total rate."""


class DuplicatePoint(BdjumpError):
    pass


class MissingPoint(BdjumpError):
    pass


class SamplerUnavailable(BdjumpError):
    pass


class TooLarge(BdjumpError):
    pass


class EnvelopeViolated(BdjumpError):
    """Rejection sampling found a target density above its envelope."""


class NotReducible(BdjumpError):
    """The model cannot be mapped onto a pure count process."""


class GridError(BdjumpError):
    """The step does not tile the requested time interval."""


class ParseError(BdjumpError):
    def __init__(self, message, line=None, field=None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)


class ValidationError(BdjumpError):
    pass

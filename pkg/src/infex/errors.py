class ConfigurationError(ValueError):
    """Shapes, geometry or settings that cannot work together."""


class InputValidationError(ValueError):
    """A well-formed call received an out-of-domain value."""


class UsageError(RuntimeError):
    """An object was used in a state that does not allow the call."""


class FormatError(ValueError):
    """Malformed on-disk data; ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset=None, path=None):
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"byte {offset}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.offset = offset
        self.path = path


class NonFiniteError(FloatingPointError):
    """Raised when a loss or gradient stops being finite during training."""

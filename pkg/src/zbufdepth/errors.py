"""Exception types shared across the package."""


class InvalidInput(ValueError):
    """Raised when arguments violate a documented precondition."""


class FormatError(ValueError):
    """Raised when a file payload cannot be parsed.

    ``offset`` is the byte position at which parsing failed.
    """

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class InternalError(RuntimeError):
    """Raised when an internal invariant is violated."""

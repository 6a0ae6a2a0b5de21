"""Exception types shared across the package."""


class LarnnError(Exception):
    pass


class DimensionError(LarnnError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(LarnnError, ValueError):
    """A precondition on argument values was violated."""


class NumericError(LarnnError, ArithmeticError):
    """A NaN or infinity appeared where a finite value was required."""


class FormatError(LarnnError, ValueError):
    """A serialized file is malformed.

    ``offset`` is the byte position at which parsing failed, when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset

"""Exception types raised across the package."""


class BfpError(Exception):
    """Base class for all fastbfp errors."""


class NonFiniteInput(BfpError, ValueError):
    pass


class GroupSizeMismatch(BfpError, ValueError):
    pass


class OddMantissaWidth(BfpError, ValueError):
    pass


class ExponentOverflow(BfpError, OverflowError):
    pass


class MalformedImage(BfpError, ValueError):
    pass


class OutOfRangeIndex(BfpError, IndexError):
    pass


class ShapeMismatch(BfpError, ValueError):
    pass


class Divergence(BfpError, FloatingPointError):
    """Training produced a non-finite loss or gradient."""

class CSGPFAError(Exception):
    """Base class for errors raised by the gpfa package."""


class DatasetError(CSGPFAError, ValueError):
    """Input files are malformed or describe an inconsistent tensor."""


class NumericalError(CSGPFAError, ArithmeticError):
    """A factorization or quadrature failed."""

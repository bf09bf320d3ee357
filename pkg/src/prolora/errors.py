"""Exception hierarchy shared by every module of the package."""


class ProLoRAError(Exception):
    """Base class for all errors raised by this package."""


class InvalidMatrix(ProLoRAError, ValueError):
    """Matrix is not 2D or holds NaN/Inf entries."""


class NumericalFailure(ProLoRAError, ArithmeticError):
    """A LAPACK routine failed to converge."""


class ShapeError(ProLoRAError, ValueError):
    pass


class RankError(ProLoRAError, ValueError):
    pass


class DegenerateSubspace(ProLoRAError, ValueError):
    """A subspace of dimension zero was used where a non-empty one is required."""


class EmptyModel(ProLoRAError, ValueError):
    pass


class EmptyReport(ProLoRAError, ValueError):
    pass


class FormatError(ProLoRAError, ValueError):
    """Tensor archive is malformed."""


class IoError(ProLoRAError, OSError):
    """Archive could not be read or written (missing, truncated, unwritable)."""


class SpecError(ProLoRAError, ValueError):
    """Synthetic generation spec is invalid or infeasible."""


class SizeError(ProLoRAError, ValueError):
    pass

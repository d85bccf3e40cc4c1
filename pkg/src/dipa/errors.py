"""Exception hierarchy.

Every error carries the process exit code the CLI maps it to:
1 usage, 2 data/format, 3 numerical.
"""


class DipaError(Exception):
    exit_code = 1


class UsageError(DipaError, ValueError):
    exit_code = 1


class ShapeError(UsageError):
    pass


class DataError(DipaError):
    exit_code = 2


class ContainerError(DataError):
    pass


class MagicMismatchError(ContainerError):
    pass


class IntegrityError(ContainerError):
    pass


class NumericalError(DipaError, ArithmeticError):
    exit_code = 3


class NonFiniteError(NumericalError):
    pass


class DegenerateVectorError(NumericalError):
    pass
